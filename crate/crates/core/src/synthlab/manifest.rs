//! Dataset directories: manifest, per-video feature files and annotations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::formats::{read_tubes, FeatureFile, TubeSet};
use super::kv::{join, KeyValues};
use super::scene::Stream;
use crate::anchors::AnchorConfig;
use crate::error::{Error, Result};
use crate::geometry::ActionTube;
use crate::head::FeatureVolume;
use crate::metrics::VideoAnnotation;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ANNOTATION_FILE: &str = "annotations.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub id: String,
    pub split: Split,
    pub frames: usize,
    /// Relative to the dataset directory.
    pub rgb: PathBuf,
    pub flow: PathBuf,
}

impl VideoEntry {
    pub fn features(&self, s: Stream) -> &Path {
        match s {
            Stream::Rgb => &self.rgb,
            Stream::Flow => &self.flow,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    /// Anchor layout; its `k` is the default sequence length.
    pub layout: AnchorConfig,
    pub annotations: PathBuf,
    pub videos: Vec<VideoEntry>,
}

const KEYS: &[&str] = &[
    "format",
    "classes",
    "k",
    "image_width",
    "image_height",
    "grid_sizes",
    "scales",
    "aspect_ratios",
    "extra_square",
    "annotations",
    "video",
];

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn to_text(&self) -> String {
        let l = &self.layout;
        let mut s = String::from("format = 1\n");
        s.push_str(&format!("classes = {}\n", self.class_names.join(",")));
        s.push_str(&format!("k = {}\n", l.k));
        s.push_str(&format!("image_width = {}\n", l.image_width));
        s.push_str(&format!("image_height = {}\n", l.image_height));
        s.push_str(&format!("grid_sizes = {}\n", join(&l.grid_sizes)));
        s.push_str(&format!("scales = {}\n", join(&l.scales)));
        s.push_str(&format!("aspect_ratios = {}\n", join(&l.aspect_ratios)));
        s.push_str(&format!("extra_square = {}\n", l.extra_square));
        s.push_str(&format!("annotations = {}\n", self.annotations.display()));
        for v in &self.videos {
            s.push_str(&format!(
                "video = {} {} {} {} {}\n",
                v.id,
                v.split.name(),
                v.frames,
                v.rgb.display(),
                v.flow.display()
            ));
        }
        s
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(KEYS)?;
        let format: u32 = kv.require("format")?;
        if format != 1 {
            let line = kv.entry("format").map_or(0, |e| e.line);
            return Err(kv.error(line, format!("unsupported manifest format {format}")));
        }
        let missing = |key: &str| Error::Format { path: kv.path.clone(), message: format!("missing key `{key}`") };
        let layout = AnchorConfig {
            image_width: kv.require("image_width")?,
            image_height: kv.require("image_height")?,
            grid_sizes: kv.list("grid_sizes")?.ok_or_else(|| missing("grid_sizes"))?,
            scales: kv.list("scales")?.ok_or_else(|| missing("scales"))?,
            aspect_ratios: kv.list("aspect_ratios")?.ok_or_else(|| missing("aspect_ratios"))?,
            extra_square: kv.require("extra_square")?,
            k: kv.require("k")?,
        };
        layout
            .validate()
            .map_err(|e| Error::Format { path: kv.path.clone(), message: e.to_string() })?;
        let mut videos = Vec::new();
        for e in kv.all("video") {
            let f: Vec<&str> = e.value.split_whitespace().collect();
            let [id, split, frames, rgb, flow] = f[..] else {
                return Err(kv.error(e.line, "expected `video = id split frames rgb-path flow-path`"));
            };
            if videos.iter().any(|v: &VideoEntry| v.id == id) {
                return Err(kv.error(e.line, format!("duplicate video `{id}`")));
            }
            videos.push(VideoEntry {
                id: id.to_string(),
                split: split.parse().map_err(|err: Error| kv.error(e.line, err.to_string()))?,
                frames: frames.parse().map_err(|_| kv.error(e.line, format!("bad frame count `{frames}`")))?,
                rgb: rgb.into(),
                flow: flow.into(),
            });
        }
        Ok(Manifest {
            class_names: kv.list("classes")?.ok_or_else(|| missing("classes"))?,
            layout,
            annotations: kv.require::<String>("annotations")?.into(),
            videos,
        })
    }
}

/// An opened dataset directory with its annotations loaded and checked.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub annotations: BTreeMap<String, Vec<ActionTube>>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let manifest = Manifest::from_kv(&KeyValues::read(&path)?)?;
        let ann_path = dir.join(&manifest.annotations);
        let tubes = read_tubes(&ann_path)?;
        let ds = Dataset { dir: dir.to_path_buf(), manifest, annotations: BTreeMap::new() };
        let annotations = ds.check_annotations(&ann_path, tubes)?;
        for v in &ds.manifest.videos {
            for s in [Stream::Rgb, Stream::Flow] {
                let p = dir.join(v.features(s));
                if !p.is_file() {
                    return Err(Error::Format { path: path.clone(), message: format!("missing feature file {}", p.display()) });
                }
            }
        }
        Ok(Dataset { annotations, ..ds })
    }

    fn check_annotations(&self, path: &Path, tubes: TubeSet) -> Result<BTreeMap<String, Vec<ActionTube>>> {
        let fail = |m: String| Err(Error::Format { path: path.to_path_buf(), message: m });
        for (video, list) in &tubes {
            let Some(entry) = self.manifest.videos.iter().find(|v| &v.id == video) else {
                return fail(format!("video `{video}` is not in the manifest"));
            };
            for t in list {
                if t.label >= self.manifest.num_classes() {
                    return fail(format!("video `{video}`: class {} out of range", t.label));
                }
                if t.end_frame() >= entry.frames {
                    return fail(format!("video `{video}`: tube ends at frame {} of {}", t.end_frame(), entry.frames));
                }
            }
        }
        Ok(tubes)
    }

    pub fn videos(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.manifest.videos.iter().filter(move |v| v.split == split)
    }

    pub fn tubes(&self, video: &str) -> &[ActionTube] {
        self.annotations.get(video).map_or(&[], Vec::as_slice)
    }

    pub fn annotation(&self, entry: &VideoEntry) -> VideoAnnotation {
        VideoAnnotation { num_frames: entry.frames, tubes: self.tubes(&entry.id).to_vec() }
    }

    /// Per-frame features, checked against the manifest and anchor layout.
    pub fn features(&self, entry: &VideoEntry, stream: Stream) -> Result<Vec<FeatureVolume>> {
        let path = self.dir.join(entry.features(stream));
        let file = FeatureFile::read(&path)?;
        let fail = |m: String| Err(Error::Format { path: path.clone(), message: m });
        if file.stream != stream {
            return fail(format!("holds {} features, {} expected", file.stream.name(), stream.name()));
        }
        if file.frames.len() != entry.frames {
            return fail(format!("{} frames, manifest says {}", file.frames.len(), entry.frames));
        }
        let sizes: Vec<usize> = file.frames.first().map_or(Vec::new(), |f| f.grids.iter().map(|g| g.size).collect());
        if !file.frames.is_empty() && sizes != self.manifest.layout.grid_sizes {
            return fail(format!("grid sizes {sizes:?} differ from the layout {:?}", self.manifest.layout.grid_sizes));
        }
        Ok(file.frames)
    }
}
