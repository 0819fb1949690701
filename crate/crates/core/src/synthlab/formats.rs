//! On-disk formats.
//!
//! Feature file (little endian):
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 4     | magic `ACTF`                             |
//! | 4     | format version, u32 = 1                  |
//! | 1     | stream tag, `R` (appearance) or `F` (motion) |
//! | 1     | byte order, always `L`                   |
//! | 2     | reserved, zero                           |
//! | 4     | frames, u32                              |
//! | 4     | channels per cell, u32                   |
//! | 4     | grids, u32                               |
//! | 4·G   | cells per grid side, u32 each            |
//! | rest  | f32 values, frame-major, then grid, row, column, channel |
//!
//! Model file (little endian): magic `ACTM`, version u32 = 1, stream tag,
//! byte order `L`, two reserved bytes, then u32 classes, K, channels, anchor
//! shapes per cell and grids, followed by every parameter as f64 in
//! [`HeadParams::params`] order.
//!
//! Tube file: one text line per tube,
//! `video class score start x1 y1 x2 y2 ...` with four coordinates per frame.
//! Ground-truth annotations use the same layout.
//!
//! Tubelet file: one text line per scored tubelet,
//! `video start anchor n s_0 ... s_{n-1} x1 y1 x2 y2 ...` where `n` is the
//! score count (background first).
//!
//! Numbers in text files are printed in the shortest form that parses back to
//! the same value.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use super::scene::Stream;
use crate::error::{Error, Result};
use crate::geometry::{ActionTube, BBox, Tubelet};
use crate::head::{FeatureVolume, GridFeatures, HeadParams, Linear, GridParams, ScoredTubelet};

const FEATURE_MAGIC: &[u8; 4] = b"ACTF";
const MODEL_MAGIC: &[u8; 4] = b"ACTM";
const VERSION: u32 = 1;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: format!("byte {}: {}", self.pos, message.into()),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated, {n} more bytes expected")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<Stream> {
        if self.take(4)? != magic {
            return Err(self.fail(format!("not a {} file", String::from_utf8_lossy(magic))));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(self.fail(format!("unsupported version {v}")));
        }
        let tag = self.take(1)?[0];
        let stream = Stream::from_tag(tag).ok_or_else(|| self.fail(format!("unknown stream tag {tag:#04x}")))?;
        if self.take(1)?[0] != b'L' {
            return Err(self.fail("only little-endian data is supported"));
        }
        self.take(2)?;
        Ok(stream)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(out: &mut Vec<u8>, magic: &[u8; 4], stream: Stream) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[stream.tag(), b'L', 0, 0]);
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("dimension fits u32").to_le_bytes());
}

/// Per-frame features of one video and stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub stream: Stream,
    pub frames: Vec<FeatureVolume>,
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        header(&mut out, FEATURE_MAGIC, self.stream);
        let first = self.frames.first();
        put_u32(&mut out, self.frames.len());
        put_u32(&mut out, first.map_or(0, FeatureVolume::channels));
        let sizes: Vec<usize> = first.map_or(Vec::new(), |f| f.grids.iter().map(|g| g.size).collect());
        put_u32(&mut out, sizes.len());
        for &s in &sizes {
            put_u32(&mut out, s);
        }
        for frame in &self.frames {
            for grid in &frame.grids {
                for v in &grid.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        let stream = r.header(FEATURE_MAGIC)?;
        let n_frames = r.usize()?;
        let channels = r.usize()?;
        let n_grids = r.usize()?;
        let sizes = (0..n_grids).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let per_frame = sizes
            .iter()
            .try_fold(0usize, |acc, &s| s.checked_mul(s)?.checked_mul(channels)?.checked_add(acc))
            .unwrap_or(usize::MAX);
        let expected = n_frames.checked_mul(per_frame).and_then(|n| n.checked_mul(4));
        if expected != Some(bytes.len() - r.pos) {
            return Err(r.fail(format!(
                "{} data bytes for {n_frames} frames of {per_frame} values",
                bytes.len() - r.pos
            )));
        }
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let mut grids = Vec::with_capacity(n_grids);
            for &s in &sizes {
                let raw = r.take(s * s * channels * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                grids.push(GridFeatures { size: s, channels, data });
            }
            frames.push(FeatureVolume { grids });
        }
        r.finish()?;
        Ok(FeatureFile { stream, frames })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_bytes(path)?)
    }
}

/// A trained head and the stream it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub stream: Stream,
    pub params: HeadParams,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::new();
        header(&mut out, MODEL_MAGIC, self.stream);
        for v in [p.num_classes, p.k, p.channels, p.anchors_per_cell, p.grids.len()] {
            put_u32(&mut out, v);
        }
        for v in p.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        let stream = r.header(MODEL_MAGIC)?;
        let num_classes = r.usize()?;
        let k = r.usize()?;
        let channels = r.usize()?;
        let a = r.usize()?;
        let n_grids = r.usize()?;
        let per_grid = (|| {
            let inputs = k.checked_mul(channels)?.checked_add(1)?;
            let outputs = a.checked_mul(num_classes.checked_add(1)?.checked_add(k.checked_mul(4)?)?)?;
            inputs.checked_mul(outputs)?.checked_mul(n_grids)
        })();
        let remaining = bytes.len() - r.pos;
        if per_grid.and_then(|n| n.checked_mul(8)) != Some(remaining) {
            return Err(r.fail(format!("{remaining} parameter bytes do not match the declared dimensions")));
        }
        let grid = GridParams {
            score: Linear::zeros(k * channels, a * (num_classes + 1)),
            regression: Linear::zeros(k * channels, a * 4 * k),
        };
        let mut params = HeadParams {
            num_classes,
            k,
            channels,
            anchors_per_cell: a,
            grids: vec![grid; n_grids],
        };
        for v in params.params_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
        r.finish()?;
        Ok(ModelFile { stream, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_bytes(path)?)
    }
}

/// Whitespace-separated fields of one text record.
struct Fields<'a> {
    path: &'a Path,
    line: usize,
    items: Vec<&'a str>,
    pos: usize,
}

impl<'a> Fields<'a> {
    fn new(path: &'a Path, line: usize, text: &'a str) -> Self {
        Fields { path, line, items: text.split_whitespace().collect(), pos: 0 }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), line: self.line, message: message.into() }
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let Some(s) = self.items.get(self.pos) else {
            return Err(self.fail(format!("missing {what}")));
        };
        self.pos += 1;
        s.parse().map_err(|_| self.fail(format!("bad {what} `{s}`")))
    }

    fn word(&mut self, what: &str) -> Result<&'a str> {
        let s = self.items.get(self.pos).ok_or_else(|| self.fail(format!("missing {what}")))?;
        self.pos += 1;
        Ok(s)
    }

    fn boxes(&mut self) -> Result<Vec<BBox>> {
        let rest = &self.items[self.pos..];
        if rest.is_empty() || !rest.len().is_multiple_of(4) {
            return Err(self.fail(format!("{} coordinates do not form whole boxes", rest.len())));
        }
        let mut boxes = Vec::with_capacity(rest.len() / 4);
        for _ in 0..rest.len() / 4 {
            let b = BBox::new(
                self.next("x1")?,
                self.next("y1")?,
                self.next("x2")?,
                self.next("y2")?,
            );
            if !b.is_valid() {
                return Err(self.fail(format!("invalid box {} {} {} {}", b.x1, b.y1, b.x2, b.y2)));
            }
            boxes.push(b);
        }
        Ok(boxes)
    }
}

fn push_boxes(s: &mut String, boxes: &[BBox]) {
    for b in boxes {
        s.push_str(&format!(" {} {} {} {}", b.x1, b.y1, b.x2, b.y2));
    }
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Tubes grouped by video id, in file order within each video.
pub type TubeSet = BTreeMap<String, Vec<ActionTube>>;

pub fn tubes_to_text(tubes: &TubeSet) -> String {
    let mut s = String::new();
    for (video, list) in tubes {
        for t in list {
            s.push_str(&format!("{video} {} {} {}", t.label, t.score, t.start_frame));
            push_boxes(&mut s, &t.boxes);
            s.push('\n');
        }
    }
    s
}

pub fn tubes_from_text(path: &Path, text: &str) -> Result<TubeSet> {
    let mut out = TubeSet::new();
    for (line, rec) in records(text) {
        let mut f = Fields::new(path, line, rec);
        let video = f.word("video id")?.to_string();
        let label = f.next("class")?;
        let score = f.next("score")?;
        let start_frame = f.next("start frame")?;
        let boxes = f.boxes()?;
        out.entry(video).or_default().push(ActionTube { start_frame, boxes, label, score });
    }
    Ok(out)
}

pub fn read_tubes(path: &Path) -> Result<TubeSet> {
    tubes_from_text(path, &read_text(path)?)
}

pub fn write_tubes(path: &Path, tubes: &TubeSet) -> Result<()> {
    write_file(path, tubes_to_text(tubes).as_bytes())
}

/// Tubelets of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDetections {
    pub start_frame: usize,
    pub tubelets: Vec<ScoredTubelet>,
}

/// Per video, the detections of each sequence in increasing start order.
pub type DetectionSet = BTreeMap<String, Vec<SequenceDetections>>;

pub fn detections_to_text(dets: &DetectionSet) -> String {
    let mut s = String::new();
    for (video, seqs) in dets {
        for seq in seqs {
            for t in &seq.tubelets {
                s.push_str(&format!("{video} {} {} {}", seq.start_frame, t.anchor, t.scores.len()));
                for v in &t.scores {
                    s.push_str(&format!(" {v}"));
                }
                push_boxes(&mut s, &t.tubelet.boxes);
                s.push('\n');
            }
        }
    }
    s
}

pub fn detections_from_text(path: &Path, text: &str) -> Result<DetectionSet> {
    let mut out = DetectionSet::new();
    for (line, rec) in records(text) {
        let mut f = Fields::new(path, line, rec);
        let video = f.word("video id")?.to_string();
        let start_frame: usize = f.next("start frame")?;
        let anchor = f.next("anchor")?;
        let n: usize = f.next("score count")?;
        if n < 2 {
            return Err(f.fail("at least background and one class score are required"));
        }
        let scores = (0..n).map(|_| f.next("score")).collect::<Result<Vec<f64>>>()?;
        let boxes = f.boxes()?;
        let seqs = out.entry(video).or_default();
        match seqs.last_mut() {
            Some(last) if last.start_frame == start_frame => {}
            Some(last) if last.start_frame > start_frame => {
                return Err(f.fail(format!(
                    "start frame {start_frame} after {} breaks the sequence order",
                    last.start_frame
                )));
            }
            _ => seqs.push(SequenceDetections { start_frame, tubelets: Vec::new() }),
        }
        let seq = seqs.last_mut().expect("pushed above");
        if let Some(first) = seq.tubelets.first() {
            if first.tubelet.len() != boxes.len() || first.scores.len() != n {
                return Err(f.fail("tubelet length or class count differs within the sequence"));
            }
        }
        seq.tubelets.push(ScoredTubelet { tubelet: Tubelet::new(start_frame, boxes), scores, anchor });
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<DetectionSet> {
    detections_from_text(path, &read_text(path)?)
}

pub fn write_detections(path: &Path, dets: &DetectionSet) -> Result<()> {
    write_file(path, detections_to_text(dets).as_bytes())
}
