//! Dataset-level steps behind the command-line tool: generate, train,
//! detect, link, evaluate and the anchor recall study.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::dataset::{eligible_sequences, DatasetConfig};
use super::formats::{tubes_to_text, write_file, DetectionSet, FeatureFile, ModelFile, SequenceDetections, TubeSet};
use super::manifest::{Dataset, Manifest, Split, VideoEntry, ANNOTATION_FILE, MANIFEST_FILE};
use super::scene::{generate_scene, Stream};
use crate::anchors::{anchor_recall, generate_anchors, AnchorConfig, RecallTable};
use crate::error::{Error, Result};
use crate::geometry::{ActionTube, Tubelet};
use crate::head::{
    fuse, run_stream, stack_features, train, Fusion, HeadParams, ScoredTubelet, TrainConfig,
    TrainOutcome, TrainingSample, SCORE_FLOOR,
};
use crate::linker::{link_video, LinkerConfig};
use crate::matchloss::GtTubelet;
use crate::metrics::{error_breakdown, evaluate, frame_detections_from_tubelets, EvalConfig, EvalReport, ErrorBreakdown, VideoAnnotation};

/// Write every scene of `cfg` under `out`: feature files, annotations and
/// the manifest. Scenes are rendered in parallel.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let width = cfg.num_videos().to_string().len().max(3);
    let videos: Vec<(VideoEntry, Vec<ActionTube>)> = (0..cfg.num_videos())
        .into_par_iter()
        .map(|i| {
            let id = format!("v{i:0width$}");
            let scene = generate_scene(&cfg.scene(i)?, &cfg.layout)?;
            let entry = VideoEntry {
                id: id.clone(),
                split: if i < cfg.train_videos { Split::Train } else { Split::Test },
                frames: cfg.frames,
                rgb: PathBuf::from("features").join(format!("{id}.rgb")),
                flow: PathBuf::from("features").join(format!("{id}.flow")),
            };
            for s in [Stream::Rgb, Stream::Flow] {
                let file = FeatureFile { stream: s, frames: scene.stream(s).to_vec() };
                file.write(&out.join(entry.features(s)))?;
            }
            Ok((entry, scene.tubes))
        })
        .collect::<Result<_>>()?;
    let mut tubes = TubeSet::new();
    for (entry, t) in &videos {
        tubes.insert(entry.id.clone(), t.clone());
    }
    write_file(&out.join(ANNOTATION_FILE), tubes_to_text(&tubes).as_bytes())?;
    let manifest = Manifest {
        class_names: cfg.class_names.clone(),
        layout: cfg.layout.clone(),
        annotations: ANNOTATION_FILE.into(),
        videos: videos.into_iter().map(|(e, _)| e).collect(),
    };
    write_file(&out.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// The dataset layout with sequence length `k`.
pub fn layout_with_k(ds: &Dataset, k: usize) -> AnchorConfig {
    AnchorConfig { k, ..ds.manifest.layout.clone() }
}

/// Ground-truth tubelets of the window `start..start + k`, from every tube
/// covering it entirely.
pub fn window_gts(tubes: &[ActionTube], start: usize, k: usize) -> Vec<GtTubelet> {
    tubes
        .iter()
        .filter_map(|t| t.window(start, k).map(|tubelet| GtTubelet { tubelet, label: t.label }))
        .collect()
}

/// One training sample per eligible sequence of every training video.
pub fn training_samples(ds: &Dataset, stream: Stream, k: usize) -> Result<Vec<TrainingSample>> {
    let videos: Vec<&VideoEntry> = ds.videos(Split::Train).collect();
    let per_video: Vec<Vec<TrainingSample>> = videos
        .par_iter()
        .map(|v| {
            let frames = ds.features(v, stream)?;
            let tubes = ds.tubes(&v.id);
            eligible_sequences(tubes, v.frames, k)
                .into_iter()
                .map(|f| {
                    Ok(TrainingSample {
                        stacked: stack_features(&frames[f..f + k])?,
                        gts: window_gts(tubes, f, k),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

/// Standard deviation of the initial head weights.
pub const INIT_STD: f64 = 0.01;

/// Train a head on one stream of the training split.
pub fn train_stream(ds: &Dataset, stream: Stream, k: usize, cfg: &TrainConfig) -> Result<(ModelFile, TrainOutcome)> {
    let layout = layout_with_k(ds, k);
    let anchors = generate_anchors(&layout)?;
    let samples = training_samples(ds, stream, k)?;
    let channels = match samples.first() {
        Some(s) => s.stacked.channels() / k,
        None => return Err(Error::Config(format!("no eligible {k}-frame training sequences"))),
    };
    let init = HeadParams::random(&layout, ds.manifest.num_classes(), channels, INIT_STD, cfg.seed);
    let outcome = train(&samples, &anchors, init, cfg)?;
    Ok((ModelFile { stream, params: outcome.params.clone() }, outcome))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub score_floor: f64,
    /// Tubelets kept per sequence and class, by descending class score.
    pub keep_per_class: usize,
    pub split: Split,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { score_floor: SCORE_FLOOR, keep_per_class: 50, split: Split::Test }
    }
}

/// Union of the best `keep` tubelets of every class, in anchor order.
fn keep_top(dets: Vec<ScoredTubelet>, num_classes: usize, keep: usize, floor: f64) -> Vec<ScoredTubelet> {
    let mut chosen = vec![false; dets.len()];
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_score(c) > floor).collect();
        idx.sort_by(|&a, &b| dets[b].class_score(c).total_cmp(&dets[a].class_score(c)).then(a.cmp(&b)));
        for i in idx.into_iter().take(keep) {
            chosen[i] = true;
        }
    }
    dets.into_iter().zip(chosen).filter(|(_, c)| *c).map(|(d, _)| d).collect()
}

fn check_model(ds: &Dataset, model: &ModelFile, expected: Stream) -> Result<AnchorConfig> {
    if model.stream != expected {
        return Err(Error::Config(format!(
            "a {} model was given where a {} model is expected",
            model.stream.name(),
            expected.name()
        )));
    }
    if model.params.num_classes != ds.manifest.num_classes() {
        return Err(Error::Shape(format!(
            "model has {} classes, dataset {}",
            model.params.num_classes,
            ds.manifest.num_classes()
        )));
    }
    let layout = layout_with_k(ds, model.params.k);
    model.params.check_layout(&layout)?;
    Ok(layout)
}

/// Run the head(s) on every sequence of the chosen split.
pub fn detect_dataset(
    ds: &Dataset,
    rgb: &ModelFile,
    flow: Option<(&ModelFile, Fusion)>,
    cfg: &DetectConfig,
) -> Result<DetectionSet> {
    let layout = check_model(ds, rgb, Stream::Rgb)?;
    if let Some((f, _)) = flow {
        check_model(ds, f, Stream::Flow)?;
        if f.params.k != rgb.params.k {
            return Err(Error::Shape(format!("stream models use K={} and K={}", rgb.params.k, f.params.k)));
        }
    }
    let k = layout.k;
    let c = ds.manifest.num_classes();
    let anchors = generate_anchors(&layout)?;
    let videos: Vec<&VideoEntry> = ds.videos(cfg.split).collect();
    let results: Vec<(String, Vec<SequenceDetections>)> = videos
        .par_iter()
        .map(|v| {
            let rgb_frames = ds.features(v, Stream::Rgb)?;
            let flow_frames = flow.map(|_| ds.features(v, Stream::Flow)).transpose()?;
            let mut seqs = Vec::new();
            for start in 0..(v.frames + 1).saturating_sub(k) {
                let window = start..start + k;
                let out_rgb = run_stream(&rgb.params, &stack_features(&rgb_frames[window.clone()])?, &anchors, start)?;
                let dets = match (flow, &flow_frames) {
                    (Some((model, mode)), Some(frames)) => {
                        let out_flow = run_stream(&model.params, &stack_features(&frames[window])?, &anchors, start)?;
                        fuse(&out_rgb, &out_flow, mode, cfg.score_floor)?
                    }
                    _ => out_rgb.above_floor(cfg.score_floor),
                };
                let tubelets = keep_top(dets, c, cfg.keep_per_class, cfg.score_floor);
                if !tubelets.is_empty() {
                    seqs.push(SequenceDetections { start_frame: start, tubelets });
                }
            }
            Ok((v.id.clone(), seqs))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().collect())
}

/// Link the tubelets of every video into tubes.
pub fn link_detections(dets: &DetectionSet, cfg: &LinkerConfig) -> Result<TubeSet> {
    let mut out = TubeSet::new();
    for (video, seqs) in dets {
        let Some(first) = seqs.iter().flat_map(|s| s.tubelets.first()).next() else {
            out.insert(video.clone(), Vec::new());
            continue;
        };
        if first.tubelet.len() != cfg.k {
            return Err(Error::Shape(format!(
                "video `{video}`: tubelets span {} frames, linker expects K={}",
                first.tubelet.len(),
                cfg.k
            )));
        }
        let c = first.num_classes();
        let sequences: Vec<(usize, Vec<ScoredTubelet>)> =
            seqs.iter().map(|s| (s.start_frame, s.tubelets.clone())).collect();
        out.insert(video.clone(), link_video(&sequences, c, cfg)?);
    }
    Ok(out)
}

/// Sequence length of a detection set, if it holds any tubelet.
pub fn detections_k(dets: &DetectionSet) -> Option<usize> {
    dets.values().flatten().flat_map(|s| s.tubelets.first()).map(|t| t.tubelet.len()).next()
}

fn check_videos<'a>(ds: &Dataset, keys: impl Iterator<Item = &'a String>, what: &str) -> Result<()> {
    for id in keys {
        if !ds.manifest.videos.iter().any(|v| &v.id == id) {
            return Err(Error::Config(format!("{what} mention video `{id}`, which is not in the dataset")));
        }
    }
    Ok(())
}

/// Ground truth, tubes and tubelets per video.
pub type Aligned = (Vec<VideoAnnotation>, Vec<Vec<ActionTube>>, Vec<Vec<ScoredTubelet>>);

/// Ground truth, tubes and tubelets of the chosen split, aligned by video.
pub fn aligned(
    ds: &Dataset,
    split: Split,
    tubes: Option<&TubeSet>,
    dets: Option<&DetectionSet>,
) -> Result<Aligned> {
    if let Some(t) = tubes {
        check_videos(ds, t.keys(), "tubes")?;
    }
    if let Some(d) = dets {
        check_videos(ds, d.keys(), "detections")?;
    }
    let mut gts = Vec::new();
    let mut tube_lists = Vec::new();
    let mut tubelets = Vec::new();
    for v in ds.videos(split) {
        gts.push(ds.annotation(v));
        tube_lists.push(tubes.and_then(|t| t.get(&v.id)).cloned().unwrap_or_default());
        tubelets.push(
            dets.and_then(|d| d.get(&v.id))
                .map(|seqs| seqs.iter().flat_map(|s| s.tubelets.iter().cloned()).collect())
                .unwrap_or_default(),
        );
    }
    Ok((gts, tube_lists, tubelets))
}

/// Evaluate tubes (and, when given, the raw tubelets) on the test split.
pub fn evaluate_dataset(ds: &Dataset, tubes: &TubeSet, dets: Option<&DetectionSet>) -> Result<EvalReport> {
    let (gts, tube_lists, tubelets) = aligned(ds, Split::Test, Some(tubes), dets)?;
    let cfg = EvalConfig::new(ds.manifest.class_names.clone());
    Ok(evaluate(&gts, &tube_lists, dets.map(|_| tubelets.as_slice()), &cfg))
}

/// Frame-level error breakdown of raw tubelets on the test split.
pub fn error_report(ds: &Dataset, dets: &DetectionSet) -> Result<ErrorBreakdown> {
    let (gts, _, tubelets) = aligned(ds, Split::Test, None, Some(dets))?;
    let cfg = EvalConfig::new(ds.manifest.class_names.clone());
    let frame = frame_detections_from_tubelets(&tubelets, &gts, &cfg);
    Ok(error_breakdown(&frame, &gts, cfg.num_classes, cfg.iou_threshold))
}

/// Every K-frame window of every ground-truth tube, grouped by class.
pub fn gt_tubelets_by_class(tubes: &[&ActionTube], num_classes: usize, k: usize) -> Vec<Vec<Tubelet>> {
    let mut out = vec![Vec::new(); num_classes];
    for t in tubes {
        for start in t.start_frame..=(t.end_frame() + 1).saturating_sub(k) {
            if let Some(w) = t.window(start, k) {
                out[t.label].push(w);
            }
        }
    }
    out
}

/// Anchor recall of all ground-truth tubes, one table per sequence length.
pub fn recall_study(
    layout: &AnchorConfig,
    tubes: &[&ActionTube],
    num_classes: usize,
    k_list: &[usize],
    thresholds: &[f64],
) -> Result<Vec<(usize, RecallTable)>> {
    k_list
        .iter()
        .map(|&k| {
            let anchors = generate_anchors(&AnchorConfig { k, ..layout.clone() })?;
            let gt = gt_tubelets_by_class(tubes, num_classes, k);
            Ok((k, anchor_recall(&anchors, &gt, thresholds)))
        })
        .collect()
}

/// `k<TAB>threshold...` table of the mean recall over classes.
pub fn recall_tsv(tables: &[(usize, RecallTable)]) -> String {
    let mut s = String::from("k");
    if let Some((_, t)) = tables.first() {
        for th in &t.thresholds {
            s.push_str(&format!("\t{th:.2}"));
        }
    }
    s.push('\n');
    for (k, t) in tables {
        s.push_str(&k.to_string());
        for v in &t.mean {
            s.push_str(&format!("\t{v:.6}"));
        }
        s.push('\n');
    }
    s
}
