//! Frame- and video-level evaluation.
//!
//! Ground truth is a list of annotated videos, each holding action tubes.
//! Frame-level metrics match per-frame boxes by IoU; video-level metrics
//! match tubes by spatio-temporal tube overlap.

pub mod ap;
mod breakdown;
mod report;
mod speed;

use std::collections::HashMap;

pub use ap::{average_precision, Interpolation, Outcome};
pub use breakdown::{classify_false_positive, error_breakdown, ErrorBreakdown, ErrorFactor};
pub use report::{
    evaluate, frame_detections_from_tubelets, frame_detections_from_tubes, EvalConfig, EvalReport,
};
pub use speed::{box_speeds, speed_map, speed_strata, Stratum};

use crate::geometry::{iou, tube_overlap, ActionTube, BBox};
use crate::head::ScoredTubelet;
use ap::{ap_from_outcomes, greedy_match};

/// Ground truth of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub num_frames: usize,
    pub tubes: Vec<ActionTube>,
}

impl VideoAnnotation {
    pub fn has_class(&self, class: usize) -> bool {
        self.tubes.iter().any(|t| t.label == class)
    }
}

/// A detected box at one frame of one video.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDetection {
    pub video: usize,
    pub frame: usize,
    pub label: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// A ground-truth box, pointing back at its tube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGt {
    pub video: usize,
    pub frame: usize,
    pub label: usize,
    pub bbox: BBox,
    pub tube: usize,
}

pub fn frame_gts(gts: &[VideoAnnotation]) -> Vec<FrameGt> {
    let mut out = Vec::new();
    for (v, ann) in gts.iter().enumerate() {
        for (t, tube) in ann.tubes.iter().enumerate() {
            for (i, b) in tube.boxes.iter().enumerate() {
                out.push(FrameGt {
                    video: v,
                    frame: tube.start_frame + i,
                    label: tube.label,
                    bbox: *b,
                    tube: t,
                });
            }
        }
    }
    out
}

/// Ground-truth boxes indexed by `(video, frame)`.
pub(crate) struct FrameIndex<'a> {
    pub boxes: &'a [FrameGt],
    by_frame: HashMap<(usize, usize), Vec<usize>>,
}

impl<'a> FrameIndex<'a> {
    pub fn new(boxes: &'a [FrameGt]) -> Self {
        let mut by_frame: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (i, g) in boxes.iter().enumerate() {
            by_frame.entry((g.video, g.frame)).or_default().push(i);
        }
        FrameIndex { boxes, by_frame }
    }

    pub fn at(&self, video: usize, frame: usize) -> &[usize] {
        self.by_frame
            .get(&(video, frame))
            .map_or(&[], |v| v.as_slice())
    }
}

/// Per-class AP and their mean over classes with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

impl MapResult {
    fn from_per_class(per_class: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let map = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MapResult { per_class, map }
    }
}

/// Match class-`class` frame detections against ground-truth boxes; boxes with
/// `active == false` are neither counted nor penalized.
pub(crate) fn match_frames(
    dets: &[&FrameDetection],
    index: &FrameIndex<'_>,
    class: usize,
    active: &[bool],
    threshold: f64,
) -> Vec<(usize, Outcome)> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let active: Vec<bool> = index
        .boxes
        .iter()
        .zip(active)
        .map(|(g, &a)| a && g.label == class)
        .collect();
    greedy_match(&scores, &active, threshold, |d| {
        let det = dets[d];
        index
            .at(det.video, det.frame)
            .iter()
            .filter(|&&g| index.boxes[g].label == class)
            .map(|&g| (g, iou(&det.bbox, &index.boxes[g].bbox)))
            .collect()
    })
}

pub(crate) fn frame_map_masked(
    dets: &[FrameDetection],
    index: &FrameIndex<'_>,
    num_classes: usize,
    active: &[bool],
    threshold: f64,
    interp: Interpolation,
) -> MapResult {
    let per_class = (0..num_classes)
        .map(|c| {
            let n_gt = index
                .boxes
                .iter()
                .zip(active)
                .filter(|(g, &a)| a && g.label == c)
                .count();
            let class_dets: Vec<&FrameDetection> = dets.iter().filter(|d| d.label == c).collect();
            let outcomes: Vec<Outcome> = match_frames(&class_dets, index, c, active, threshold)
                .into_iter()
                .map(|(_, o)| o)
                .collect();
            ap_from_outcomes(&outcomes, n_gt, interp)
        })
        .collect();
    MapResult::from_per_class(per_class)
}

/// Frame-mAP at IoU `threshold`.
pub fn frame_map(
    dets: &[FrameDetection],
    gts: &[VideoAnnotation],
    num_classes: usize,
    threshold: f64,
    interp: Interpolation,
) -> MapResult {
    let boxes = frame_gts(gts);
    let index = FrameIndex::new(&boxes);
    frame_map_masked(dets, &index, num_classes, &vec![true; boxes.len()], threshold, interp)
}

/// A detected tube in a given video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDetection {
    pub video: usize,
    pub tube: ActionTube,
}

/// Video-mAP at tube-overlap `threshold`.
pub fn video_map(
    dets: &[VideoDetection],
    gts: &[VideoAnnotation],
    num_classes: usize,
    threshold: f64,
    interp: Interpolation,
) -> MapResult {
    let gt_tubes: Vec<(usize, &ActionTube)> = gts
        .iter()
        .enumerate()
        .flat_map(|(v, a)| a.tubes.iter().map(move |t| (v, t)))
        .collect();
    let per_class = (0..num_classes)
        .map(|c| {
            let class_dets: Vec<&VideoDetection> = dets.iter().filter(|d| d.tube.label == c).collect();
            let class_gts: Vec<&(usize, &ActionTube)> =
                gt_tubes.iter().filter(|(_, t)| t.label == c).collect();
            average_precision(
                &class_dets,
                &class_gts,
                |d| d.tube.score,
                |d, g| {
                    if d.video == g.0 {
                        tube_overlap(&d.tube, g.1)
                    } else {
                        0.0
                    }
                },
                threshold,
                interp,
            )
        })
        .collect();
    MapResult::from_per_class(per_class)
}

/// The ten thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Mean of the video-mAPs at 0.50:0.05:0.95.
pub fn video_map_range(
    dets: &[VideoDetection],
    gts: &[VideoAnnotation],
    num_classes: usize,
    interp: Interpolation,
) -> f64 {
    let t = coco_thresholds();
    t.iter()
        .map(|&th| video_map(dets, gts, num_classes, th, interp).map)
        .sum::<f64>()
        / t.len() as f64
}

fn mean_over_classes(per_class: &[(f64, usize)]) -> f64 {
    let present: Vec<f64> = per_class
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|(s, n)| s / *n as f64)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Frame-level MABO: best IoU of any detection in the same frame for every
/// ground-truth box, averaged per class, then over classes.
pub fn frame_mabo(dets: &[FrameDetection], gts: &[VideoAnnotation], num_classes: usize) -> f64 {
    let mut by_frame: HashMap<(usize, usize), Vec<&FrameDetection>> = HashMap::new();
    for d in dets {
        by_frame.entry((d.video, d.frame)).or_default().push(d);
    }
    let mut acc = vec![(0.0, 0usize); num_classes];
    for g in frame_gts(gts) {
        let best = by_frame
            .get(&(g.video, g.frame))
            .map_or(0.0, |ds| ds.iter().map(|d| iou(&d.bbox, &g.bbox)).fold(0.0, f64::max));
        acc[g.label].0 += best;
        acc[g.label].1 += 1;
    }
    mean_over_classes(&acc)
}

/// Video-level MABO with tube overlap.
pub fn video_mabo(dets: &[VideoDetection], gts: &[VideoAnnotation], num_classes: usize) -> f64 {
    let mut acc = vec![(0.0, 0usize); num_classes];
    for (v, ann) in gts.iter().enumerate() {
        for g in &ann.tubes {
            let best = dets
                .iter()
                .filter(|d| d.video == v)
                .map(|d| tube_overlap(&d.tube, g))
                .fold(0.0, f64::max);
            acc[g.label].0 += best;
            acc[g.label].1 += 1;
        }
    }
    mean_over_classes(&acc)
}

/// Overlap a tubelet box must strictly exceed to vote for a ground-truth box.
pub const ACCURACY_OVERLAP: f64 = 0.7;

/// Classification accuracy with known localization. Every ground-truth box
/// takes the mean score vector of the tubelet boxes overlapping it by more
/// than `threshold` and predicts the highest-scoring action class. Boxes with
/// no such tubelet are left out; `None` if none qualifies.
pub fn classification_accuracy(
    tubelets: &[Vec<ScoredTubelet>],
    gts: &[VideoAnnotation],
    threshold: f64,
) -> Option<f64> {
    let mut correct = 0usize;
    let mut counted = 0usize;
    for g in frame_gts(gts) {
        let Some(video_tubelets) = tubelets.get(g.video) else {
            continue;
        };
        let mut sum: Vec<f64> = Vec::new();
        for t in video_tubelets {
            let Some(b) = t.tubelet.box_at(g.frame) else {
                continue;
            };
            if iou(b, &g.bbox) > threshold {
                if sum.is_empty() {
                    sum = vec![0.0; t.scores.len()];
                }
                sum.iter_mut().zip(&t.scores).for_each(|(s, v)| *s += v);
            }
        }
        if sum.is_empty() {
            continue;
        }
        let predicted = sum[1..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &s)| if s > best.1 { (c, s) } else { best })
            .0;
        counted += 1;
        correct += usize::from(predicted == g.label);
    }
    (counted > 0).then(|| correct as f64 / counted as f64)
}
