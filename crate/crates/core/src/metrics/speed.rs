//! Actor speed strata and frame-mAP restricted to each stratum.

use super::{frame_gts, frame_map_masked, FrameDetection, FrameIndex, Interpolation, MapResult, VideoAnnotation};
use crate::geometry::{iou, ActionTube};

/// Frame offset used to measure actor speed.
pub const SPEED_GAP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    Slow,
    Medium,
    Fast,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Slow, Stratum::Medium, Stratum::Fast];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Slow => "slow",
            Stratum::Medium => "medium",
            Stratum::Fast => "fast",
        }
    }
}

/// Mean IoU of the box at `frame` with the same tube's boxes `SPEED_GAP`
/// frames before and after. Near the tube ends the largest gap with at least
/// one neighbor is used instead; single-frame tubes count as static.
fn box_speed(tube: &ActionTube, frame: usize) -> f64 {
    let b = tube.box_at(frame).expect("frame inside tube");
    for n in (1..=SPEED_GAP).rev() {
        let neighbors: Vec<f64> = [frame.checked_sub(n), Some(frame + n)]
            .into_iter()
            .flatten()
            .filter_map(|f| tube.box_at(f))
            .map(|other| iou(b, other))
            .collect();
        if !neighbors.is_empty() {
            return neighbors.iter().sum::<f64>() / neighbors.len() as f64;
        }
    }
    1.0
}

/// Speed of every ground-truth box, in [`frame_gts`] order. Higher values mean
/// slower motion.
pub fn box_speeds(gts: &[VideoAnnotation]) -> Vec<f64> {
    frame_gts(gts)
        .iter()
        .map(|g| box_speed(&gts[g.video].tubes[g.tube], g.frame))
        .collect()
}

/// Tertiles of the speed distribution: the lowest third is fast, the highest
/// slow. Equal speeds always share a stratum.
pub fn speed_strata(gts: &[VideoAnnotation]) -> Vec<Stratum> {
    let speeds = box_speeds(gts);
    if speeds.is_empty() {
        return Vec::new();
    }
    let mut sorted = speeds.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let lo = sorted[n / 3];
    let hi = sorted[(2 * n) / 3];
    speeds
        .iter()
        .map(|&s| {
            if s < lo {
                Stratum::Fast
            } else if s < hi {
                Stratum::Medium
            } else {
                Stratum::Slow
            }
        })
        .collect()
}

/// Frame-mAP per stratum (slow, medium, fast). Ground-truth boxes of other
/// strata are ignored: detections hitting them are neither true nor false
/// positives.
pub fn speed_map(
    dets: &[FrameDetection],
    gts: &[VideoAnnotation],
    num_classes: usize,
    threshold: f64,
    interp: Interpolation,
) -> [MapResult; 3] {
    let boxes = frame_gts(gts);
    let strata = speed_strata(gts);
    let index = FrameIndex::new(&boxes);
    Stratum::ALL.map(|s| {
        let active: Vec<bool> = strata.iter().map(|&x| x == s).collect();
        frame_map_masked(dets, &index, num_classes, &active, threshold, interp)
    })
}
