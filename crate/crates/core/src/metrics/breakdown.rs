//! Breakdown of frame-level errors into localization, classification,
//! temporal, other and missed detections.

use super::ap::Outcome;
use super::{frame_gts, match_frames, FrameDetection, FrameIndex, VideoAnnotation};
use crate::geometry::iou;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorFactor {
    /// The frame holds the detected class but no box was hit.
    Localization,
    /// Hits a ground-truth box of another class.
    Classification,
    /// The video holds the class, but not at this frame.
    Temporal,
    Other,
}

impl ErrorFactor {
    pub const ALL: [ErrorFactor; 4] = [
        ErrorFactor::Localization,
        ErrorFactor::Classification,
        ErrorFactor::Temporal,
        ErrorFactor::Other,
    ];

    /// Short key used in reports.
    pub fn key(self) -> &'static str {
        match self {
            ErrorFactor::Localization => "E_L",
            ErrorFactor::Classification => "E_C",
            ErrorFactor::Temporal => "E_T",
            ErrorFactor::Other => "E_O",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Category of a false positive of class `class`.
///
/// A duplicate hit on an already-matched box of the right class counts as a
/// localization error.
pub fn classify_false_positive(
    det: &FrameDetection,
    gts: &[VideoAnnotation],
    threshold: f64,
) -> ErrorFactor {
    let video = &gts[det.video];
    let in_frame: Vec<_> = video
        .tubes
        .iter()
        .filter_map(|t| t.box_at(det.frame).map(|b| (t.label, iou(b, &det.bbox))))
        .collect();
    let has_class = in_frame.iter().any(|&(l, _)| l == det.label);
    if in_frame.iter().any(|&(l, ov)| l == det.label && ov >= threshold) {
        return ErrorFactor::Localization;
    }
    if in_frame.iter().any(|&(l, ov)| l != det.label && ov >= threshold) {
        return ErrorFactor::Classification;
    }
    if has_class {
        ErrorFactor::Localization
    } else if video.has_class(det.label) {
        ErrorFactor::Temporal
    } else {
        ErrorFactor::Other
    }
}

/// Shares of lost frame-AP per factor, averaged over classes with ground
/// truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorBreakdown {
    pub localization: f64,
    pub classification: f64,
    pub temporal: f64,
    pub other: f64,
    pub missed: f64,
    /// Raw false-positive counts per factor, all classes.
    pub counts: [usize; 4],
    pub false_positives: usize,
    pub true_positives: usize,
}

impl ErrorBreakdown {
    pub fn share(&self, f: ErrorFactor) -> f64 {
        match f {
            ErrorFactor::Localization => self.localization,
            ErrorFactor::Classification => self.classification,
            ErrorFactor::Temporal => self.temporal,
            ErrorFactor::Other => self.other,
        }
    }
}

/// Walk each class's ranked detections as in frame-mAP. At every recall step
/// the fraction of detections so far falling in each false-positive factor
/// is integrated over recall; `missed` is the fraction of ground-truth boxes
/// never matched.
pub fn error_breakdown(
    dets: &[FrameDetection],
    gts: &[VideoAnnotation],
    num_classes: usize,
    threshold: f64,
) -> ErrorBreakdown {
    let boxes = frame_gts(gts);
    let index = FrameIndex::new(&boxes);
    let active = vec![true; boxes.len()];
    let mut out = ErrorBreakdown::default();
    let mut areas = [0.0f64; 4];
    let mut missed = 0.0;
    let mut classes = 0usize;
    for c in 0..num_classes {
        let n_gt = boxes.iter().filter(|g| g.label == c).count();
        let class_dets: Vec<&FrameDetection> = dets.iter().filter(|d| d.label == c).collect();
        let outcomes = match_frames(&class_dets, &index, c, &active, threshold);
        let mut counts = [0usize; 4];
        let mut class_area = [0.0f64; 4];
        let mut tp = 0usize;
        for (seen, (d, o)) in outcomes.iter().enumerate() {
            match o {
                Outcome::TruePositive(_) => {
                    tp += 1;
                    if n_gt > 0 {
                        let step = 1.0 / n_gt as f64;
                        for (a, &k) in class_area.iter_mut().zip(&counts) {
                            *a += step * k as f64 / (seen + 1) as f64;
                        }
                    }
                }
                Outcome::FalsePositive => {
                    let f = classify_false_positive(class_dets[*d], gts, threshold);
                    counts[f.index()] += 1;
                }
                Outcome::Ignored => unreachable!("no ground truth is masked here"),
            }
        }
        let fp: usize = counts.iter().sum();
        assert_eq!(fp + tp, outcomes.len(), "every false positive gets one factor");
        out.false_positives += fp;
        out.true_positives += tp;
        for (total, k) in out.counts.iter_mut().zip(counts) {
            *total += k;
        }
        if n_gt > 0 {
            classes += 1;
            for (a, v) in areas.iter_mut().zip(class_area) {
                *a += v;
            }
            missed += 1.0 - tp as f64 / n_gt as f64;
        }
    }
    if classes > 0 {
        let n = classes as f64;
        out.localization = areas[0] / n;
        out.classification = areas[1] / n;
        out.temporal = areas[2] / n;
        out.other = areas[3] / n;
        out.missed = missed / n;
    }
    out
}
