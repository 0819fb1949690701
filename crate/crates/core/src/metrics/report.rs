use std::fmt::Write as _;

use rayon::prelude::*;

use super::{
    classification_accuracy, error_breakdown, frame_map, frame_mabo, speed_map, video_map,
    video_map_range, video_mabo, ErrorBreakdown, FrameDetection, Interpolation, MapResult,
    VideoAnnotation, VideoDetection, ACCURACY_OVERLAP,
};
use crate::geometry::ActionTube;
use crate::head::{ScoredTubelet, SCORE_FLOOR};
use crate::linker::{box_nms, frame_level_detections, ScoredBox};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// IoU for frame-level matching and the error breakdown.
    pub iou_threshold: f64,
    pub video_thresholds: Vec<f64>,
    /// Box NMS threshold when collecting per-frame detections.
    pub frame_nms: f64,
    pub score_floor: f64,
    pub interpolation: Interpolation,
}

impl EvalConfig {
    pub fn new(class_names: Vec<String>) -> Self {
        EvalConfig {
            num_classes: class_names.len(),
            class_names,
            iou_threshold: 0.5,
            video_thresholds: vec![0.2, 0.5, 0.75],
            frame_nms: 0.3,
            score_floor: SCORE_FLOOR,
            interpolation: Interpolation::EveryPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub frame: MapResult,
    pub frame_mabo: f64,
    pub classification_accuracy: Option<f64>,
    pub video: Vec<(f64, MapResult)>,
    pub video_map_range: f64,
    pub video_mabo: f64,
    pub errors: ErrorBreakdown,
    /// Frame-mAP for slow, medium and fast actors.
    pub speed: [f64; 3],
}

/// Per-frame detections from every tubelet of every video.
pub fn frame_detections_from_tubelets(
    tubelets: &[Vec<ScoredTubelet>],
    gts: &[VideoAnnotation],
    cfg: &EvalConfig,
) -> Vec<FrameDetection> {
    tubelets
        .par_iter()
        .enumerate()
        .map(|(v, video)| {
            let frames = gts.get(v).map_or(0, |g| g.num_frames);
            let mut out = Vec::new();
            for f in 0..frames {
                let covering: Vec<ScoredTubelet> =
                    video.iter().filter(|t| t.tubelet.covers(f)).cloned().collect();
                let per_class =
                    frame_level_detections(&covering, f, cfg.num_classes, cfg.frame_nms, cfg.score_floor);
                for (label, boxes) in per_class.into_iter().enumerate() {
                    out.extend(boxes.into_iter().map(|b| FrameDetection {
                        video: v,
                        frame: f,
                        label,
                        bbox: b.bbox,
                        score: b.score,
                    }));
                }
            }
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Per-frame detections read off tube boxes, with per-class box NMS.
pub fn frame_detections_from_tubes(tubes: &[Vec<ActionTube>], cfg: &EvalConfig) -> Vec<FrameDetection> {
    let mut out = Vec::new();
    for (v, video) in tubes.iter().enumerate() {
        let last = video.iter().map(|t| t.end_frame() + 1).max().unwrap_or(0);
        for f in 0..last {
            for c in 0..cfg.num_classes {
                let boxes: Vec<ScoredBox> = video
                    .iter()
                    .filter(|t| t.label == c)
                    .filter_map(|t| t.box_at(f).map(|b| ScoredBox { bbox: *b, score: t.score }))
                    .collect();
                out.extend(box_nms(&boxes, cfg.frame_nms).into_iter().map(|b| FrameDetection {
                    video: v,
                    frame: f,
                    label: c,
                    bbox: b.bbox,
                    score: b.score,
                }));
            }
        }
    }
    out
}

/// Full evaluation of linked tubes (video level) and, when given, the raw
/// tubelets (frame level). Without tubelets, frame-level metrics use the tube
/// boxes.
pub fn evaluate(
    gts: &[VideoAnnotation],
    tubes: &[Vec<ActionTube>],
    tubelets: Option<&[Vec<ScoredTubelet>]>,
    cfg: &EvalConfig,
) -> EvalReport {
    let c = cfg.num_classes;
    let interp = cfg.interpolation;
    let frame_dets = match tubelets {
        Some(t) => frame_detections_from_tubelets(t, gts, cfg),
        None => frame_detections_from_tubes(tubes, cfg),
    };
    let video_dets: Vec<VideoDetection> = tubes
        .iter()
        .enumerate()
        .flat_map(|(v, ts)| ts.iter().map(move |t| VideoDetection { video: v, tube: t.clone() }))
        .collect();
    let accuracy = match tubelets {
        Some(t) => classification_accuracy(t, gts, ACCURACY_OVERLAP),
        None => {
            let as_tubelets: Vec<Vec<ScoredTubelet>> = tubes
                .iter()
                .map(|ts| ts.iter().map(|t| tube_as_scored(t, c)).collect())
                .collect();
            classification_accuracy(&as_tubelets, gts, ACCURACY_OVERLAP)
        }
    };
    EvalReport {
        class_names: cfg.class_names.clone(),
        frame: frame_map(&frame_dets, gts, c, cfg.iou_threshold, interp),
        frame_mabo: frame_mabo(&frame_dets, gts, c),
        classification_accuracy: accuracy,
        video: cfg
            .video_thresholds
            .iter()
            .map(|&t| (t, video_map(&video_dets, gts, c, t, interp)))
            .collect(),
        video_map_range: video_map_range(&video_dets, gts, c, interp),
        video_mabo: video_mabo(&video_dets, gts, c),
        errors: error_breakdown(&frame_dets, gts, c, cfg.iou_threshold),
        speed: speed_map(&frame_dets, gts, c, cfg.iou_threshold, interp).map(|m| m.map),
    }
}

/// A tube viewed as a tubelet whose score vector puts all mass on its label.
fn tube_as_scored(t: &ActionTube, num_classes: usize) -> ScoredTubelet {
    let mut scores = vec![0.0; num_classes + 1];
    scores[t.label + 1] = t.score;
    ScoredTubelet {
        tubelet: crate::geometry::Tubelet::new(t.start_frame, t.boxes.clone()),
        scores,
        anchor: 0,
    }
}

impl EvalReport {
    pub fn video_map_at(&self, threshold: f64) -> Option<f64> {
        self.video
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|(_, m)| m.map)
    }

    fn class_name(&self, c: usize) -> String {
        self.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"))
    }

    fn rows(&self) -> Vec<(String, String, String)> {
        let f = |v: f64| format!("{v:.6}");
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), f);
        let mut rows = Vec::new();
        let mut push = |block: &str, key: String, value: String| rows.push((block.to_string(), key, value));
        push("frame", "map".into(), f(self.frame.map));
        for (c, ap) in self.frame.per_class.iter().enumerate() {
            push("frame", format!("ap.{}", self.class_name(c)), opt(*ap));
        }
        push("frame", "mabo".into(), f(self.frame_mabo));
        push("frame", "accuracy".into(), opt(self.classification_accuracy));
        for (t, m) in &self.video {
            push("video", format!("map@{t:.2}"), f(m.map));
        }
        push("video", "map@0.50:0.95".into(), f(self.video_map_range));
        push("video", "mabo".into(), f(self.video_mabo));
        let e = &self.errors;
        push("errors", "E_L".into(), f(e.localization));
        push("errors", "E_C".into(), f(e.classification));
        push("errors", "E_T".into(), f(e.temporal));
        push("errors", "E_O".into(), f(e.other));
        push("errors", "E_M".into(), f(e.missed));
        push("errors", "true_positives".into(), e.true_positives.to_string());
        push("errors", "false_positives".into(), e.false_positives.to_string());
        for (name, v) in ["slow", "medium", "fast"].iter().zip(self.speed) {
            push("speed", format!("map.{name}"), f(v));
        }
        rows
    }

    /// One `[block]` of `key = value` lines per metric family.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut current = String::new();
        for (block, key, value) in self.rows() {
            if block != current {
                if !current.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "[{block}]");
                current = block;
            }
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    /// `metric<TAB>value` with dotted block-qualified metric names.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        for (block, key, value) in self.rows() {
            let _ = writeln!(s, "{block}.{key}\t{value}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Tubelet};

    const UNIT: BBox = BBox::new(0.0, 0.0, 10.0, 10.0);

    fn gt() -> Vec<VideoAnnotation> {
        vec![VideoAnnotation {
            num_frames: 6,
            tubes: vec![ActionTube { start_frame: 0, boxes: vec![UNIT; 6], label: 1, score: 1.0 }],
        }]
    }

    #[test]
    fn empty_detections() {
        let cfg = EvalConfig::new(vec!["a".into(), "b".into()]);
        let r = evaluate(&gt(), &[vec![]], Some(&[vec![]]), &cfg);
        assert_eq!(r.frame.map, 0.0);
        assert_eq!(r.video_map_at(0.5), Some(0.0));
        assert_eq!(r.errors.missed, 1.0);
        assert_eq!(r.classification_accuracy, None);
        let text = r.to_text();
        assert!(text.starts_with("[frame]\nmap = 0.000000\nap.a = nan\nap.b = 0.000000\n"));
        assert!(text.contains("\n[errors]\n"));
        assert!(r.to_tsv().contains("errors.E_M\t1.000000\n"));
    }

    #[test]
    fn perfect_tubelets_and_tubes() {
        let cfg = EvalConfig::new(vec!["a".into(), "b".into()]);
        let tubelets: Vec<ScoredTubelet> = (0..5)
            .map(|s| ScoredTubelet {
                tubelet: Tubelet::new(s, vec![UNIT; 2]),
                scores: vec![0.0, 0.1, 0.9],
                anchor: 0,
            })
            .collect();
        let tube = ActionTube { start_frame: 0, boxes: vec![UNIT; 6], label: 1, score: 0.9 };
        let r = evaluate(&gt(), &[vec![tube.clone()]], Some(&[tubelets]), &cfg);
        assert_eq!(r.frame.per_class[1], Some(1.0));
        assert_eq!(r.frame.map, 1.0);
        assert_eq!(r.video_map_range, 1.0);
        assert_eq!(r.classification_accuracy, Some(1.0));
        assert_eq!(r.errors.temporal, 0.0);
        let from_tubes = evaluate(&gt(), &[vec![tube]], None, &cfg);
        assert_eq!(from_tubes.frame.map, 1.0);
        assert_eq!(from_tubes.classification_accuracy, Some(1.0));
    }
}
