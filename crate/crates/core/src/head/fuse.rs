use super::{ScoredTubelet, StreamOutput};
use crate::error::{Error, Result};

/// How appearance and motion detections are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Both detection sets, scores untouched.
    Union,
    /// Per-anchor mean of the softmax scores, RGB geometry.
    Late,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(Fusion::Union),
            "late" => Ok(Fusion::Late),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

pub fn fuse_union(rgb: Vec<ScoredTubelet>, flow: Vec<ScoredTubelet>) -> Vec<ScoredTubelet> {
    let mut out = rgb;
    out.extend(flow);
    out
}

/// Average the two streams' scores anchor by anchor, keeping the RGB tubelet.
pub fn fuse_late(rgb: &StreamOutput, flow: &StreamOutput) -> Result<StreamOutput> {
    if rgb.start_frame != flow.start_frame || rgb.detections.len() != flow.detections.len() {
        return Err(Error::Shape(format!(
            "streams differ: {} anchors at frame {} vs {} anchors at frame {}",
            rgb.detections.len(),
            rgb.start_frame,
            flow.detections.len(),
            flow.start_frame
        )));
    }
    let detections = rgb
        .detections
        .iter()
        .zip(&flow.detections)
        .map(|(a, b)| {
            if a.anchor != b.anchor || a.scores.len() != b.scores.len() {
                return Err(Error::Shape(format!(
                    "anchor {} (C={}) paired with anchor {} (C={})",
                    a.anchor,
                    a.num_classes(),
                    b.anchor,
                    b.num_classes()
                )));
            }
            Ok(ScoredTubelet {
                tubelet: a.tubelet.clone(),
                scores: a
                    .scores
                    .iter()
                    .zip(&b.scores)
                    .map(|(x, y)| 0.5 * (x + y))
                    .collect(),
                anchor: a.anchor,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StreamOutput {
        start_frame: rgb.start_frame,
        detections,
    })
}

/// Fuse two full stream outputs, then drop tubelets with no class above
/// `floor`. Late fusion happens before the floor is applied.
pub fn fuse(
    rgb: &StreamOutput,
    flow: &StreamOutput,
    mode: Fusion,
    floor: f64,
) -> Result<Vec<ScoredTubelet>> {
    match mode {
        Fusion::Union => Ok(fuse_union(rgb.above_floor(floor), flow.above_floor(floor))),
        Fusion::Late => Ok(fuse_late(rgb, flow)?.above_floor(floor)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Tubelet};

    fn stream(start: usize, scores: &[[f64; 3]], shift: f64) -> StreamOutput {
        StreamOutput {
            start_frame: start,
            detections: scores
                .iter()
                .enumerate()
                .map(|(i, s)| ScoredTubelet {
                    tubelet: Tubelet::new(start, vec![BBox::new(i as f64 + shift, 0.0, 10.0 + shift, 10.0); 2]),
                    scores: s.to_vec(),
                    anchor: i,
                })
                .collect(),
        }
    }

    #[test]
    fn late_fusion_averages_and_keeps_rgb_boxes() {
        let rgb = stream(4, &[[0.2, 0.5, 0.3], [0.9, 0.05, 0.05]], 0.0);
        let flow = stream(4, &[[0.4, 0.1, 0.5], [0.1, 0.8, 0.1]], 3.0);
        let fused = fuse_late(&rgb, &flow).unwrap();
        assert_eq!(fused.detections[0].scores, vec![0.30000000000000004, 0.3, 0.4]);
        assert_eq!(fused.detections[1].tubelet, rgb.detections[1].tubelet);
        for d in &fused.detections {
            assert!((d.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let same = fuse_late(&rgb, &rgb).unwrap();
        assert_eq!(same, rgb);
    }

    #[test]
    fn late_fusion_rejects_mismatched_streams() {
        let rgb = stream(4, &[[0.2, 0.5, 0.3]], 0.0);
        assert!(fuse_late(&rgb, &stream(5, &[[0.2, 0.5, 0.3]], 0.0)).is_err());
        assert!(fuse_late(&rgb, &stream(4, &[[0.2, 0.5, 0.3]; 2], 0.0)).is_err());
    }

    #[test]
    fn union_is_additive() {
        let rgb = stream(0, &[[0.2, 0.5, 0.3]; 3], 0.0);
        let flow = stream(0, &[[0.2, 0.5, 0.3]; 2], 0.0);
        assert_eq!(fuse(&rgb, &flow, Fusion::Union, 0.01).unwrap().len(), 5);
        assert_eq!("late".parse::<Fusion>().unwrap(), Fusion::Late);
        assert!("max".parse::<Fusion>().is_err());
    }
}
