//! Ground-truth assignment, tubelet regression targets, and the training loss
//! with hard negative mining and its analytic gradients.
//!
//! Logit index 0 is the background; action class `c` (0-based) lives at
//! logit index `c + 1`. Regression outputs are laid out frame-major as
//! `[tx, ty, tw, th]` per frame.

use crate::anchors::AnchorCuboid;
use crate::error::{Error, Result};
use crate::geometry::{cuboid_overlap, BBox, Tubelet};

/// Overlap an anchor cuboid needs with a ground-truth tubelet to be positive.
pub const POSITIVE_OVERLAP: f64 = 0.5;

/// Negatives kept per positive by hard negative mining.
pub const DEFAULT_HNM_RATIO: f64 = 3.0;

/// A ground-truth tubelet with its action class.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTubelet {
    pub tubelet: Tubelet,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Positive {
    pub anchor: usize,
    pub gt: usize,
    pub label: usize,
}

/// Positive (anchor, ground truth, label) triples and the negative anchors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    pub positives: Vec<Positive>,
    pub negatives: Vec<usize>,
}

impl Assignment {
    pub fn n_pos(&self) -> usize {
        self.positives.len()
    }
}

/// Raw head outputs for every anchor of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Number of action classes, background excluded.
    pub num_classes: usize,
    pub k: usize,
    /// `n_anchors x (num_classes + 1)`.
    pub logits: Vec<f64>,
    /// `n_anchors x 4k`.
    pub regressions: Vec<f64>,
}

impl Predictions {
    pub fn zeros(n_anchors: usize, num_classes: usize, k: usize) -> Self {
        Predictions {
            num_classes,
            k,
            logits: vec![0.0; n_anchors * (num_classes + 1)],
            regressions: vec![0.0; n_anchors * 4 * k],
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.logits.len() / (self.num_classes + 1)
    }

    pub fn logits_of(&self, anchor: usize) -> &[f64] {
        let c = self.num_classes + 1;
        &self.logits[anchor * c..(anchor + 1) * c]
    }

    pub fn regression_of(&self, anchor: usize) -> &[f64] {
        let r = 4 * self.k;
        &self.regressions[anchor * r..(anchor + 1) * r]
    }

    fn check(&self) -> Result<()> {
        let n = self.num_anchors();
        if self.logits.len() != n * (self.num_classes + 1) || self.regressions.len() != n * 4 * self.k
        {
            return Err(Error::Shape(format!(
                "{} logits and {} regressions for C={} K={}",
                self.logits.len(),
                self.regressions.len(),
                self.num_classes,
                self.k
            )));
        }
        Ok(())
    }
}

/// Pair every anchor whose best overlap reaches 0.5 with that ground truth;
/// everything else is negative. Ties go to the lowest ground-truth index.
pub fn assign(anchors: &[AnchorCuboid], gts: &[GtTubelet]) -> Assignment {
    let mut asg = Assignment::default();
    for (i, a) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let ov = cuboid_overlap(&a.bbox, &g.tubelet);
            if best.is_none_or(|(_, b)| ov > b) {
                best = Some((j, ov));
            }
        }
        match best {
            Some((j, ov)) if ov >= POSITIVE_OVERLAP => asg.positives.push(Positive {
                anchor: i,
                gt: j,
                label: gts[j].label,
            }),
            _ => asg.negatives.push(i),
        }
    }
    asg
}

/// Per-frame `(tx, ty, tw, th)` offsets of a ground-truth tubelet against an
/// anchor box.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTarget {
    pub offsets: Vec<[f64; 4]>,
}

impl RegressionTarget {
    pub fn flat(&self) -> Vec<f64> {
        self.offsets.iter().flatten().copied().collect()
    }
}

pub fn encode(anchor: &BBox, gt: &Tubelet) -> Result<RegressionTarget> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::Shape(format!("anchor has non-positive size {aw}x{ah}")));
    }
    let (ax, ay) = (anchor.center_x(), anchor.center_y());
    let offsets = gt
        .boxes
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let (gw, gh) = (g.width(), g.height());
            if !(gw > 0.0 && gh > 0.0) {
                return Err(Error::Annotation(format!(
                    "ground-truth box at frame {} has size {gw}x{gh}",
                    gt.start_frame + k
                )));
            }
            Ok([
                (g.center_x() - ax) / aw,
                (g.center_y() - ay) / ah,
                (gw / aw).ln(),
                (gh / ah).ln(),
            ])
        })
        .collect::<Result<_>>()?;
    Ok(RegressionTarget { offsets })
}

/// Inverse of [`encode`] on a flat `4k` slice.
pub fn decode(anchor: &BBox, regression: &[f64], start_frame: usize) -> Tubelet {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (ax, ay) = (anchor.center_x(), anchor.center_y());
    let boxes = regression
        .chunks_exact(4)
        .map(|r| BBox::from_center(ax + r[0] * aw, ay + r[1] * ah, aw * r[2].exp(), ah * r[3].exp()))
        .collect();
    Tubelet::new(start_frame, boxes)
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log softmax(logits)[idx]`, computed stably.
pub fn cross_entropy(logits: &[f64], idx: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[idx]
}

/// A loss value and its gradient with respect to one output tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// The `ceil(ratio * n_pos)` negatives with the largest background
/// cross-entropy, ties broken by anchor index.
pub fn hard_negatives(pred: &Predictions, asg: &Assignment, hnm_ratio: f64) -> Vec<usize> {
    let keep = ((hnm_ratio * asg.n_pos() as f64).ceil() as usize).min(asg.negatives.len());
    if keep == 0 {
        return Vec::new();
    }
    let mut ranked: Vec<(f64, usize)> = asg
        .negatives
        .iter()
        .map(|&i| (cross_entropy(pred.logits_of(i), 0), i))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.truncate(keep);
    ranked.into_iter().map(|(_, i)| i).collect()
}

/// Softmax cross-entropy over positives (true class) and hard negatives
/// (background). Zero when there are no positives.
pub fn confidence_loss(pred: &Predictions, asg: &Assignment, hnm_ratio: f64) -> Result<LossTerm> {
    pred.check()?;
    let mut grad = vec![0.0; pred.logits.len()];
    if asg.n_pos() == 0 {
        return Ok(LossTerm { value: 0.0, grad });
    }
    let stride = pred.num_classes + 1;
    let mut value = 0.0;
    let mut add = |anchor: usize, target: usize, value: &mut f64| {
        let logits = pred.logits_of(anchor);
        *value += cross_entropy(logits, target);
        let p = softmax(logits);
        let g = &mut grad[anchor * stride..(anchor + 1) * stride];
        for (c, (gc, pc)) in g.iter_mut().zip(p).enumerate() {
            *gc += pc - if c == target { 1.0 } else { 0.0 };
        }
    };
    for pos in &asg.positives {
        if pos.label >= pred.num_classes {
            return Err(Error::Shape(format!(
                "label {} outside {} classes",
                pos.label, pred.num_classes
            )));
        }
        add(pos.anchor, pos.label + 1, &mut value);
    }
    for i in hard_negatives(pred, asg, hnm_ratio) {
        add(i, 0, &mut value);
    }
    Ok(LossTerm { value, grad })
}

/// Smooth-L1 between predicted and target offsets, summed over positives and
/// coordinates, averaged over the K frames.
pub fn regression_loss(
    pred: &Predictions,
    asg: &Assignment,
    targets: &[RegressionTarget],
) -> Result<LossTerm> {
    pred.check()?;
    if targets.len() != asg.n_pos() {
        return Err(Error::Shape(format!(
            "{} targets for {} positives",
            targets.len(),
            asg.n_pos()
        )));
    }
    let k = pred.k;
    let stride = 4 * k;
    let mut grad = vec![0.0; pred.regressions.len()];
    let mut value = 0.0;
    for (pos, target) in asg.positives.iter().zip(targets) {
        if target.offsets.len() != k {
            return Err(Error::Shape(format!(
                "target has {} frames, expected {k}",
                target.offsets.len()
            )));
        }
        let r = pred.regression_of(pos.anchor);
        let g = &mut grad[pos.anchor * stride..(pos.anchor + 1) * stride];
        for (idx, t) in target.offsets.iter().flatten().enumerate() {
            let d = r[idx] - t;
            value += smooth_l1(d);
            g[idx] += smooth_l1_grad(d) / k as f64;
        }
    }
    Ok(LossTerm {
        value: value / k as f64,
        grad,
    })
}

/// `(L_conf + L_reg) / N` and the gradients, scaled the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub confidence: f64,
    pub regression: f64,
    pub n_pos: usize,
    pub grad_logits: Vec<f64>,
    pub grad_regressions: Vec<f64>,
}

pub fn total_loss(
    pred: &Predictions,
    asg: &Assignment,
    targets: &[RegressionTarget],
    hnm_ratio: f64,
) -> Result<TotalLoss> {
    let conf = confidence_loss(pred, asg, hnm_ratio)?;
    let reg = regression_loss(pred, asg, targets)?;
    let n = asg.n_pos();
    if n == 0 {
        return Ok(TotalLoss {
            value: 0.0,
            confidence: 0.0,
            regression: 0.0,
            n_pos: 0,
            grad_logits: conf.grad,
            grad_regressions: reg.grad,
        });
    }
    let scale = 1.0 / n as f64;
    Ok(TotalLoss {
        value: (conf.value + reg.value) * scale,
        confidence: conf.value,
        regression: reg.value,
        n_pos: n,
        grad_logits: conf.grad.into_iter().map(|g| g * scale).collect(),
        grad_regressions: reg.grad.into_iter().map(|g| g * scale).collect(),
    })
}

/// Regression targets for every positive of an assignment.
pub fn targets_for(
    anchors: &[AnchorCuboid],
    gts: &[GtTubelet],
    asg: &Assignment,
) -> Result<Vec<RegressionTarget>> {
    asg.positives
        .iter()
        .map(|p| encode(&anchors[p.anchor].bbox, &gts[p.gt].tubelet))
        .collect()
}
