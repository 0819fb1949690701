//! Toy tubelet detection head.
//!
//! Per-frame feature grids stand in for the convolutional tower. The head
//! stacks the features of K frames at every cell and applies, per grid and per
//! anchor shape, one linear map for the C+1 class logits and one for the 4K
//! regression offsets.

mod fuse;
mod train;

pub use fuse::{fuse, fuse_late, fuse_union, Fusion};
pub use train::{loss_and_grad, train, TrainConfig, TrainOutcome, TrainingSample};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchors::{AnchorConfig, AnchorCuboid};
use crate::error::{Error, Result};
use crate::geometry::Tubelet;
use crate::matchloss::{decode, softmax, Predictions};

/// Default floor below which class scores are dropped.
pub const SCORE_FLOOR: f64 = 0.01;

/// One square feature map, stored row-major as `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFeatures {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl GridFeatures {
    pub fn zeros(size: usize, channels: usize) -> Self {
        GridFeatures {
            size,
            channels,
            data: vec![0.0; size * size * channels],
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.size + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.size + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }
}

/// Features of one frame (or of K stacked frames) on every grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub grids: Vec<GridFeatures>,
}

impl FeatureVolume {
    pub fn zeros(layout: &AnchorConfig, channels: usize) -> Self {
        FeatureVolume {
            grids: layout
                .grid_sizes
                .iter()
                .map(|&g| GridFeatures::zeros(g, channels))
                .collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.grids.first().map_or(0, |g| g.channels)
    }

    fn same_shape(&self, other: &FeatureVolume) -> bool {
        self.grids.len() == other.grids.len()
            && self
                .grids
                .iter()
                .zip(&other.grids)
                .all(|(a, b)| a.size == b.size && a.channels == b.channels)
    }
}

/// Channel-wise concatenation of K frames, in frame order.
pub fn stack_features(frames: &[FeatureVolume]) -> Result<FeatureVolume> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Shape("no frames to stack".into()))?;
    if let Some(bad) = frames.iter().position(|f| !first.same_shape(f)) {
        return Err(Error::Shape(format!("frame {bad} differs in shape from frame 0")));
    }
    let k = frames.len();
    let grids = first
        .grids
        .iter()
        .enumerate()
        .map(|(g, grid)| {
            let d = grid.channels;
            let mut out = GridFeatures::zeros(grid.size, k * d);
            for row in 0..grid.size {
                for col in 0..grid.size {
                    let cell = out.cell_mut(row, col);
                    for (f, frame) in frames.iter().enumerate() {
                        cell[f * d..(f + 1) * d].copy_from_slice(frame.grids[g].cell(row, col));
                    }
                }
            }
            out
        })
        .collect();
    Ok(FeatureVolume { grids })
}

/// Dense `outputs x inputs` map plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Rows `rows` of the map applied to `x`, written into `out`.
    fn apply_rows(&self, x: &[f64], rows: std::ops::Range<usize>, out: &mut [f64]) {
        let nonzero = x.iter().any(|&v| v != 0.0);
        for (o, r) in out.iter_mut().zip(rows) {
            let mut acc = self.bias[r];
            if nonzero {
                let w = &self.weight[r * self.inputs..(r + 1) * self.inputs];
                acc += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            *o = acc;
        }
    }

    /// Accumulate the gradient of rows `rows` given output gradients `g`.
    fn accumulate(&mut self, x: &[f64], rows: std::ops::Range<usize>, g: &[f64]) {
        for (&gr, r) in g.iter().zip(rows) {
            if gr == 0.0 {
                continue;
            }
            self.bias[r] += gr;
            let w = &mut self.weight[r * self.inputs..(r + 1) * self.inputs];
            for (wi, xi) in w.iter_mut().zip(x) {
                *wi += gr * xi;
            }
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }
}

/// Scoring and regression maps of one grid, covering every anchor shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GridParams {
    /// `(K*D) -> A*(C+1)`.
    pub score: Linear,
    /// `(K*D) -> A*4K`.
    pub regression: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub num_classes: usize,
    pub k: usize,
    /// Channels per frame.
    pub channels: usize,
    pub anchors_per_cell: usize,
    pub grids: Vec<GridParams>,
}

impl HeadParams {
    pub fn zeros(layout: &AnchorConfig, num_classes: usize, channels: usize) -> Self {
        let a = layout.anchors_per_cell();
        let k = layout.k;
        HeadParams {
            num_classes,
            k,
            channels,
            anchors_per_cell: a,
            grids: layout
                .grid_sizes
                .iter()
                .map(|_| GridParams {
                    score: Linear::zeros(k * channels, a * (num_classes + 1)),
                    regression: Linear::zeros(k * channels, a * 4 * k),
                })
                .collect(),
        }
    }

    /// Weights drawn from `N(0, std^2)`, biases zero.
    pub fn random(
        layout: &AnchorConfig,
        num_classes: usize,
        channels: usize,
        std: f64,
        seed: u64,
    ) -> Self {
        let mut p = Self::zeros(layout, num_classes, channels);
        if std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, std).expect("positive std");
            for g in &mut p.grids {
                for w in g.score.weight.iter_mut().chain(g.regression.weight.iter_mut()) {
                    *w = normal.sample(&mut rng);
                }
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.params_mut().for_each(|v| *v = 0.0);
        z
    }

    /// Every weight and bias in serialization order.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.grids
            .iter()
            .flat_map(|g| g.score.params().chain(g.regression.params()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.grids
            .iter_mut()
            .flat_map(|g| g.score.params_mut().chain(g.regression.params_mut()))
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    pub fn check_layout(&self, layout: &AnchorConfig) -> Result<()> {
        if self.k != layout.k
            || self.anchors_per_cell != layout.anchors_per_cell()
            || self.grids.len() != layout.grid_sizes.len()
        {
            return Err(Error::Shape(format!(
                "model (K={}, {} shapes, {} grids) does not match anchors (K={}, {} shapes, {} grids)",
                self.k,
                self.anchors_per_cell,
                self.grids.len(),
                layout.k,
                layout.anchors_per_cell(),
                layout.grid_sizes.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, stacked: &FeatureVolume) -> Result<()> {
        let want = self.k * self.channels;
        if stacked.grids.len() != self.grids.len() || stacked.grids.iter().any(|g| g.channels != want)
        {
            return Err(Error::Shape(format!(
                "stacked features have {} grids of {} channels, model expects {} grids of {want}",
                stacked.grids.len(),
                stacked.channels(),
                self.grids.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn cell_input(stacked: &FeatureVolume, a: &AnchorCuboid) -> Vec<f64> {
    stacked.grids[a.grid]
        .cell(a.row, a.col)
        .iter()
        .map(|&v| f64::from(v))
        .collect()
}

/// Logits and regressions for every anchor from its own cell's stacked
/// features.
pub fn predict(
    params: &HeadParams,
    stacked: &FeatureVolume,
    anchors: &[AnchorCuboid],
) -> Result<Predictions> {
    params.check_input(stacked)?;
    let (c1, r) = (params.num_classes + 1, 4 * params.k);
    let mut pred = Predictions::zeros(anchors.len(), params.num_classes, params.k);
    for (i, a) in anchors.iter().enumerate() {
        let x = cell_input(stacked, a);
        let g = &params.grids[a.grid];
        g.score.apply_rows(
            &x,
            a.slot * c1..(a.slot + 1) * c1,
            &mut pred.logits[i * c1..(i + 1) * c1],
        );
        g.regression.apply_rows(
            &x,
            a.slot * r..(a.slot + 1) * r,
            &mut pred.regressions[i * r..(i + 1) * r],
        );
    }
    Ok(pred)
}

/// Accumulate parameter gradients for output gradients of every anchor.
pub(crate) fn backprop(
    grads: &mut HeadParams,
    stacked: &FeatureVolume,
    anchors: &[AnchorCuboid],
    grad_logits: &[f64],
    grad_regressions: &[f64],
) {
    let (c1, r) = (grads.num_classes + 1, 4 * grads.k);
    for (i, a) in anchors.iter().enumerate() {
        let gl = &grad_logits[i * c1..(i + 1) * c1];
        let gr = &grad_regressions[i * r..(i + 1) * r];
        if gl.iter().all(|&v| v == 0.0) && gr.iter().all(|&v| v == 0.0) {
            continue;
        }
        let x = cell_input(stacked, a);
        let g = &mut grads.grids[a.grid];
        g.score.accumulate(&x, a.slot * c1..(a.slot + 1) * c1, gl);
        g.regression.accumulate(&x, a.slot * r..(a.slot + 1) * r, gr);
    }
}

/// A decoded tubelet with its softmax class scores (background at index 0).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTubelet {
    pub tubelet: Tubelet,
    pub scores: Vec<f64>,
    pub anchor: usize,
}

impl ScoredTubelet {
    /// Score of action class `class` (0-based).
    pub fn class_score(&self, class: usize) -> f64 {
        self.scores[class + 1]
    }

    pub fn num_classes(&self) -> usize {
        self.scores.len() - 1
    }
}

/// Softmax scores and decoded tubelets of one stream for every anchor of a
/// sequence, before any score filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub start_frame: usize,
    pub detections: Vec<ScoredTubelet>,
}

impl StreamOutput {
    pub fn from_predictions(pred: &Predictions, anchors: &[AnchorCuboid], start_frame: usize) -> Self {
        let detections = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| ScoredTubelet {
                tubelet: decode(&a.bbox, pred.regression_of(i), start_frame),
                scores: softmax(pred.logits_of(i)),
                anchor: i,
            })
            .collect();
        StreamOutput {
            start_frame,
            detections,
        }
    }

    /// Tubelets with at least one action class scoring above `floor`.
    pub fn above_floor(&self, floor: f64) -> Vec<ScoredTubelet> {
        self.detections
            .iter()
            .filter(|d| d.scores[1..].iter().any(|&s| s > floor))
            .cloned()
            .collect()
    }
}

/// Run the head on one stacked sequence.
pub fn run_stream(
    params: &HeadParams,
    stacked: &FeatureVolume,
    anchors: &[AnchorCuboid],
    start_frame: usize,
) -> Result<StreamOutput> {
    let pred = predict(params, stacked, anchors)?;
    Ok(StreamOutput::from_predictions(&pred, anchors, start_frame))
}

/// Split detections into per-class lists keeping scores above `floor`.
/// Background is never emitted.
pub fn per_class(dets: &[ScoredTubelet], num_classes: usize, floor: f64) -> Vec<Vec<ScoredTubelet>> {
    (0..num_classes)
        .map(|c| {
            dets.iter()
                .filter(|d| d.class_score(c) > floor)
                .cloned()
                .collect()
        })
        .collect()
}

/// Stack K frames, predict, decode and split per class above `score_floor`.
pub fn detect(
    params: &HeadParams,
    frames: &[FeatureVolume],
    anchors: &[AnchorCuboid],
    start_frame: usize,
    score_floor: f64,
) -> Result<Vec<Vec<ScoredTubelet>>> {
    if frames.len() != params.k {
        return Err(Error::Shape(format!(
            "{} frames given to a K={} head",
            frames.len(),
            params.k
        )));
    }
    let stacked = stack_features(frames)?;
    let out = run_stream(params, &stacked, anchors, start_frame)?;
    Ok(per_class(&out.detections, params.num_classes, score_floor))
}
