use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{backprop, predict, FeatureVolume, HeadParams};
use crate::anchors::AnchorCuboid;
use crate::error::{Error, Result};
use crate::matchloss::{
    assign, targets_for, total_loss, Assignment, GtTubelet, RegressionTarget, DEFAULT_HNM_RATIO,
};

/// One eligible K-frame sequence: stacked features and the ground-truth
/// tubelets it contains.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub stacked: FeatureVolume,
    pub gts: Vec<GtTubelet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hnm_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.0,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            hnm_ratio: DEFAULT_HNM_RATIO,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean step loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    /// `epoch<TAB>loss` lines.
    pub fn curve_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{e}\t{l:.9}\n"));
        }
        s
    }
}

struct Prepared<'a> {
    sample: &'a TrainingSample,
    asg: Assignment,
    targets: Vec<RegressionTarget>,
}

fn prepare<'a>(sample: &'a TrainingSample, anchors: &[AnchorCuboid]) -> Result<Prepared<'a>> {
    let asg = assign(anchors, &sample.gts);
    let targets = targets_for(anchors, &sample.gts, &asg)?;
    Ok(Prepared {
        sample,
        asg,
        targets,
    })
}

fn prepared_loss(
    params: &HeadParams,
    anchors: &[AnchorCuboid],
    p: &Prepared<'_>,
    hnm_ratio: f64,
) -> Result<Option<(f64, HeadParams)>> {
    if p.asg.n_pos() == 0 {
        return Ok(None);
    }
    let pred = predict(params, &p.sample.stacked, anchors)?;
    let loss = total_loss(&pred, &p.asg, &p.targets, hnm_ratio)?;
    let mut grads = params.zeros_like();
    backprop(
        &mut grads,
        &p.sample.stacked,
        anchors,
        &loss.grad_logits,
        &loss.grad_regressions,
    );
    Ok(Some((loss.value, grads)))
}

/// Training objective of one sequence and its gradient with respect to every
/// head parameter. Sequences without positives contribute zero.
pub fn loss_and_grad(
    params: &HeadParams,
    anchors: &[AnchorCuboid],
    sample: &TrainingSample,
    hnm_ratio: f64,
) -> Result<(f64, HeadParams)> {
    let p = prepare(sample, anchors)?;
    Ok(prepared_loss(params, anchors, &p, hnm_ratio)?
        .unwrap_or_else(|| (0.0, params.zeros_like())))
}

/// Mini-batch gradient descent from `init`. Per-sample gradients are computed
/// in parallel and reduced in sample order, so results do not depend on the
/// thread count.
pub fn train(
    samples: &[TrainingSample],
    anchors: &[AnchorCuboid],
    init: HeadParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let prepared: Vec<Prepared<'_>> = samples
        .iter()
        .map(|s| prepare(s, anchors))
        .collect::<Result<_>>()?;
    let mut params = init;
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Option<(f64, HeadParams)>> = batch
                .par_iter()
                .map(|&i| prepared_loss(&params, anchors, &prepared[i], cfg.hnm_ratio))
                .collect::<Result<_>>()?;
            let mut grad = params.zeros_like();
            let mut loss = 0.0;
            let mut used = 0usize;
            for (l, g) in results.into_iter().flatten() {
                loss += l;
                used += 1;
                for (acc, v) in grad.params_mut().zip(g.params()) {
                    *acc += v;
                }
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: step_losses.len(),
                    loss,
                });
            }
            for ((p, v), g) in params
                .params_mut()
                .zip(velocity.params_mut())
                .zip(grad.params())
            {
                *v = cfg.momentum * *v - cfg.learning_rate * g * scale;
                *p += *v;
            }
            step_losses.push(loss);
            epoch_sum += loss;
            epoch_steps += 1;
        }
        epoch_losses.push(if epoch_steps == 0 {
            0.0
        } else {
            epoch_sum / epoch_steps as f64
        });
    }
    Ok(TrainOutcome {
        params,
        step_losses,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate_anchors, AnchorConfig};
    use crate::geometry::Tubelet;
    use crate::head::stack_features;

    fn layout() -> AnchorConfig {
        AnchorConfig {
            image_width: 40.0,
            image_height: 40.0,
            grid_sizes: vec![4],
            scales: vec![0.25],
            aspect_ratios: vec![1.0],
            extra_square: false,
            k: 2,
        }
    }

    /// An actor sitting exactly on one anchor, flagged by a one-hot feature
    /// whose position encodes the class.
    fn sample(anchors: &[AnchorCuboid], cell: usize, label: usize) -> TrainingSample {
        let l = layout();
        let mut frames = vec![FeatureVolume::zeros(&l, 3); 2];
        let a = anchors[cell];
        for f in &mut frames {
            let c = f.grids[0].cell_mut(a.row, a.col);
            c[0] = 1.0;
            c[1 + label] = 1.0;
        }
        TrainingSample {
            stacked: stack_features(&frames).unwrap(),
            gts: vec![GtTubelet {
                tubelet: Tubelet::new(0, vec![a.bbox.translate(0.5, 0.0); 2]),
                label,
            }],
        }
    }

    fn dataset(anchors: &[AnchorCuboid]) -> Vec<TrainingSample> {
        (0..16).map(|i| sample(anchors, i, i % 2)).collect()
    }

    #[test]
    fn separable_set_converges() {
        let l = layout();
        let anchors = generate_anchors(&l).unwrap();
        let data = dataset(&anchors);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            batch_size: 4,
            epochs: 150,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&data, &anchors, HeadParams::random(&l, 2, 3, 0.01, 1), &cfg).unwrap();
        let last = *out.epoch_losses.last().unwrap();
        assert!(last < 0.05, "final loss {last}");
        assert!(out.curve_tsv().starts_with("epoch\tloss\n0\t"));
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let l = layout();
        let anchors = generate_anchors(&l).unwrap();
        let init = HeadParams::random(&l, 2, 3, 0.1, 9);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = train(&dataset(&anchors), &anchors, init.clone(), &cfg).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn small_steps_descend_on_a_fixed_batch() {
        let l = layout();
        let anchors = generate_anchors(&l).unwrap();
        let data = dataset(&anchors);
        let mut params = HeadParams::random(&l, 2, 3, 0.1, 4);
        let batch_loss = |p: &HeadParams| -> (f64, HeadParams) {
            let mut g = p.zeros_like();
            let mut total = 0.0;
            for s in &data {
                let (v, gs) = loss_and_grad(p, &anchors, s, 3.0).unwrap();
                total += v;
                g.params_mut().zip(gs.params()).for_each(|(a, b)| *a += b);
            }
            (total, g)
        };
        let (mut prev, _) = batch_loss(&params);
        for _ in 0..30 {
            let (_, g) = batch_loss(&params);
            params.params_mut().zip(g.params()).for_each(|(p, g)| *p -= 0.01 * g);
            let (now, _) = batch_loss(&params);
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let l = layout();
        let anchors = generate_anchors(&l).unwrap();
        let data = dataset(&anchors);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let a = train(&data, &anchors, HeadParams::random(&l, 2, 3, 0.01, 1), &cfg).unwrap();
        let b = train(&data, &anchors, HeadParams::random(&l, 2, 3, 0.01, 1), &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.step_losses, b.step_losses);
    }

    #[test]
    fn divergence_is_reported() {
        let l = layout();
        let anchors = generate_anchors(&l).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e307,
            momentum: 0.99,
            batch_size: 1,
            epochs: 10,
            ..TrainConfig::default()
        };
        let err = train(&dataset(&anchors), &anchors, HeadParams::random(&l, 2, 3, 0.1, 1), &cfg);
        assert!(matches!(err, Err(Error::Diverged { .. })));
    }
}
