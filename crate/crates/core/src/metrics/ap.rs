//! Greedy detection-to-ground-truth matching and average precision.

/// How the precision/recall curve is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    EveryPoint,
    /// Mean of the envelope at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive(usize),
    FalsePositive,
    /// Overlaps only ground truths excluded from this evaluation.
    Ignored,
}

/// Detections sorted by descending score, ties kept in input order.
pub fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Walk detections by descending score and give each one the best unmatched
/// active ground truth it overlaps by at least `threshold`.
///
/// `candidates(d)` lists `(ground truth, overlap)` pairs for detection `d`.
/// Returns `(detection, outcome)` in ranked order.
pub fn greedy_match<F>(
    scores: &[f64],
    active: &[bool],
    threshold: f64,
    mut candidates: F,
) -> Vec<(usize, Outcome)>
where
    F: FnMut(usize) -> Vec<(usize, f64)>,
{
    let mut taken = vec![false; active.len()];
    ranked(scores)
        .into_iter()
        .map(|d| {
            let cands = candidates(d);
            let best = cands
                .iter()
                .filter(|&&(g, ov)| active[g] && !taken[g] && ov >= threshold)
                .fold(None::<(usize, f64)>, |best, &(g, ov)| match best {
                    Some((_, b)) if b >= ov => best,
                    _ => Some((g, ov)),
                });
            let outcome = match best {
                Some((g, _)) => {
                    taken[g] = true;
                    Outcome::TruePositive(g)
                }
                None if cands.iter().any(|&(g, ov)| !active[g] && ov >= threshold) => {
                    Outcome::Ignored
                }
                None => Outcome::FalsePositive,
            };
            (d, outcome)
        })
        .collect()
}

/// Precision and recall after each non-ignored detection.
pub fn pr_curve(outcomes: &[Outcome], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    let mut seen = 0usize;
    outcomes
        .iter()
        .filter(|o| **o != Outcome::Ignored)
        .map(|o| {
            seen += 1;
            if matches!(o, Outcome::TruePositive(_)) {
                tp += 1;
            }
            (tp as f64 / seen as f64, tp as f64 / n_gt as f64)
        })
        .collect()
}

/// Average precision of ranked outcomes against `n_gt` ground truths.
/// `None` when there is no ground truth.
pub fn ap_from_outcomes(outcomes: &[Outcome], n_gt: usize, interp: Interpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let curve = pr_curve(outcomes, n_gt);
    if curve.is_empty() {
        return Some(0.0);
    }
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.0).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let ap = match interp {
        Interpolation::EveryPoint => {
            let mut prev_recall = 0.0;
            let mut ap = 0.0;
            for (i, &(_, r)) in curve.iter().enumerate() {
                ap += (r - prev_recall) * envelope[i];
                prev_recall = r;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    curve
                        .iter()
                        .zip(&envelope)
                        .find(|((_, rec), _)| *rec >= r - 1e-12)
                        .map_or(0.0, |(_, &p)| p)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

/// AP of detections against ground truths with an arbitrary overlap.
pub fn average_precision<D, G>(
    dets: &[D],
    gts: &[G],
    score: impl Fn(&D) -> f64,
    overlap: impl Fn(&D, &G) -> f64,
    threshold: f64,
    interp: Interpolation,
) -> Option<f64> {
    let scores: Vec<f64> = dets.iter().map(&score).collect();
    let active = vec![true; gts.len()];
    let outcomes: Vec<Outcome> = greedy_match(&scores, &active, threshold, |d| {
        gts.iter()
            .enumerate()
            .map(|(g, gt)| (g, overlap(&dets[d], gt)))
            .collect()
    })
    .into_iter()
    .map(|(_, o)| o)
    .collect();
    ap_from_outcomes(&outcomes, gts.len(), interp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn outcome_ap(hits: &[bool], n_gt: usize) -> f64 {
        let o: Vec<Outcome> = hits
            .iter()
            .enumerate()
            .map(|(i, &h)| if h { Outcome::TruePositive(i) } else { Outcome::FalsePositive })
            .collect();
        ap_from_outcomes(&o, n_gt, Interpolation::EveryPoint).unwrap()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(outcome_ap(&[true], 1), 1.0);
        assert_eq!(outcome_ap(&[], 3), 0.0);
        assert!((outcome_ap(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(ap_from_outcomes(&[], 0, Interpolation::EveryPoint), None);
    }

    #[test]
    fn eleven_point() {
        let o = [Outcome::TruePositive(0), Outcome::FalsePositive, Outcome::TruePositive(1)];
        let ap = ap_from_outcomes(&o, 2, Interpolation::ElevenPoint).unwrap();
        assert!((ap - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn best_unmatched_ground_truth() {
        // two detections both overlap gt0 best; the second falls back to gt1
        let scores = [0.9, 0.8];
        let m = greedy_match(&scores, &[true, true], 0.5, |_| vec![(0, 0.9), (1, 0.6)]);
        assert_eq!(m, vec![(0, Outcome::TruePositive(0)), (1, Outcome::TruePositive(1))]);
        let m = greedy_match(&scores, &[true, false], 0.5, |_| vec![(0, 0.9), (1, 0.6)]);
        assert_eq!(m[1], (1, Outcome::Ignored));
    }

    #[test]
    fn monotone_score_transform_keeps_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(1..15);
            let dets: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            let gts: Vec<f64> = (0..rng.random_range(1..6)).map(|_| rng.random()).collect();
            let ov = |d: &(f64, f64), g: &f64| 1.0 - (d.1 - g).abs();
            let a = average_precision(&dets, &gts, |d| d.0, ov, 0.8, Interpolation::EveryPoint);
            let b = average_precision(&dets, &gts, |d| (3.0 * d.0).exp(), ov, 0.8, Interpolation::EveryPoint);
            assert_eq!(a, b);
        }
    }
}
