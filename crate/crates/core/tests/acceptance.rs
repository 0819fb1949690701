//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. A positional argument restricts the run to
//! criteria whose number or name contains it.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use act_core::anchors::{generate_anchors, AnchorConfig, AnchorCuboid};
use act_core::geometry::{iou, motion_overlap, tube_overlap, tubelet_overlap, ActionTube, BBox, Tubelet};
use act_core::head::{
    fuse, fuse_late, fuse_union, loss_and_grad, predict, stack_features, FeatureVolume, Fusion, HeadParams,
    ScoredTubelet, StreamOutput, TrainConfig, TrainingSample,
};
use act_core::linker::{link_video, smooth_to_tube, Candidate, Link, LinkerConfig};
use act_core::matchloss::{assign, cross_entropy, total_loss, targets_for, GtTubelet, Predictions};
use act_core::metrics::{
    average_precision, coco_thresholds, error_breakdown, frame_detections_from_tubelets, video_map,
    video_map_range, EvalConfig, EvalReport, Interpolation, VideoAnnotation, VideoDetection,
};
use act_core::synthlab::formats::{detections_to_text, tubes_to_text};
use act_core::synthlab::pipeline::{
    aligned, detect_dataset, evaluate_dataset, generate_dataset, link_detections, recall_study, train_stream,
    DetectConfig,
};
use act_core::synthlab::{
    generate_scene, ActorSpec, Dataset, DatasetConfig, Direction, SceneConfig, SignatureMode, Split, Stream,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if let false = $cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn within(elapsed: Duration, limit_s: u64) -> Check {
    ensure!(
        elapsed.as_secs() < limit_s,
        "took {:.1} s, limit {limit_s} s",
        elapsed.as_secs_f64()
    );
    Ok(String::new())
}

// ---------------------------------------------------------------- criterion 1

fn random_layout(rng: &mut ChaCha8Rng, k: usize) -> AnchorConfig {
    let (grid_sizes, scales, aspect_ratios): (Vec<usize>, Vec<f64>, Vec<f64>) = match rng.random_range(0..4) {
        0 => (vec![2, 1], vec![0.4, 0.8], vec![1.0, 2.0]),
        1 => (vec![3], vec![0.35], vec![1.0, 0.5]),
        2 => (vec![2], vec![0.45], vec![1.0, 2.0, 0.5]),
        _ => (vec![4], vec![0.3], vec![1.0]),
    };
    AnchorConfig {
        image_width: 40.0,
        image_height: 40.0,
        grid_sizes,
        scales,
        aspect_ratios,
        extra_square: false,
        k,
    }
}

fn random_gt(rng: &mut ChaCha8Rng, anchors: &[AnchorCuboid], k: usize, classes: usize) -> GtTubelet {
    let a = anchors[rng.random_range(0..anchors.len())].bbox;
    let boxes = (0..k)
        .map(|_| {
            let s = rng.random_range(0.8..1.25);
            BBox::from_center(
                a.center_x() + rng.random_range(-2.0..2.0),
                a.center_y() + rng.random_range(-2.0..2.0),
                a.width() * s,
                a.height() / s,
            )
        })
        .collect();
    GtTubelet { tubelet: Tubelet::new(0, boxes), label: rng.random_range(0..classes) }
}

/// Instances where a tiny step could cross a smooth-L1 kink or reorder the
/// mined negatives have no derivative to compare against.
fn is_smooth_point(pred: &Predictions, gts: &[GtTubelet], anchors: &[AnchorCuboid]) -> bool {
    let asg = assign(anchors, gts);
    let targets = targets_for(anchors, gts, &asg).expect("targets");
    for (p, t) in asg.positives.iter().zip(&targets) {
        for (r, t) in pred.regression_of(p.anchor).iter().zip(t.flat()) {
            if ((r - t).abs() - 1.0).abs() < 1e-3 {
                return false;
            }
        }
    }
    let keep = (3 * asg.n_pos()).min(asg.negatives.len());
    let mut ce: Vec<f64> = asg.negatives.iter().map(|&i| cross_entropy(pred.logits_of(i), 0)).collect();
    ce.sort_by(|a, b| b.total_cmp(a));
    keep == 0 || keep == ce.len() || ce[keep - 1] - ce[keep] > 1e-4
}

// Structurally zero derivatives come back from central differences as pure
// roundoff (about 1e-10 here), so they get an absolute bound instead.
const ZERO_TOL: f64 = 1e-8;

fn rel_err(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        return if b.abs() <= ZERO_TOL { 0.0 } else { f64::INFINITY };
    }
    (a - b).abs() / a.abs().max(b.abs())
}

fn criterion_gradients() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let h = 1e-5;
    let (mut worst, mut checked, mut done) = (0.0f64, 0usize, 0usize);
    while done < 100 {
        let k = [1, 2, 6][rng.random_range(0..3)];
        let classes = rng.random_range(1..=3);
        let channels = rng.random_range(1..=3);
        let layout = random_layout(&mut rng, k);
        let anchors = ok(generate_anchors(&layout))?;
        ensure!(anchors.len() <= 20, "{} anchors", anchors.len());
        let frames: Vec<FeatureVolume> = (0..k)
            .map(|_| {
                let mut v = FeatureVolume::zeros(&layout, channels);
                v.grids.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|x| *x = normal.sample(&mut rng) as f32);
                v
            })
            .collect();
        let stacked = ok(stack_features(&frames))?;
        let gts: Vec<GtTubelet> = (0..rng.random_range(1..=2)).map(|_| random_gt(&mut rng, &anchors, k, classes)).collect();
        let mut params = HeadParams::zeros(&layout, classes, channels);
        params.params_mut().for_each(|p| *p = 0.5 * normal.sample(&mut rng));
        let asg = assign(&anchors, &gts);
        if asg.n_pos() == 0 {
            continue;
        }
        let targets = ok(targets_for(&anchors, &gts, &asg))?;
        let pred = ok(predict(&params, &stacked, &anchors))?;
        if !is_smooth_point(&pred, &gts, &anchors) {
            continue;
        }
        let loss_of = |p: &Predictions| total_loss(p, &asg, &targets, 3.0).expect("loss").value;
        let analytic = ok(total_loss(&pred, &asg, &targets, 3.0))?;

        // head outputs
        for (which, grad) in [(0, &analytic.grad_logits), (1, &analytic.grad_regressions)] {
            for (i, &g) in grad.iter().enumerate() {
                let mut plus = pred.clone();
                let mut minus = pred.clone();
                let (p, m) = if which == 0 {
                    (&mut plus.logits[i], &mut minus.logits[i])
                } else {
                    (&mut plus.regressions[i], &mut minus.regressions[i])
                };
                *p += h;
                *m -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(g, fd));
                checked += 1;
            }
        }

        // head parameters
        let sample = TrainingSample { stacked: stacked.clone(), gts: gts.clone() };
        let (value, grads) = ok(loss_and_grad(&params, &anchors, &sample, 3.0))?;
        ensure!((value - analytic.value).abs() < 1e-12, "loss_and_grad disagrees with total_loss");
        let loss_at = |p: &HeadParams| loss_of(&predict(p, &stacked, &anchors).expect("predict"));
        for (i, &g) in grads.params().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *plus.params_mut().nth(i).unwrap() += h;
            *minus.params_mut().nth(i).unwrap() -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(g, fd));
            checked += 1;
        }
        done += 1;
    }
    ensure!(worst < 1e-4, "max relative error {worst:.3e}");
    within(t0.elapsed(), 30)?;
    Ok(format!("100 instances, {checked} partial derivatives, max rel err {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 2

fn raster_area_overlap(a: &BBox, b: &BBox) -> (u64, u64) {
    let inside = |r: &BBox, x: f64, y: f64| x >= r.x1 && x < r.x2 && y >= r.y1 && y < r.y2;
    let (mut inter, mut union) = (0, 0);
    for y in 0..24 {
        for x in 0..24 {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (ia, ib) = (inside(a, cx, cy), inside(b, cx, cy));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    (inter, union)
}

fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let (i, u) = raster_area_overlap(a, b);
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

fn int_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.random_range(0..20) as f64;
    let y1 = rng.random_range(0..20) as f64;
    let w = rng.random_range(0..=(24 - x1 as i32).min(10)) as f64;
    let h = rng.random_range(0..=(24 - y1 as i32).min(10)) as f64;
    BBox::new(x1, y1, x1 + w, y1 + h)
}

fn criterion_geometry() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (int_box(&mut rng), int_box(&mut rng));
        worst = worst.max((iou(&a, &b) - raster_iou(&a, &b)).abs());

        let k = rng.random_range(1..=5);
        let start = rng.random_range(0..4);
        let ta = Tubelet::new(start, (0..k).map(|_| int_box(&mut rng)).collect());
        let tb = Tubelet::new(start, (0..k).map(|_| int_box(&mut rng)).collect());
        let oracle = ta.boxes.iter().zip(&tb.boxes).map(|(x, y)| raster_iou(x, y)).sum::<f64>() / k as f64;
        worst = worst.max((ok(tubelet_overlap(&ta, &tb))? - oracle).abs());

        let tube = |rng: &mut ChaCha8Rng| {
            let start = rng.random_range(0..8);
            let len = rng.random_range(1..=8);
            ActionTube { start_frame: start, boxes: (0..len).map(|_| int_box(rng)).collect(), label: 0, score: 1.0 }
        };
        let (ua, ub) = (tube(&mut rng), tube(&mut rng));
        let (mut sum, mut frames) = (0.0, 0usize);
        for f in 0..20 {
            match (ua.box_at(f), ub.box_at(f)) {
                (Some(x), Some(y)) => {
                    sum += raster_iou(x, y);
                    frames += 1;
                }
                (Some(_), None) | (None, Some(_)) => frames += 1,
                (None, None) => {}
            }
        }
        let disjoint = ua.end_frame() < ub.start_frame || ub.end_frame() < ua.start_frame;
        let oracle = if disjoint { 0.0 } else { sum / frames as f64 };
        worst = worst.max((tube_overlap(&ua, &ub) - oracle).abs());
    }
    ensure!(worst <= 1e-9, "max deviation {worst:.3e}");
    within(t0.elapsed(), 10)?;
    Ok(format!("1000 cases x 3 measures, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 3

/// Greedy matching and precision envelope by brute force over every cutoff.
fn exhaustive_ap(scores: &[f64], overlaps: &[Vec<f64>], n_gt: usize, threshold: f64) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; n_gt];
    let mut hits = Vec::new();
    for &d in &order {
        let mut best: Option<usize> = None;
        for g in 0..n_gt {
            if !used[g] && overlaps[d][g] >= threshold && best.is_none_or(|b| overlaps[d][g] > overlaps[d][b]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            used[g] = true;
        }
        hits.push(best.is_some());
    }
    let n = hits.len();
    let precision: Vec<f64> = (1..=n)
        .map(|cut| hits[..cut].iter().filter(|&&x| x).count() as f64 / cut as f64)
        .collect();
    let mut ap = 0.0;
    for i in 0..n {
        if hits[i] {
            let best_after = precision[i..].iter().cloned().fold(0.0, f64::max);
            ap += best_after / n_gt as f64;
        }
    }
    Some(ap)
}

fn criterion_ap() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n_det = rng.random_range(0..=20);
        let n_gt = rng.random_range(0..=6);
        // coarse scores produce ties
        let scores: Vec<f64> = (0..n_det).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
        let overlaps: Vec<Vec<f64>> = (0..n_det)
            .map(|_| (0..n_gt).map(|_| if rng.random_bool(0.4) { rng.random_range(0.5..1.0) } else { rng.random_range(0.0..0.5) }).collect())
            .collect();
        let dets: Vec<usize> = (0..n_det).collect();
        let gts: Vec<usize> = (0..n_gt).collect();
        let ap = average_precision(&dets, &gts, |&d| scores[d], |&d, &g| overlaps[d][g], 0.5, Interpolation::EveryPoint);
        let oracle = exhaustive_ap(&scores, &overlaps, n_gt, 0.5);
        match (ap, oracle) {
            (Some(a), Some(o)) => worst = worst.max((a - o).abs()),
            (None, None) => {}
            (a, o) => return Err(format!("AP {a:?} vs oracle {o:?}")),
        }
    }
    ensure!(worst <= 1e-9, "max AP deviation {worst:.3e}");

    // the 0.5:0.95 aggregate is the plain mean of its components
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for v in 0..10 {
        let gt_box = BBox::new(10.0, 10.0, 40.0, 40.0);
        let label = v % 2;
        gts.push(VideoAnnotation {
            num_frames: 10,
            tubes: vec![ActionTube { start_frame: 0, boxes: vec![gt_box; 10], label, score: 1.0 }],
        });
        for _ in 0..3 {
            let shift = rng.random_range(0.0..12.0);
            dets.push(VideoDetection {
                video: v,
                tube: ActionTube {
                    start_frame: rng.random_range(0..3),
                    boxes: vec![gt_box.translate(shift, 0.0); 7],
                    label: rng.random_range(0..2),
                    score: rng.random(),
                },
            });
        }
    }
    let components: Vec<f64> = coco_thresholds()
        .iter()
        .map(|&t| video_map(&dets, &gts, 2, t, Interpolation::EveryPoint).map)
        .collect();
    let mean = components.iter().sum::<f64>() / components.len() as f64;
    let range = video_map_range(&dets, &gts, 2, Interpolation::EveryPoint);
    ensure!(components.len() == 10 && range == mean, "aggregate {range} vs mean {mean}");
    ensure!(components.windows(2).any(|w| w[0] != w[1]), "degenerate fixture");
    Ok(format!("500 instances, max deviation {worst:.1e}; 0.5:0.95 = {range:.6} = mean of 10 [{:.1} s]", t0.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 4

fn recall_config() -> DatasetConfig {
    let mut cfg = DatasetConfig {
        seed: 0,
        mode: SignatureMode::Appearance,
        direction: Direction::Any,
        frames: 40,
        train_videos: 60,
        test_videos: 0,
        speed: (0.0, 0.045),
        actor_size: (0.25, 0.35),
        actor_aspect: (0.8, 1.25),
        ..DatasetConfig::default()
    };
    cfg.layout.grid_sizes = vec![16, 8, 4];
    cfg.layout.scales = vec![0.2, 0.3, 0.4];
    cfg.layout.aspect_ratios = vec![1.0, 2.0, 0.5];
    cfg.layout.extra_square = false;
    cfg
}

fn criterion_recall() -> Check {
    let t0 = Instant::now();
    let cfg = recall_config();
    let mut tubes = Vec::new();
    for v in 0..cfg.num_videos() {
        tubes.extend(ok(cfg.scene(v))?.actors.iter().map(ActorSpec::tube));
    }
    let mo = tubes.iter().map(|t| motion_overlap(t, 10).unwrap()).sum::<f64>() / tubes.len() as f64;
    ensure!((mo - 0.6).abs() <= 0.05, "mean motion overlap at n=10 is {mo:.3}");
    let ks = [1, 2, 4, 6, 8, 10, 16, 24, 32];
    let thresholds = [0.3, 0.4, 0.5, 0.6, 0.7];
    let refs: Vec<&ActionTube> = tubes.iter().collect();
    let tables = ok(recall_study(&cfg.layout, &refs, cfg.num_classes(), &ks, &thresholds))?;
    let at = |k_idx: usize, t_idx: usize| tables[k_idx].1.mean[t_idx];
    for (i, &k) in ks.iter().enumerate() {
        for j in 1..thresholds.len() {
            ensure!(at(i, j) <= at(i, j - 1), "K={k}: recall rises with the threshold");
        }
        if i > 0 {
            for (j, th) in thresholds.iter().enumerate() {
                ensure!(at(i, j) <= at(i - 1, j), "threshold {th}: recall rises from K={} to K={k}", ks[i - 1]);
            }
        }
    }
    let r50: Vec<f64> = (0..ks.len()).map(|i| at(i, 2)).collect();
    let short_min = r50[..6].iter().cloned().fold(1.0, f64::min);
    ensure!(short_min >= 0.95, "recall@0.5 for K<=10 drops to {short_min:.3}");
    let drop = short_min - r50[8];
    ensure!(drop >= 0.20, "recall@0.5 drops only {drop:.3} at K=32");
    within(t0.elapsed(), 120)?;
    Ok(format!(
        "motion overlap@10 {mo:.3}; recall@0.5 K=1 {:.3}, K=10 {:.3}, K=32 {:.3}",
        r50[0], r50[5], r50[8]
    ))
}

// ---------------------------------------------------------------- criterion 5

fn oracle_tubelet(tube: &ActionTube, start: usize, k: usize, label: usize, classes: usize) -> ScoredTubelet {
    let mut scores = vec![0.0; classes + 1];
    scores[label + 1] = 0.9;
    scores[0] = 0.1;
    ScoredTubelet { tubelet: tube.window(start, k).expect("window inside tube"), scores, anchor: 7 }
}

fn criterion_linking() -> Check {
    let k = 4;
    let scene = SceneConfig {
        image_width: 100.0,
        image_height: 100.0,
        num_frames: 30,
        num_classes: 2,
        actors: vec![ActorSpec {
            class: 1,
            start_box: BBox::new(5.0, 20.0, 35.0, 60.0),
            velocity: (2.0, 1.0),
            growth: 0.0,
            start_frame: 0,
            end_frame: 29,
        }],
        mode: SignatureMode::Appearance,
        noise: 0.0,
        seed: 0,
    };
    let s = ok(generate_scene(&scene, &AnchorConfig { k, ..recall_config().layout }))?;
    let gt = &s.tubes[0];
    let cfg = LinkerConfig::new(k);
    let sequences = |skip: &dyn Fn(usize) -> bool| -> Vec<(usize, Vec<ScoredTubelet>)> {
        (0..=30 - k)
            .filter(|&f| !skip(f))
            .map(|f| (f, vec![oracle_tubelet(gt, f, k, 1, 2)]))
            .collect()
    };

    // (a) one exact tube
    let tubes = ok(link_video(&sequences(&|_| false), 2, &cfg))?;
    ensure!(tubes.len() == 1, "(a) {} tubes", tubes.len());
    let v_iou = tube_overlap(&tubes[0], gt);
    ensure!(v_iou == 1.0 && tubes[0].label == 1, "(a) video IoU {v_iou}");

    // (b) K-1 missing sequences are bridged, K are not
    for gap in 1..k {
        let tubes = ok(link_video(&sequences(&|f| (10..10 + gap).contains(&f)), 2, &cfg))?;
        ensure!(tubes.len() == 1, "(b) gap {gap}: {} tubes", tubes.len());
        ensure!(tubes[0].start_frame == 0 && tubes[0].len() == 30, "(b) gap {gap}: tube is broken");
    }
    let tubes = ok(link_video(&sequences(&|f| (10..10 + k).contains(&f)), 2, &cfg))?;
    ensure!(tubes.len() == 2, "(b) gap {k}: {} tubes", tubes.len());

    // (c) smoothing by per-frame means
    let cand = |start: usize, boxes: Vec<[f64; 4]>| Candidate {
        tubelet: Tubelet::new(start, boxes.into_iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect()),
        score: 0.5,
        anchor: 0,
    };
    let link = Link {
        label: 0,
        tubelets: vec![
            cand(0, vec![[0., 0., 10., 10.], [1., 0., 11., 10.], [2., 0., 12., 10.]]),
            cand(1, vec![[2., 1., 12., 11.], [3., 1., 13., 11.], [4., 1., 14., 11.]]),
            cand(2, vec![[4., 2., 14., 12.], [5., 2., 15., 12.], [6., 2., 16., 12.]]),
        ],
        score: 0.5,
        frames_since_extension: 0,
    };
    let expected = [
        [0.0, 0.0, 10.0, 10.0],
        [1.5, 0.5, 11.5, 10.5],
        [3.0, 1.0, 13.0, 11.0],
        [4.5, 1.5, 14.5, 11.5],
        [6.0, 2.0, 16.0, 12.0],
    ];
    let tube = smooth_to_tube(&link);
    ensure!(tube.start_frame == 0 && tube.len() == 5, "(c) tube spans {}..={}", tube.start_frame, tube.end_frame());
    for (b, e) in tube.boxes.iter().zip(expected) {
        ensure!([b.x1, b.y1, b.x2, b.y2] == e, "(c) {b:?} != {e:?}");
    }
    Ok(format!("(a) 1 tube, IoU {v_iou}; (b) gaps 1..{} bridged, gap {k} splits; (c) 5 smoothed boxes exact", k - 1))
}

// ---------------------------------------------------------------- criterion 6

fn motion_dataset() -> DatasetConfig {
    DatasetConfig { mode: SignatureMode::MotionOnly, seed: 1, train_videos: 40, test_videos: 80, ..DatasetConfig::default() }
}

fn motion_train_config() -> TrainConfig {
    TrainConfig { learning_rate: 0.1, momentum: 0.9, batch_size: 16, epochs: 20, seed: 0, hnm_ratio: 3.0 }
}

fn train_and_eval(ds: &Dataset, k: usize) -> Result<EvalReport, String> {
    let (model, _) = ok(train_stream(ds, Stream::Rgb, k, &motion_train_config()))?;
    let dets = ok(detect_dataset(ds, &model, None, &DetectConfig::default()))?;
    let tubes = ok(link_detections(&dets, &LinkerConfig::new(k)))?;
    ok(evaluate_dataset(ds, &tubes, Some(&dets)))
}

fn criterion_central_claim() -> Check {
    let t0 = Instant::now();
    let dir = ok(tempfile::tempdir())?;
    let (k6, k1) = single_threaded(|| -> Result<_, String> {
        ok(generate_dataset(&motion_dataset(), dir.path()))?;
        let ds = ok(Dataset::open(dir.path()))?;
        Ok((train_and_eval(&ds, 6)?, train_and_eval(&ds, 1)?))
    })?;
    let (m6, m1) = (k6.frame.map, k1.frame.map);
    let (c6, c1) = (k6.errors.classification, k1.errors.classification);
    ensure!(m6 >= 0.9, "K=6 frame-mAP {m6:.3}");
    ensure!(m1 <= 0.6, "K=1 frame-mAP {m1:.3}");
    ensure!(c6 < c1, "E_C K=6 {c6:.3} vs K=1 {c1:.3}");
    within(t0.elapsed(), 600)?;
    Ok(format!(
        "frame-mAP@0.5 K=6 {m6:.3}, K=1 {m1:.3}; E_C K=6 {c6:.3}, K=1 {c1:.3} [{:.0} s, 1 thread]",
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_error_partition() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let cfg = DatasetConfig { seed: 4, train_videos: 0, test_videos: 6, actors: (1, 2), ..DatasetConfig::default() };
    ok(generate_dataset(&cfg, dir.path()))?;
    let ds = ok(Dataset::open(dir.path()))?;
    let mut runs = Vec::new();
    // an untrained head produces every kind of false positive
    for (seed, std) in [(1, 0.5), (2, 1.0)] {
        let layout = AnchorConfig { k: 3, ..cfg.layout.clone() };
        let params = HeadParams::random(&layout, 2, ds.features(&ds.manifest.videos[0], Stream::Rgb).map_err(|e| e.to_string())?[0].channels(), std, seed);
        let model = act_core::synthlab::ModelFile { stream: Stream::Rgb, params };
        let dets = ok(detect_dataset(&ds, &model, None, &DetectConfig { keep_per_class: 20, ..DetectConfig::default() }))?;
        let (gts, _, tubelets) = ok(aligned(&ds, Split::Test, None, Some(&dets)))?;
        let ecfg = EvalConfig::new(ds.manifest.class_names.clone());
        let frame = frame_detections_from_tubelets(&tubelets, &gts, &ecfg);
        let b = error_breakdown(&frame, &gts, 2, 0.5);
        ensure!(b.counts.iter().sum::<usize>() == b.false_positives, "factor counts do not sum to the false positives");
        ensure!(b.false_positives + b.true_positives == frame.len(), "{} + {} != {} detections", b.false_positives, b.true_positives, frame.len());
        ensure!(b.temporal == 0.0 && b.counts[2] == 0, "E_T = {} on trimmed data", b.temporal);
        runs.push(b.false_positives);
    }
    ensure!(runs.iter().all(|&n| n > 0), "no false positives to classify");
    Ok(format!("{} false positives over {} runs, each in one factor; E_T = 0", runs.iter().sum::<usize>(), runs.len()))
}

// ---------------------------------------------------------------- criterion 8

fn random_stream(rng: &mut ChaCha8Rng, n: usize, classes: usize, k: usize, start: usize) -> StreamOutput {
    StreamOutput {
        start_frame: start,
        detections: (0..n)
            .map(|anchor| {
                let raw: Vec<f64> = (0..=classes).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
                let sum: f64 = raw.iter().sum::<f64>().max(1e-12);
                let boxes = (0..k)
                    .map(|_| {
                        let x = rng.random_range(0.0..50.0);
                        let y = rng.random_range(0.0..50.0);
                        BBox::new(x, y, x + rng.random_range(1.0..30.0), y + rng.random_range(1.0..30.0))
                    })
                    .collect();
                ScoredTubelet { tubelet: Tubelet::new(start, boxes), scores: raw.iter().map(|v| v / sum).collect(), anchor }
            })
            .collect(),
    }
}

fn criterion_fusion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let classes = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let start = rng.random_range(0..10);
        let rgb = random_stream(&mut rng, n, classes, k, start);
        let flow = random_stream(&mut rng, n, classes, k, start);
        let late = ok(fuse_late(&rgb, &flow))?;
        ensure!(late.detections.len() == n, "late fusion changed the anchor count");
        for ((f, a), b) in late.detections.iter().zip(&rgb.detections).zip(&flow.detections) {
            ensure!(f.tubelet == a.tubelet && f.anchor == a.anchor, "late fusion moved a box");
            for c in 0..=classes {
                ensure!((f.scores[c] - 0.5 * (a.scores[c] + b.scores[c])).abs() <= 1e-15, "score is not the mean");
            }
        }
        let floor = rng.random_range(0.0..0.3);
        let fused = ok(fuse(&rgb, &flow, Fusion::Late, floor))?;
        ensure!(fused == late.above_floor(floor), "late fusion must precede the floor");
        let (ra, fa) = (rgb.above_floor(floor), flow.above_floor(floor));
        let union = ok(fuse(&rgb, &flow, Fusion::Union, floor))?;
        ensure!(union.len() == ra.len() + fa.len(), "union is not additive");
        ensure!(fuse_union(ra.clone(), fa.clone()).len() == ra.len() + fa.len(), "union is not additive");
    }
    Ok("200 random stream pairs: late = per-class mean with RGB boxes; union additive".into())
}

// ---------------------------------------------------------------- criterion 9

fn run_pipeline(out: &Path) -> Result<(), String> {
    let cfg = DatasetConfig { seed: 5, train_videos: 6, test_videos: 3, frames: 14, noise: 0.05, ..DatasetConfig::default() };
    let data = out.join("data");
    ok(generate_dataset(&cfg, &data))?;
    let ds = ok(Dataset::open(&data))?;
    let tc = TrainConfig { epochs: 3, batch_size: 8, ..TrainConfig::default() };
    let mut models = Vec::new();
    for s in [Stream::Rgb, Stream::Flow] {
        let (model, outcome) = ok(train_stream(&ds, s, 4, &tc))?;
        ok(model.write(&out.join(format!("{}.model", s.name()))))?;
        ok(std::fs::write(out.join(format!("{}.curve", s.name())), outcome.curve_tsv()))?;
        models.push(model);
    }
    let dets = ok(detect_dataset(&ds, &models[0], Some((&models[1], Fusion::Late)), &DetectConfig::default()))?;
    ok(std::fs::write(out.join("dets.txt"), detections_to_text(&dets)))?;
    let tubes = ok(link_detections(&dets, &LinkerConfig::new(4)))?;
    ok(std::fs::write(out.join("tubes.txt"), tubes_to_text(&tubes)))?;
    let report = ok(evaluate_dataset(&ds, &tubes, Some(&dets)))?;
    ok(std::fs::write(out.join("report.txt"), report.to_text()))?;
    Ok(())
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).expect("readable dir").flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn criterion_determinism() -> Check {
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    single_threaded(|| -> Result<(), String> {
        run_pipeline(a.path())?;
        run_pipeline(b.path())
    })?;
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    ensure!(sa.keys().eq(sb.keys()), "runs wrote different files");
    for (name, bytes) in &sa {
        ensure!(&sb[name] == bytes, "{name} differs between runs");
    }
    let total: usize = sa.values().map(Vec::len).sum();
    Ok(format!("{} files, {total} bytes identical across two runs", sa.len()))
}

// ----------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", criterion_gradients),
        ("geometry oracle", criterion_geometry),
        ("AP oracle", criterion_ap),
        ("anchor recall vs K", criterion_recall),
        ("linking scenarios", criterion_linking),
        ("motion-only K=6 vs K=1", criterion_central_claim),
        ("error-factor partition", criterion_error_partition),
        ("fusion contract", criterion_fusion),
        ("determinism", criterion_determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = (i + 1).to_string();
        if let Some(f) = &filter {
            if *f != number && (f.parse::<usize>().is_ok() || !name.contains(f.as_str())) {
                continue;
            }
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {number}  {name}: {detail} ({secs:.1} s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {number}  {name}: {why} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
