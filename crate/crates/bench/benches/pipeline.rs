use std::hint::black_box;

use act_core::anchors::{generate_anchors, AnchorConfig};
use act_core::geometry::{iou, tube_overlap, ActionTube, BBox, Tubelet};
use act_core::head::{predict, stack_features, FeatureVolume, HeadParams, ScoredTubelet};
use act_core::linker::{link_video, nms_per_class, LinkerConfig};
use act_core::metrics::{average_precision, Interpolation};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..80.0);
    let y = rng.random_range(0.0..80.0);
    BBox::new(x, y, x + rng.random_range(4.0..40.0), y + rng.random_range(4.0..40.0))
}

fn scored(rng: &mut ChaCha8Rng, start: usize, k: usize, classes: usize, anchor: usize) -> ScoredTubelet {
    let raw: Vec<f64> = (0..=classes).map(|_| rng.random_range(0.0..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let b = random_box(rng);
    let boxes = (0..k).map(|i| b.translate(i as f64, 0.0)).collect();
    ScoredTubelet { tubelet: Tubelet::new(start, boxes), scores: raw.iter().map(|v| v / sum).collect(), anchor }
}

fn geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let boxes: Vec<(BBox, BBox)> = (0..1024).map(|_| (random_box(&mut rng), random_box(&mut rng))).collect();
    c.bench_function("iou x1024", |b| b.iter(|| boxes.iter().map(|(x, y)| iou(black_box(x), black_box(y))).sum::<f64>()));

    let tube = |rng: &mut ChaCha8Rng| ActionTube {
        start_frame: rng.random_range(0..20),
        boxes: (0..100).map(|_| random_box(rng)).collect(),
        label: 0,
        score: 1.0,
    };
    let (a, t) = (tube(&mut rng), tube(&mut rng));
    c.bench_function("tube_overlap 100 frames", |b| b.iter(|| tube_overlap(black_box(&a), black_box(&t))));
}

fn linking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = 6;
    let cfg = LinkerConfig::new(k);
    let dets: Vec<ScoredTubelet> = (0..300).map(|i| scored(&mut rng, 0, k, 3, i)).collect();
    c.bench_function("nms 300 tubelets x 3 classes", |b| b.iter(|| nms_per_class(black_box(&dets), 3, &cfg)));

    let sequences: Vec<(usize, Vec<ScoredTubelet>)> =
        (0..60).map(|s| (s, (0..100).map(|i| scored(&mut rng, s, k, 3, i)).collect())).collect();
    c.bench_function("link 60 sequences x 100 tubelets", |b| b.iter(|| link_video(black_box(&sequences), 3, &cfg)));
}

fn ap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
    let overlaps: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
    let dets: Vec<usize> = (0..2000).collect();
    let gts: Vec<usize> = (0..50).collect();
    c.bench_function("average_precision 2000 dets x 50 gts", |b| {
        b.iter(|| {
            average_precision(
                &dets,
                &gts,
                |&d| scores[d],
                |&d, &g| overlaps[(d * 31 + g) % 2000],
                0.5,
                Interpolation::EveryPoint,
            )
        })
    });
}

fn head(c: &mut Criterion) {
    let layout = AnchorConfig {
        image_width: 96.0,
        image_height: 96.0,
        grid_sizes: vec![12, 6, 3, 1],
        scales: vec![0.15, 0.3, 0.55, 0.85],
        aspect_ratios: vec![1.0, 2.0, 0.5],
        extra_square: true,
        k: 6,
    };
    let anchors = generate_anchors(&layout).unwrap();
    let frames: Vec<FeatureVolume> = (0..layout.k).map(|_| FeatureVolume::zeros(&layout, 7)).collect();
    let stacked = stack_features(&frames).unwrap();
    let params = HeadParams::random(&layout, 2, 7, 0.01, 0);
    c.bench_function("predict K=6, 760 anchors", |b| b.iter(|| predict(black_box(&params), &stacked, &anchors)));
}

criterion_group!(benches, geometry, linking, ap, head);
criterion_main!(benches);
