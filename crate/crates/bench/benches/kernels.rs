use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mdcdet_bench::{matching_instance, random_tensor, rng};
use mdcdet_core::matching::{hungarian_match, MatchCost};
use mdcdet_core::memory::PoolShape;
use mdcdet_core::{Detector, DetectorConfig, MemoryPool};

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian_match");
    for (p, g) in [(8, 5), (30, 10), (100, 20)] {
        let (preds, truth) = matching_instance(7, p, g, 8);
        let weights = MatchCost::default();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{p}x{g}")), &(), |b, _| {
            b.iter(|| hungarian_match(&preds, &truth, &weights).unwrap())
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("memory_retrieve");
    for n_units in [20, 100, 400] {
        let shape = PoolShape { n_units, length: 10, dim: 32, n_tasks: 4 };
        let pool = MemoryPool::new(shape, 3).unwrap();
        let query = random_tensor(&mut rng(4), &[32]);
        group.bench_with_input(BenchmarkId::from_parameter(n_units), &(), |b, _| {
            b.iter(|| pool.retrieve(&query).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let config = DetectorConfig { num_classes: 8, ..DetectorConfig::default() };
    let detector = Detector::new(config.clone(), 1).unwrap();
    let image = random_tensor(&mut rng(2), &[config.image_height, config.image_width, config.channels]);
    let visible: Vec<usize> = (0..8).collect();
    c.bench_function("detector_forward", |b| b.iter(|| detector.forward(&image, None, &visible).unwrap()));
    c.bench_function("detector_cache", |b| b.iter(|| detector.cache(&image).unwrap()));
}

criterion_group!(benches, matching, retrieval, forward);
criterion_main!(benches);
