//! Parallel vs sequential throughput of the data-parallel stages.
//!
//! "sequential" runs the same code inside a one-thread rayon pool, so the
//! only difference is the worker count.

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;
use weakpose::body::BodyModel;
use weakpose::camera::NormalizedCamera;
use weakpose::eval::evaluate;
use weakpose::fitting::{optimize, FitConfig};
use weakpose::geometry::Vec2;
use weakpose::losses::PriorTerms;
use weakpose::par;
use weakpose::prior::{MixtureMode, PriorSchedule};
use weakpose::regressor::Prediction;
use weakpose::scenes::{generate_split, generate_target, SceneConfig, Split};
use weakpose::trainer::initial_params;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![
        ("sequential", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", ThreadPoolBuilder::new().num_threads(n).build().unwrap()),
    ]
}

fn scene(n: usize) -> SceneConfig {
    SceneConfig {
        n_train: n,
        n_test: n,
        ..Default::default()
    }
}

fn bench_generation(c: &mut Criterion) {
    let model = BodyModel::procedural();
    let config = scene(32);
    let mut group = c.benchmark_group("synthetic_generation");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, 32), |b| {
            b.iter(|| pool.install(|| generate_split(&model, &config, Split::Train, 0..32, 1).unwrap()))
        });
    }
    group.finish();
}

fn bench_opt(c: &mut Criterion) {
    let model = BodyModel::procedural();
    let config = scene(16);
    let data = generate_target(&model, &config, Split::Train, 1).unwrap();
    let k = config.intrinsics;
    let targets: Vec<Vec<Vec2>> = data
        .observations
        .iter()
        .map(|o| o.keypoints.iter().map(|p| k.to_normalized(p)).collect())
        .collect();
    let prior = PriorTerms {
        gmm: None,
        schedule: PriorSchedule {
            lambda_theta0: 0.0,
            ..Default::default()
        },
        epoch: 0,
        mode: MixtureMode::MinComponent,
    };
    let init = initial_params(&model);
    let fit = FitConfig::default();
    let mut group = c.benchmark_group("per_sample_opt");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, targets.len()), |b| {
            b.iter(|| {
                pool.install(|| {
                    par::map_range(targets.len(), |i| {
                        let cam = NormalizedCamera {
                            scale: 1.0,
                            translation: [0.0, 0.0],
                        };
                        optimize(&model, &init, &cam, &targets[i], &data.observations[i].confidence, &prior, &fit).unwrap()
                    })
                })
            })
        });
    }
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let model = BodyModel::procedural();
    let config = scene(64);
    let data = generate_target(&model, &config, Split::Test, 1).unwrap();
    let k = config.intrinsics;
    // Ground-truth predictions: evaluation cost does not depend on accuracy.
    let preds: Vec<Prediction> = data
        .truth
        .iter()
        .map(|t| Prediction {
            params: t.params.clone(),
            camera: NormalizedCamera::from_placement(&t.placement, &k),
        })
        .collect();
    let mut group = c.benchmark_group("batch_eval");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, preds.len()), |b| {
            b.iter_batched(
                || (),
                |_| pool.install(|| evaluate(&model, &preds, &data.observations, &data.truth, &k).unwrap()),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_generation, bench_opt, bench_eval);
criterion_main!(benches);
