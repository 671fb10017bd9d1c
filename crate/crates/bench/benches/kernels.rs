use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gloam::geom::eig_sym3;
use gloam::odometry::synth;
use gloam::registration::{estimate_covariances_plane, register};
use gloam::training::{tpe_suggest, trial_rng, TrialStatus};
use gloam::{KdTree, MlpWeights, Pose, RegistrationConfig, StudyState, TpeConfig, Trial};
use gloam_bench::*;
use nalgebra::Vector6;
use std::hint::black_box;

fn knn(c: &mut Criterion) {
    let pts3 = random_points::<3>(50_000, 1);
    let pts6 = random_points::<6>(50_000, 2);
    let q3 = random_points::<3>(1000, 3);
    let q6 = random_points::<6>(1000, 4);
    c.bench_function("kdtree3 build 50k", |b| b.iter(|| KdTree::<3>::build(black_box(pts3.clone())).unwrap()));
    let t3 = KdTree::<3>::build(pts3.clone()).unwrap();
    let t6 = KdTree::<6>::build(pts6.clone()).unwrap();
    c.bench_function("kdtree3 1000 queries k=20", |b| {
        b.iter(|| q3.iter().map(|q| t3.knn(q, 20).len()).sum::<usize>())
    });
    c.bench_function("kdtree6 1000 queries k=1", |b| {
        b.iter(|| q6.iter().map(|q| t6.knn(q, 1).len()).sum::<usize>())
    });
}

fn eig(c: &mut Criterion) {
    let mats = random_psd(10_000, 5);
    c.bench_function("eig_sym3 x10k", |b| b.iter(|| mats.iter().filter_map(|m| eig_sym3(black_box(m)).ok()).count()));
    let w = MlpWeights::random(6);
    let xs: Vec<Vector6<f64>> = (0..10_000).map(|i| Vector6::repeat(i as f64 * 1e-4)).collect();
    c.bench_function("mlp forward x10k", |b| b.iter(|| xs.iter().map(|x| w.forward(x).x).sum::<f64>()));
}

fn registration(c: &mut Criterion) {
    let cfg = RegistrationConfig::default();
    let (source, target, _) = scene_pair(5000);
    c.bench_function("plane covariances 5k", |b| {
        b.iter(|| estimate_covariances_plane(black_box(&target), cfg.k, cfg.epsilon).unwrap())
    });
    let gs = estimate_covariances_plane(&source, cfg.k, cfg.epsilon).unwrap();
    let gt = estimate_covariances_plane(&target, cfg.k, cfg.epsilon).unwrap();
    c.bench_function("register plane 5k", |b| b.iter(|| register(&gs, &gt, &Pose::identity(), &cfg).unwrap()));

    let spec = synth::corridor(1, 2, 1.0);
    c.bench_function("synthetic corridor scan", |b| {
        b.iter_batched(|| rng(1), |mut r| synth::sample_scan(&spec, &spec.path[0], &mut r), BatchSize::SmallInput)
    });
}

fn tpe(c: &mut Criterion) {
    let mut r = trial_rng(9, 0);
    let trials: Vec<Trial> = (0..200)
        .map(|i| {
            let params: Vec<f64> = (0..86).map(|_| rand::Rng::random_range(&mut r, -3.0..3.0)).collect();
            let loss = params.iter().map(|v| v * v).sum();
            Trial { trial: i, params, loss, status: TrialStatus::Complete, wall_time: None }
        })
        .collect();
    let state = StudyState { trials };
    let cfg = TpeConfig::default();
    c.bench_function("tpe suggest 86-d, 200 trials", |b| {
        b.iter_batched(|| trial_rng(1, 200), |mut rng| tpe_suggest(&state, 86, &cfg, &mut rng), BatchSize::SmallInput)
    });
}

criterion_group!(benches, knn, eig, registration, tpe);
criterion_main!(benches);
