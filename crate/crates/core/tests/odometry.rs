mod common;

use common::*;
use gloam::geom::se3_exp;
use gloam::odometry::synth::{self, Lidar, Surface, WorldSpec};
use gloam::odometry::{constant_velocity_prior, endpoint_error, path_length, run_sequence};
use gloam::{MlpPair, OdometryConfig, Pose, Trajectory, Twist};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn identical_scans_give_identity_trajectory() {
    let spec = synth::blocks(2, 1, 1.0);
    let (scans, _) = synth::synth_world(&spec, 2);
    let same = vec![scans[0].clone(); 4];
    let run = run_sequence(&same, None, &MlpPair::default(), &OdometryConfig::default()).unwrap();
    assert_eq!(run.trajectory.len(), 4);
    for p in run.trajectory.poses() {
        assert!(p.translation.norm() < 1e-9 && p.rotation_angle() < 1e-9, "{p:?}");
    }
}

#[test]
fn straight_path_plane_mode_drifts_under_one_percent() {
    let mut spec = synth::blocks(1, 50, 0.5);
    spec.path = (0..50).map(|i| Pose::from_translation(Vector3::new(i as f64 * 0.5, 0.0, 1.8))).collect();
    spec.lidar = Lidar { channels: 64, azimuth_steps: 1024, random_phase: true, ..Lidar::default() };
    let (scans, gt) = synth::synth_world(&spec, 1);
    let mut cfg = OdometryConfig::default();
    cfg.registration.k = 20;
    let run = run_sequence(&scans, None, &MlpPair::default(), &cfg).unwrap();
    let rel = endpoint_error(&gt, &run.trajectory) / path_length(&gt);
    assert!((path_length(&gt) - 24.5).abs() < 1e-12);
    assert!(rel < 0.01, "endpoint error {:.3}% of path", 100.0 * rel);
}

#[test]
fn constant_velocity_prior_closed_form() {
    assert_eq!(constant_velocity_prior(&Trajectory::new()), Pose::identity());
    let still = Trajectory::from_poses(vec![Pose::identity(); 3]);
    assert_eq!(constant_velocity_prior(&still), Pose::identity());

    let step = se3_exp(&Twist::new(Vector3::new(0.01, -0.02, 0.05), Vector3::new(1.0, 0.1, -0.05)));
    let mut poses = vec![Pose::from_yaw(0.3, Vector3::new(5.0, -2.0, 1.0))];
    for _ in 0..6 {
        poses.push(poses.last().unwrap().compose(&step));
    }
    let next = poses.pop().unwrap();
    let pred = constant_velocity_prior(&Trajectory::from_poses(poses));
    assert!((pred.to_homogeneous() - next.to_homogeneous()).abs().max() < 1e-12);
}

fn corridor_run() -> (gloam::odometry::SequenceRun, OdometryConfig, Vec<gloam::PointCloud>) {
    let mut spec = synth::corridor(4, 12, 1.0);
    spec.range_noise = 0.02;
    let (scans, _) = synth::synth_world(&spec, 4);
    let cfg = corridor_odometry(true);
    let run = run_sequence(&scans, None, &MlpPair::random(17), &cfg).unwrap();
    (run, cfg, scans)
}

#[test]
fn trajectory_is_the_fold_of_relatives() {
    let (run, _, _) = corridor_run();
    let mut acc = Pose::identity();
    assert_eq!(run.trajectory.poses()[0], acc);
    for (k, rel) in run.relatives.iter().enumerate() {
        acc = acc.compose(rel);
        let world = run.trajectory.poses()[k + 1];
        assert!((acc.to_homogeneous() - world.to_homogeneous()).abs().max() < 1e-12);
    }
    for (a, b) in run.trajectory.relatives().iter().zip(&run.relatives) {
        assert!((a.to_homogeneous() - b.to_homogeneous()).abs().max() < 1e-12);
    }
    assert_eq!(run.trajectory.frames(), (0..12).collect::<Vec<_>>().as_slice());
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let (run, cfg, scans) = corridor_run();
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let again = pool.install(|| run_sequence(&scans, None, &MlpPair::random(17), &cfg).unwrap());
        assert_eq!(again.trajectory, run.trajectory, "{threads} threads");
        assert_eq!(
            again.diagnostics.iter().map(|d| d.cost.to_bits()).collect::<Vec<_>>(),
            run.diagnostics.iter().map(|d| d.cost.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn ground_returns_match_analytic_count() {
    let h = 1.8;
    let lidar = Lidar::default();
    let spec = WorldSpec {
        surfaces: vec![Surface::ground(0.0)],
        lidar: lidar.clone(),
        path: vec![Pose::from_translation(Vector3::new(0.0, 0.0, h))],
        range_noise: 0.0,
    };
    let (scans, _) = synth::synth_world(&spec, 0);
    // a ray at elevation e < 0 meets the ground at range h / sin(−e)
    let channels = lidar
        .elevations()
        .iter()
        .filter(|&&e| e < 0.0)
        .map(|&e| h / (-e).sin())
        .filter(|&r| r >= lidar.min_range && r <= lidar.max_range)
        .count();
    assert_eq!(scans[0].len(), channels * lidar.azimuth_steps);
}

#[test]
fn pole_returns_match_visible_angle() {
    // a tall pole at distance d subtends 2·asin(r/d) of azimuth for every channel
    let (d, radius) = (10.0, 0.3);
    let lidar = Lidar { random_phase: true, ..Lidar::default() };
    let spec = WorldSpec {
        surfaces: vec![Surface::Pole { x: d, y: 0.0, radius, z_min: -50.0, z_max: 50.0 }],
        lidar: lidar.clone(),
        path: vec![Pose::identity()],
        range_noise: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scans = 400;
    let total: usize = (0..scans).map(|_| synth::sample_scan(&spec, &Pose::identity(), &mut rng).len()).sum();
    let mean = total as f64 / scans as f64;
    let expected = lidar.channels as f64 * lidar.azimuth_steps as f64 * 2.0 * (radius / d).asin() / std::f64::consts::TAU;
    assert!((mean - expected).abs() <= 0.05 * expected, "{mean} vs {expected}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prior_replays_last_step(a in prop::array::uniform6(-0.5..0.5f64), b in prop::array::uniform6(-0.5..0.5f64)) {
        let t0 = se3_exp(&Twist::from_vector(&a.into()));
        let step = se3_exp(&Twist::from_vector(&b.into()));
        let t1 = t0.compose(&step);
        let pred = constant_velocity_prior(&Trajectory::from_poses(vec![Pose::identity(), t0, t1]));
        let oracle = from_m3(&matmul3(&to_m3(&t1.rotation), &to_m3(&step.rotation)));
        prop_assert!((pred.rotation - oracle).abs().max() < 1e-12);
        let tr = t1.rotation * step.translation + t1.translation;
        prop_assert!((pred.translation - tr).norm() < 1e-12);
    }
}
