mod common;

use common::*;
use gloam::eval::{
    change_frame, format_kitti_poses, parse_kitti_calib, parse_kitti_poses, read_kitti_poses, rte, rte_loss, rte_loss_with, rte_with, write_kitti_poses,
    EvalError, KITTI_LENGTHS,
};
use gloam::geom::se3_exp;
use gloam::{Pose, RteConfig, Trajectory, Twist};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;

fn straight(n: usize, step: f64) -> Trajectory {
    Trajectory::from_poses((0..n).map(|i| Pose::from_translation(Vector3::new(i as f64 * step, 0.0, 0.0))).collect())
}

/// Poses accumulated from a constant body-frame increment.
fn integrate(n: usize, step: &Pose) -> Trajectory {
    let mut p = Pose::identity();
    let mut out = vec![p];
    for _ in 1..n {
        p = p.compose(step);
        out.push(p);
    }
    Trajectory::from_poses(out)
}

fn wobbly(n: usize, seed: u64) -> Trajectory {
    let mut r = rng(seed);
    let mut p = Pose::identity();
    let mut out = vec![p];
    for _ in 1..n {
        let xi = Twist::new(
            Vector3::new(r.random_range(-0.01..0.01), r.random_range(-0.01..0.01), r.random_range(-0.05..0.05)),
            Vector3::new(r.random_range(0.8..1.2), r.random_range(-0.05..0.05), r.random_range(-0.02..0.02)),
        );
        p = p.compose(&se3_exp(&xi));
        out.push(p);
    }
    Trajectory::from_poses(out)
}

#[test]
fn identical_trajectories_have_zero_error() {
    let gt = wobbly(900, 1);
    let r = rte(&gt, &gt).unwrap();
    assert_eq!((r.t_rte, r.r_rte), (0.0, 0.0));
    assert!(r.per_length.iter().all(|l| l.windows > 0 && l.translational == 0.0));
    assert_eq!(rte_loss(&gt, &gt).unwrap(), 0.0);
}

#[test]
fn one_percent_scale_drift() {
    let gt = straight(1000, 1.0);
    let est = straight(1000, 1.01);
    let r = rte(&gt, &est).unwrap();
    for l in &r.per_length {
        assert!((l.translational - 1.0).abs() < 1e-6, "{} m: {}", l.length, l.translational);
        assert_eq!(l.rotational, 0.0);
    }
    assert!((r.t_rte - 1.0).abs() < 1e-6);
}

#[test]
fn yaw_rate_bias() {
    let gt = straight(1000, 1.0);
    let est = integrate(1000, &Pose::from_yaw(0.01f64.to_radians(), Vector3::x()));
    let r = rte(&gt, &est).unwrap();
    for l in &r.per_length {
        assert!((l.rotational - 0.01).abs() < 1e-6, "{} m: {}", l.length, l.rotational);
    }
    assert!((r.r_rte - 0.01).abs() < 1e-6);
}

#[test]
fn single_length_loss_by_hand() {
    // 11 frames at 1 m; estimate stretched 10%: every 5 m window is off by 0.5 m
    let gt = straight(11, 1.0);
    let est = straight(11, 1.1);
    let cfg = RteConfig { lengths: vec![5.0], stride: 1 };
    let loss = rte_loss_with(&gt, &est, &cfg).unwrap();
    assert!((loss - 0.5).abs() < 1e-12);
    let r = rte_with(&gt, &est, &cfg).unwrap();
    assert_eq!(r.per_length[0].windows, 6);
}

#[test]
fn doubling_drift_doubles_loss() {
    let gt = straight(1000, 1.0);
    let a = rte_loss(&gt, &straight(1000, 1.01)).unwrap();
    let b = rte_loss(&gt, &straight(1000, 1.02)).unwrap();
    assert!((b - 2.0 * a).abs() < 1e-9 * b);
}

#[test]
fn too_short_and_mismatched() {
    let gt = straight(50, 1.0);
    let r = rte(&gt, &gt).unwrap();
    assert!(r.too_short && r.windows == 0);
    assert!(matches!(rte_loss(&gt, &gt), Err(EvalError::TooShort)));
    assert!(matches!(rte(&gt, &straight(49, 1.0)), Err(EvalError::LengthMismatch { .. })));
}

#[test]
fn eight_lengths_by_default() {
    assert_eq!(KITTI_LENGTHS, [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0]);
}

#[test]
fn reparameterized_path_has_same_translational_error() {
    // the same geometric path sampled at 1 m and at 0.5 m per frame, with the
    // same relative 1% stretch; windows are picked by distance, so both agree
    let a = rte(&straight(1000, 1.0), &straight(1000, 1.01)).unwrap();
    let b = rte(&straight(1999, 0.5), &straight(1999, 0.505)).unwrap();
    for (x, y) in a.per_length.iter().zip(&b.per_length) {
        assert!((x.translational - y.translational).abs() < 1e-9);
    }
}

#[test]
fn pose_file_roundtrip_and_errors() {
    let t = wobbly(30, 2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("poses.txt");
    write_kitti_poses(&t, &p).unwrap();
    let back = read_kitti_poses(&p).unwrap();
    for (a, b) in t.poses().iter().zip(back.poses()) {
        assert!((a.to_homogeneous() - b.to_homogeneous()).abs().max() < 1e-12);
    }
    let text = format_kitti_poses(&t);
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "1 0 0 0 0 1 0 0 0 0 1";
    match parse_kitti_poses(&lines.join("\n")) {
        Err(EvalError::FieldCount { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn calibration_entry_and_frame_change() {
    let text = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 0 -1 0 0.1 0 0 -1 -0.2 1 0 0 -0.3\n";
    let tr = parse_kitti_calib(text).unwrap();
    // velodyne x (forward) is camera z
    assert!((tr.rotation * Vector3::x() - Vector3::z()).norm() < 1e-15);
    assert_eq!(tr.translation, Vector3::new(0.1, -0.2, -0.3));
    assert!(matches!(parse_kitti_calib("P0: 1 2 3"), Err(EvalError::MissingCalib)));
    assert!(matches!(parse_kitti_calib("Tr: 1 0 0"), Err(EvalError::FieldCount { line: 1, found: 3 })));

    let lidar = straight(20, 1.0);
    let cam = change_frame(&lidar, &tr);
    // forward lidar motion appears as forward camera motion
    assert!((cam.poses()[19].translation - Vector3::new(0.0, 0.0, 19.0)).norm() < 1e-12);
    let back = change_frame(&cam, &tr.inverse());
    for (a, b) in back.poses().iter().zip(lidar.poses()) {
        assert!((a.to_homogeneous() - b.to_homogeneous()).abs().max() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn common_left_transform_cancels(seed in 0u64..1000, yaw in -3.0..3.0f64, tx in -50.0..50.0f64) {
        let gt = wobbly(300, seed);
        let est = wobbly(300, seed + 1);
        let g = Pose::from_yaw(yaw, Vector3::new(tx, 2.0, -1.0));
        let shift = |t: &Trajectory| Trajectory::from_poses(t.poses().iter().map(|p| g.compose(p)).collect());
        let cfg = RteConfig { lengths: vec![50.0, 100.0, 200.0], stride: 3 };
        let a = rte_with(&gt, &est, &cfg).unwrap();
        let b = rte_with(&shift(&gt), &shift(&est), &cfg).unwrap();
        prop_assert!((a.t_rte - b.t_rte).abs() < 1e-9);
        prop_assert!((a.r_rte - b.r_rte).abs() < 1e-9);
        prop_assert!(a.t_rte >= 0.0 && a.r_rte >= 0.0);
    }
}
