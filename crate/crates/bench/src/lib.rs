//! Fixtures shared by the criterion benches.

use gloam::odometry::synth;
use gloam::{PointCloud, Pose, SymMat3};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points<const D: usize>(n: usize, seed: u64) -> Vec<[f64; D]> {
    let mut r = rng(seed);
    (0..n).map(|_| std::array::from_fn(|_| r.random_range(-20.0..20.0))).collect()
}

pub fn random_psd(n: usize, seed: u64) -> Vec<SymMat3> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let b = Matrix3::from_fn(|_, _| r.random_range(-1.0..1.0));
            SymMat3::from_matrix(&(b.transpose() * b))
        })
        .collect()
}

/// A structured scene and a copy seen from a slightly moved sensor.
pub fn scene_pair(n_points: usize) -> (PointCloud, PointCloud, Pose) {
    let target = synth::structured_scene(7, n_points);
    let truth = Pose::from_yaw(0.05, Vector3::new(0.3, -0.2, 0.05));
    let source = target.transformed(&truth.inverse());
    (source, target, truth)
}
