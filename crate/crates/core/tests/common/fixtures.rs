//! Fixture builders shared by the integration tests. Unlike the oracles in
//! the parent module these construct library types.

use gloam::registration::Correspondence;
use gloam::{GaussianCloud, PointCloud, Pose, SymMat3};
use nalgebra::Vector3;
use rand::Rng;

use super::*;

pub fn random_cloud(n: usize, seed: u64, extent: f64) -> PointCloud {
    let mut r = rng(seed);
    PointCloud::new(
        (0..n)
            .map(|_| Vector3::new(r.random_range(-extent..extent), r.random_range(-extent..extent), r.random_range(-1.0..1.0)))
            .collect(),
    )
}

pub fn random_pose(r: &mut impl Rng, max_angle: f64, max_trans: f64) -> Pose {
    let rot = from_m3(&random_rotation(r, max_angle));
    let t = loop {
        let t = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        if t.norm() <= 1.0 {
            break t * max_trans;
        }
    };
    Pose::new(gloam::geom::nearest_rotation(&rot), t)
}

pub fn random_psd(r: &mut impl Rng) -> SymMat3 {
    let b = nalgebra::Matrix3::from_fn(|_, _| r.random_range(-1.0..1.0));
    SymMat3::from_matrix(&(b.transpose() * b + nalgebra::Matrix3::identity() * 1e-3))
}

/// Eigenvalue path written out step by step: forward pass, ascending sort,
/// floor at ε, L2 normalization, recombination with the eigenvectors.
pub fn reference_learned_cov(vecs: &M3, feature: &[f64; 6], params: &[f64], eps: f64) -> (M3, [f64; 3]) {
    let mut e = dense_mlp(params, feature);
    e.sort_by(f64::total_cmp);
    for v in e.iter_mut() {
        if *v <= eps {
            *v = eps;
        }
    }
    let norm = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
    let e = e.map(|v| v / norm);
    (rebuild(vecs, &e), e)
}

/// Plane-to-plane GICP written from scratch: brute-force neighborhoods,
/// Jacobi eigenvectors, `(ε, 1, 1)` shape, explicit inverse.
pub fn textbook_plane_covs(pts: &[[f64; 3]], k: usize, eps: f64) -> Vec<M3> {
    pts.iter()
        .map(|p| {
            let idx: Vec<usize> = brute_knn(pts, p, k).iter().map(|n| n.0).collect();
            let (_, vecs) = jacobi_eigen(&covariance_of(pts, &idx));
            rebuild(&vecs, &[eps, 1.0, 1.0])
        })
        .collect()
}

/// Random clouds and covariances with a fixed scrambled pairing.
pub fn gaussian_pair(seed: u64) -> (GaussianCloud, GaussianCloud, Vec<Correspondence>, Pose) {
    let mut r = rng(seed);
    let src = random_cloud(60, seed, 3.0);
    let tgt = random_cloud(60, seed + 1000, 3.0);
    let covs_a = (0..60).map(|_| random_psd(&mut r)).collect();
    let covs_b = (0..60).map(|_| random_psd(&mut r)).collect();
    let corr = (0..60).map(|i| Correspondence { source: i, target: (i * 7) % 60, dist_sq: 0.0 }).collect();
    let pose = random_pose(&mut r, 0.5, 1.0);
    (GaussianCloud::new(src, covs_a), GaussianCloud::new(tgt, covs_b), corr, pose)
}
