//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code.
#![allow(dead_code)]

use gloam::odometry::synth;
use gloam::{AssociationMode, CovarianceMode, OdometryConfig, RteConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod fixtures;

pub type M3 = [[f64; 3]; 3];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matmul3(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

pub fn transpose3(a: &M3) -> M3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn matvec3(a: &M3, v: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn add3(a: &M3, b: &M3) -> M3 {
    let mut c = *a;
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] += b[i][j];
        }
    }
    c
}

/// Cofactor inverse.
pub fn inverse3(m: &M3) -> M3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * c(1, 2, 1, 2) - m[0][1] * c(1, 2, 0, 2) + m[0][2] * c(1, 2, 0, 1);
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    adj.map(|row| row.map(|v| v / det))
}

pub fn quad3(m: &M3, d: &[f64; 3]) -> f64 {
    let md = matvec3(m, d);
    d[0] * md[0] + d[1] * md[1] + d[2] * md[2]
}

/// Cyclic Jacobi eigen solver. Values ascending; column `i` of the
/// returned matrix is the eigenvector of value `i`.
pub fn jacobi_eigen(a: &M3) -> ([f64; 3], M3) {
    let mut a = *a;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..100 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let scale = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2);
        if off <= 1e-34 * scale.max(1e-300) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A ← Jᵀ A J with J the rotation in the (p, q) plane
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let (vkp, vkq) = (v[k][p], v[k][q]);
                v[k][p] = c * vkp - s * vkq;
                v[k][q] = s * vkp + c * vkq;
            }
        }
    }
    let mut idx = [0, 1, 2];
    idx.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let vals = idx.map(|i| a[i][i]);
    let mut vecs = [[0.0; 3]; 3];
    for (col, &i) in idx.iter().enumerate() {
        for r in 0..3 {
            vecs[r][col] = v[r][i];
        }
    }
    (vals, vecs)
}

/// `V·diag(e)·Vᵀ`.
pub fn rebuild(vecs: &M3, e: &[f64; 3]) -> M3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                m[i][j] += vecs[i][k] * e[k] * vecs[j][k];
            }
        }
    }
    m
}

pub fn frob(a: &M3) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn sub3(a: &M3, b: &M3) -> M3 {
    let mut c = *a;
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] -= b[i][j];
        }
    }
    c
}

/// Exhaustive k-NN ordered by (distance, index).
pub fn brute_knn<const D: usize>(pts: &[[f64; D]], q: &[f64; D], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Biased sample covariance of the listed points.
pub fn covariance_of(pts: &[[f64; 3]], idx: &[usize]) -> M3 {
    let n = idx.len() as f64;
    let mut mean = [0.0; 3];
    for &i in idx {
        for a in 0..3 {
            mean[a] += pts[i][a] / n;
        }
    }
    let mut c = [[0.0; 3]; 3];
    for &i in idx {
        for a in 0..3 {
            for b in 0..3 {
                c[a][b] += (pts[i][a] - mean[a]) * (pts[i][b] - mean[b]) / n;
            }
        }
    }
    c
}

/// Dense forward pass of a 6→4→3 network built from explicit matrices.
pub fn dense_mlp(params: &[f64], x: &[f64; 6]) -> [f64; 3] {
    let w1: Vec<Vec<f64>> = (0..4).map(|r| params[r * 6..r * 6 + 6].to_vec()).collect();
    let b1 = &params[24..28];
    let w2: Vec<Vec<f64>> = (0..3).map(|r| params[28 + r * 4..28 + r * 4 + 4].to_vec()).collect();
    let b2 = &params[40..43];
    let h: Vec<f64> = (0..4)
        .map(|r| (w1[r].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b1[r]).max(0.0))
        .collect();
    [0, 1, 2].map(|r| w2[r].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + b2[r])
}

pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> M3 {
    let axis = loop {
        let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64)];
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            break a.map(|v| v / n);
        }
    };
    let th = rng.random_range(0.0..=max_angle);
    rodrigues(&axis, th)
}

pub fn rodrigues(axis: &[f64; 3], th: f64) -> M3 {
    let (s, c) = th.sin_cos();
    let [x, y, z] = *axis;
    let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let k2 = matmul3(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + s * k[i][j] + (1.0 - c) * k2[i][j];
        }
    }
    r
}

pub fn to_m3(m: &nalgebra::Matrix3<f64>) -> M3 {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)]))
}

pub fn from_m3(m: &M3) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::from_fn(|i, j| m[i][j])
}

/// Lengths used to score the short synthetic sequences (60 m paths cannot
/// hold the 100–800 m KITTI windows).
pub fn synthetic_rte() -> RteConfig {
    RteConfig { lengths: vec![10.0, 20.0, 30.0, 40.0, 50.0], stride: 1 }
}

/// Sparse 16-beam corridor configuration used for training experiments.
pub fn corridor_odometry(learned: bool) -> OdometryConfig {
    let mut cfg = OdometryConfig { voxel_leaf: 0.5, descriptor_k: 10, ..OdometryConfig::default() };
    cfg.registration.k = 10;
    if learned {
        cfg.registration.association = AssociationMode::FeatureExtended;
        cfg.registration.covariance = CovarianceMode::Learned;
    }
    cfg
}

/// One corridor sequence: 60 frames, 1 m apart, 2 cm range noise.
pub fn corridor_sequence(seed: u64) -> (Vec<gloam::PointCloud>, gloam::Trajectory) {
    let mut spec = synth::corridor(seed, 60, 1.0);
    spec.range_noise = 0.02;
    synth::synth_world(&spec, seed)
}
