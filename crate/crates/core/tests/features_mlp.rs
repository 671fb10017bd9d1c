mod common;

use common::*;
use gloam::features::{
    classical_descriptors, decode_glf, encode_glf, load_external_features, pca_fit, pca_transform,
    write_external_features, RawFeatures,
};
use gloam::mlp::{MlpRole, MlpWeights, PARAM_COUNT};
use gloam::odometry::synth;
use gloam::{PcaModel, PointCloud};
use nalgebra::{DMatrix, Vector3, Vector6};
use proptest::prelude::*;
use rand::Rng;

fn random_raw(rows: usize, cols: usize, seed: u64) -> RawFeatures {
    let mut r = rng(seed);
    RawFeatures::new(rows, cols, (0..rows * cols).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn glf_roundtrip_random_100x32() {
    // values representable in f32 survive exactly
    let mut r = rng(1);
    let data: Vec<f64> = (0..3200).map(|_| (r.random::<f32>() * 10.0 - 5.0) as f64).collect();
    let raw = RawFeatures::new(100, 32, data).unwrap();
    assert_eq!(decode_glf(&encode_glf(&raw)).unwrap(), raw);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.glf");
    write_external_features(&raw, &p).unwrap();
    assert_eq!(load_external_features(&p, 100).unwrap(), raw);
    assert!(load_external_features(&p, 99).is_err());
}

#[test]
fn pca_reconstruction_matches_gram_oracle() {
    let raw = random_raw(500, 32, 2);
    let model = pca_fit(&raw).unwrap();
    let z = pca_transform(&model, &raw).unwrap();

    // reconstruction error of the projected data
    let mut err = 0.0;
    for i in 0..raw.rows() {
        let x = raw.row(i);
        for c in 0..32 {
            let rec = model.mean[c] + (0..6).map(|k| z[i][k] * model.projection[(k, c)]).sum::<f64>();
            err += (x[c] - rec).powi(2);
        }
    }

    // oracle: sum of the 26 smallest eigenvalues of the centered Gram matrix
    let mut x = DMatrix::from_row_slice(500, 32, raw.as_slice());
    let mean: Vec<f64> = (0..32).map(|c| x.column(c).mean()).collect();
    for c in 0..32 {
        for r in 0..500 {
            x[(r, c)] -= mean[c];
        }
    }
    let gram = x.transpose() * &x;
    let mut ev: Vec<f64> = gram.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    let oracle: f64 = ev[..26].iter().sum();
    assert!((err - oracle).abs() <= 1e-6 * oracle, "{err} vs {oracle}");

    let total: f64 = ev.iter().sum();
    for k in 0..6 {
        assert!((model.explained_variance_ratio[k] - ev[31 - k] / total).abs() < 1e-9);
    }
}

#[test]
fn pca_projection_is_orthonormal_and_linear() {
    let raw = random_raw(200, 8, 3);
    let model = pca_fit(&raw).unwrap();
    let ppt = &model.projection * model.projection.transpose();
    assert!((ppt - DMatrix::<f64>::identity(6, 6)).abs().max() < 1e-12);
    let mean: Vec<f64> = model.mean.iter().copied().collect();
    assert!(model.transform_row(&mean).norm() < 1e-12);
    let a = raw.row(0);
    let b = raw.row(1);
    let mix: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
    // affine map: f(2a − 3b) = 2f(a) − 3f(b) − (2 − 3 − 1)·f(0) with f(0) = −P·mean
    let f0 = model.transform_row(&vec![0.0; 8]);
    let lhs = model.transform_row(&mix);
    let rhs = model.transform_row(a) * 2.0 - model.transform_row(b) * 3.0 + f0 * 2.0;
    assert!((lhs - rhs).norm() < 1e-12);
}

#[test]
fn pca_white_and_rank_two() {
    let mut r = rng(4);
    let white: Vec<f64> = (0..6000 * 6).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let m = pca_fit(&RawFeatures::new(6000, 6, white).unwrap()).unwrap();
    for k in 0..6 {
        assert!((m.explained_variance_ratio[k] - 1.0 / 6.0).abs() < 0.02);
    }

    let rows: Vec<Vec<f64>> = (0..300)
        .map(|_| {
            let (s, t) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            (0..10).map(|c| s * c as f64 + t * (c as f64).sin()).collect()
        })
        .collect();
    let m = pca_fit(&RawFeatures::from_rows(&rows).unwrap()).unwrap();
    assert!(m.explained_variance_ratio[0] + m.explained_variance_ratio[1] >= 0.999);
    assert!(m.rank_deficient);
    let ppt = &m.projection * m.projection.transpose();
    assert!((ppt - DMatrix::<f64>::identity(6, 6)).abs().max() < 1e-9);
}

#[test]
fn pca_text_roundtrip() {
    let m = pca_fit(&random_raw(50, 8, 5)).unwrap();
    assert_eq!(PcaModel::from_text(&m.to_text()).unwrap(), m);
}

#[test]
fn synthetic_scene_pca_explains_most_variance() {
    let spec = synth::blocks(3, 3, 1.0);
    let (scans, _) = synth::synth_world(&spec, 3);
    let raw = classical_descriptors(&scans[1], 20).unwrap();
    let m = pca_fit(&raw).unwrap();
    assert!(m.cumulative_ratio() >= 0.8, "{}", m.cumulative_ratio());
}

#[test]
fn ball_interior_is_spherical() {
    let mut r = rng(6);
    let mut pts = Vec::new();
    while pts.len() < 500 {
        let p = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        if p.norm() <= 1.0 {
            pts.push(p);
        }
    }
    let cloud = PointCloud::new(pts.clone());
    let raw = classical_descriptors(&cloud, 20).unwrap();
    let arr: Vec<[f64; 3]> = pts.iter().map(|p| [p.x, p.y, p.z]).collect();
    for (i, p) in pts.iter().enumerate().filter(|(_, p)| p.norm() < 0.6) {
        let idx: Vec<usize> = brute_knn(&arr, &[p.x, p.y, p.z], 20).iter().map(|n| n.0).collect();
        let (vals, _) = jacobi_eigen(&covariance_of(&arr, &idx));
        let oracle = vals[0] / vals[2];
        assert!((raw.row(i)[2] - oracle).abs() < 1e-9);
        assert!(oracle > 0.3 || raw.row(i)[2] > 0.0);
    }
    let interior: Vec<f64> =
        pts.iter().enumerate().filter(|(_, p)| p.norm() < 0.6).map(|(i, _)| raw.row(i)[2]).collect();
    let mean = interior.iter().sum::<f64>() / interior.len() as f64;
    assert!(mean > 0.3, "{mean}");
}

#[test]
fn descriptors_are_rotation_invariant_except_height() {
    let mut spec = synth::blocks(5, 1, 1.0);
    spec.range_noise = 0.01;
    let (scans, _) = synth::synth_world(&spec, 5);
    let cloud = &scans[0];
    let rot = gloam::geom::so3_exp(&(Vector3::new(0.3, -0.5, 0.8).normalize() * 0.9));
    let rotated = PointCloud::new(cloud.positions.iter().map(|p| rot * p).collect());
    let a = classical_descriptors(cloud, 20).unwrap();
    let b = classical_descriptors(&rotated, 20).unwrap();

    // points whose 20th and 21st neighbors are nearly equidistant have an
    // ambiguous neighborhood; rounding under rotation may pick either
    let arr: Vec<[f64; 3]> = cloud.positions.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = gloam::KdTree3::build(arr.clone()).unwrap();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (i, p) in arr.iter().enumerate() {
        let nn = tree.knn(p, 21);
        if nn[20].dist_sq - nn[19].dist_sq <= 1e-9 * nn[20].dist_sq {
            continue;
        }
        checked += 1;
        for c in 0..7 {
            worst = worst.max((a.row(i)[c] - b.row(i)[c]).abs());
        }
    }
    assert!(checked * 10 >= arr.len() * 9, "{checked} of {}", arr.len());
    assert!(worst < 1e-6, "{worst}");
    // the height channel does move, but stays within [0, 1]
    assert!((0..b.rows()).all(|i| (0.0..=1.0).contains(&b.row(i)[7])));
}

#[test]
fn mlp_matches_dense_oracle() {
    let mut r = rng(7);
    for seed in 0..500 {
        let w = MlpWeights::random(seed);
        for _ in 0..10 {
            let x: [f64; 6] = std::array::from_fn(|_| r.random_range(-3.0..3.0));
            let ours = w.forward(&Vector6::from(x));
            let oracle = dense_mlp(w.as_slice(), &x);
            for k in 0..3 {
                assert!((ours[k] - oracle[k]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn random_weights_are_centered() {
    let draws: Vec<f64> =
        (0..2400u64).flat_map(|s| MlpWeights::random(s).as_slice().to_vec()).collect();
    assert!(draws.len() >= 100_000);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(mean.abs() < 0.01, "{mean}");
}

#[test]
fn mlp_is_lipschitz() {
    let mut r = rng(8);
    for seed in 0..200 {
        let w = MlpWeights::random(seed);
        let (w1, _) = w.layer1();
        let (w2, _) = w.layer2();
        let bound = w1.svd(false, false).singular_values.max() * w2.svd(false, false).singular_values.max();
        let x = Vector6::from_fn(|_, _| r.random_range(-3.0..3.0));
        let y = Vector6::from_fn(|_, _| r.random_range(-3.0..3.0));
        let dy = (w.forward(&x) - w.forward(&y)).norm();
        assert!(dy <= bound * (x - y).norm() * (1.0 + 1e-12));
    }
}

proptest! {
    #[test]
    fn mlp_text_roundtrip(p in prop::collection::vec(-1e3..1e3f64, PARAM_COUNT)) {
        let w = MlpWeights::from_slice(&p).unwrap();
        let (role, back) = MlpWeights::from_text(&w.to_text(MlpRole::Conversion)).unwrap();
        prop_assert_eq!(role, MlpRole::Conversion);
        prop_assert_eq!(back, w);
    }

    #[test]
    fn mlp_is_linear_within_an_activation_region(seed in 0u64..1000, x in prop::array::uniform6(-2.0..2.0f64)) {
        let w = MlpWeights::random(seed);
        let (w1, b1) = w.layer1();
        let x = Vector6::from(x);
        let pattern = |v: &Vector6<f64>| (w1 * v + b1).map(|h| h > 0.0);
        // a short segment through x that keeps the same activation pattern
        let dir = Vector6::new(0.3, -0.1, 0.2, 0.05, -0.4, 0.1);
        let (a, b) = (x - dir * 1e-3, x + dir * 1e-3);
        prop_assume!(pattern(&a) == pattern(&b) && pattern(&a) == pattern(&x));
        let mid = w.forward(&((a + b) * 0.5));
        let interp = (w.forward(&a) + w.forward(&b)) * 0.5;
        prop_assert!((mid - interp).norm() < 1e-12);
    }
}
