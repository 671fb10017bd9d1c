//! Sequence-level scan-to-scan odometry.
//!
//! Each scan is range-gated, voxel-downsampled and turned into local
//! neighborhood eigendecompositions plus (when a feature-driven mode is
//! active) six-dimensional PCA features. That preparation does not depend
//! on the network weights, so it is done once and reused by every
//! evaluation of the same sequence.

pub mod synth;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{voxel_downsample_indexed, CloudError, PointCloud, RangeGate};
use crate::features::{
    classical_descriptors_with, neighborhood_eigen, pca_fit_subsampled, pca_transform, FeatureError,
    FeatureSet, PcaModel, RawFeatures, DEFAULT_DESCRIPTOR_K, DEFAULT_PCA_MAX_ROWS,
};
use crate::geom::{EigenDecomp3, Pose};
use crate::knn::KdTree3;
use crate::mlp::MlpPair;
use crate::registration::{
    learned_covariances, plane_covariances, register, AssociationMode, CovarianceMode, GaussianCloud,
    RegistrationConfig, RegistrationError,
};

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("a sequence needs at least two scans, got {0}")]
    TooFewScans(usize),
    #[error("frame {frame}: {source}")]
    Cloud { frame: usize, source: CloudError },
    #[error("frame {frame}: {source}")]
    Feature { frame: usize, source: FeatureError },
    #[error("frame {frame}: {source}")]
    Registration { frame: usize, source: RegistrationError },
    #[error("frame {frame} has {points} points after preprocessing, fewer than k = {k}")]
    SparseFrame { frame: usize, points: usize, k: usize },
    #[error("external features supplied for {found} scans, expected {expected}")]
    ExternalCount { expected: usize, found: usize },
    #[error("frame {frame}: {count} consecutive registration failures")]
    TooManyFailures { frame: usize, count: usize },
    #[error("frame indices must be strictly increasing ({prev} then {next})")]
    FrameOrder { prev: usize, next: usize },
}

/// World poses (frame 0 as origin) keyed by strictly increasing frame index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    frames: Vec<usize>,
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_poses(poses: Vec<Pose>) -> Self {
        Self { frames: (0..poses.len()).collect(), poses }
    }

    pub fn push(&mut self, frame: usize, pose: Pose) -> Result<(), OdometryError> {
        if let Some(&prev) = self.frames.last() {
            if frame <= prev {
                return Err(OdometryError::FrameOrder { prev, next: frame });
            }
        }
        self.frames.push(frame);
        self.poses.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn last(&self) -> Option<&Pose> {
        self.poses.last()
    }

    /// `T_{k-1}⁻¹·T_k` for every consecutive pair.
    pub fn relatives(&self) -> Vec<Pose> {
        self.poses.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
    }

    /// Left-fold of relative poses starting at the identity.
    pub fn from_relatives(relatives: &[Pose]) -> Self {
        let mut poses = Vec::with_capacity(relatives.len() + 1);
        poses.push(Pose::identity());
        for r in relatives {
            let next = poses.last().unwrap().compose(r);
            poses.push(next);
        }
        Self::from_poses(poses)
    }

    /// Re-expresses every pose relative to the first one.
    pub fn rebased(&self) -> Trajectory {
        let Some(first) = self.poses.first() else { return self.clone() };
        let inv = first.inverse();
        Trajectory {
            frames: self.frames.clone(),
            poses: self.poses.iter().map(|p| inv.compose(p)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MotionPrior {
    Identity,
    #[default]
    ConstantVelocity,
}

/// Predicted next world pose: the last relative motion replayed,
/// `T_{k-1}·(T_{k-2}⁻¹·T_{k-1})`. Identity with fewer than two poses.
pub fn constant_velocity_prior(traj: &Trajectory) -> Pose {
    match traj.poses() {
        [.., a, b] => b.compose(&a.inverse().compose(b)),
        _ => Pose::identity(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryConfig {
    pub registration: RegistrationConfig,
    pub voxel_leaf: f64,
    pub range: RangeGate,
    pub descriptor_k: usize,
    pub pca_max_rows: usize,
    pub motion_prior: MotionPrior,
    pub max_consecutive_failures: usize,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            voxel_leaf: 0.25,
            range: RangeGate::default(),
            descriptor_k: DEFAULT_DESCRIPTOR_K,
            pca_max_rows: DEFAULT_PCA_MAX_ROWS,
            motion_prior: MotionPrior::ConstantVelocity,
            max_consecutive_failures: 3,
        }
    }
}

impl OdometryConfig {
    pub fn needs_features(&self) -> bool {
        self.registration.association == AssociationMode::FeatureExtended
            || self.registration.covariance == CovarianceMode::Learned
    }
}

/// Weight-independent per-frame data.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub cloud: PointCloud,
    pub eigen: Vec<Option<EigenDecomp3>>,
    pub features: Option<FeatureSet>,
    pub raw: Option<RawFeatures>,
    tree: KdTree3,
}

impl PreparedFrame {
    /// Regularized covariances and (if needed) converted features for one
    /// set of weights.
    pub fn gaussian(&self, weights: &MlpPair, cfg: &RegistrationConfig) -> Result<GaussianCloud, RegistrationError> {
        let (covs, degenerate) = match cfg.covariance {
            CovarianceMode::Plane => plane_covariances(&self.eigen, cfg.epsilon),
            CovarianceMode::Learned => {
                let f = self.features.as_ref().ok_or(RegistrationError::MissingAssociationFeatures)?;
                learned_covariances(&self.eigen, f, &weights.eigenvalue, cfg.epsilon)
            }
        };
        let mut g = GaussianCloud::new(self.cloud.clone(), covs);
        g.degenerate = degenerate;
        g.set_position_tree(self.tree.clone());
        if cfg.association == AssociationMode::FeatureExtended {
            let f = self.features.as_ref().ok_or(RegistrationError::MissingAssociationFeatures)?;
            g = g.with_conversion(f, &weights.conversion)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone)]
pub struct PreparedSequence {
    pub frames: Vec<PreparedFrame>,
    pub pca: Option<PcaModel>,
}

/// Range gate + voxel grid; external features (if any) are averaged per voxel.
pub fn preprocess(
    scan: &PointCloud,
    external: Option<&RawFeatures>,
    cfg: &OdometryConfig,
) -> Result<(PointCloud, Option<RawFeatures>), CloudError> {
    let keep: Vec<usize> = (0..scan.len())
        .filter(|&i| {
            let r = scan.positions[i].norm();
            r >= cfg.range.min && r <= cfg.range.max
        })
        .collect();
    let gated = scan.select(&keep);
    let ds = voxel_downsample_indexed(&gated, cfg.voxel_leaf)?;
    let raw = external.map(|f| f.select(&keep).aggregate(&ds.assignment, ds.cloud.len()));
    Ok((ds.cloud, raw))
}

/// Runs every weight-independent step for a whole sequence. The PCA model
/// is fit once over a uniform subsample of all frames unless `pca` is given.
pub fn prepare_sequence(
    scans: &[PointCloud],
    external: Option<&[RawFeatures]>,
    pca: Option<PcaModel>,
    cfg: &OdometryConfig,
) -> Result<PreparedSequence, OdometryError> {
    if let Some(ext) = external {
        if ext.len() != scans.len() {
            return Err(OdometryError::ExternalCount { expected: scans.len(), found: ext.len() });
        }
    }
    let want_features = cfg.needs_features();
    let k = cfg.registration.k;
    let frames: Vec<PreparedFrame> = scans
        .par_iter()
        .enumerate()
        .map(|(frame, scan)| {
            let ext = external.map(|e| {
                if e[frame].rows() != scan.len() {
                    return Err(OdometryError::Feature {
                        frame,
                        source: FeatureError::RowMismatch { expected: scan.len(), found: e[frame].rows() },
                    });
                }
                Ok(&e[frame])
            });
            let ext = ext.transpose()?;
            let (cloud, ext_raw) =
                preprocess(scan, ext, cfg).map_err(|source| OdometryError::Cloud { frame, source })?;
            if cloud.len() < k.max(cfg.descriptor_k) {
                return Err(OdometryError::SparseFrame { frame, points: cloud.len(), k: k.max(cfg.descriptor_k) });
            }
            let tree = KdTree3::from_positions(&cloud.positions)
                .map_err(|e| OdometryError::Registration { frame, source: e.into() })?;
            let eigen = neighborhood_eigen(&cloud, &tree, k);
            let raw = if !want_features {
                None
            } else if let Some(r) = ext_raw {
                Some(r)
            } else if cfg.descriptor_k == k {
                Some(classical_descriptors_with(&cloud, &eigen))
            } else {
                let e = neighborhood_eigen(&cloud, &tree, cfg.descriptor_k);
                Some(classical_descriptors_with(&cloud, &e))
            };
            Ok(PreparedFrame { cloud, eigen, features: None, raw, tree })
        })
        .collect::<Result<_, OdometryError>>()?;

    let mut seq = PreparedSequence { frames, pca: None };
    if want_features {
        let model = match pca {
            Some(m) => m,
            None => {
                let parts: Vec<RawFeatures> =
                    seq.frames.iter().filter_map(|f| f.raw.clone()).collect();
                let all = RawFeatures::vstack(&parts).expect("uniform descriptor width");
                pca_fit_subsampled(&all, cfg.pca_max_rows)
                    .map_err(|source| OdometryError::Feature { frame: 0, source })?
            }
        };
        for (frame, f) in seq.frames.iter_mut().enumerate() {
            let raw = f.raw.as_ref().expect("features prepared");
            f.features =
                Some(pca_transform(&model, raw).map_err(|source| OdometryError::Feature { frame, source })?);
        }
        seq.pca = Some(model);
    }
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub points: usize,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub cost: f64,
    pub correspondences: usize,
    pub converged: bool,
    /// Registration failed and the motion prior was used instead.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub trajectory: Trajectory,
    pub relatives: Vec<Pose>,
    pub diagnostics: Vec<FrameDiagnostics>,
}

pub fn run_prepared(
    seq: &PreparedSequence,
    weights: &MlpPair,
    cfg: &OdometryConfig,
) -> Result<SequenceRun, OdometryError> {
    let n = seq.frames.len();
    if n < 2 {
        return Err(OdometryError::TooFewScans(n));
    }
    let rcfg = &cfg.registration;
    let mut traj = Trajectory::new();
    traj.push(0, Pose::identity())?;
    let mut relatives = Vec::with_capacity(n - 1);
    let mut diagnostics = Vec::with_capacity(n - 1);
    let mut failures = 0;
    let mut target = seq.frames[0]
        .gaussian(weights, rcfg)
        .map_err(|source| OdometryError::Registration { frame: 0, source })?;

    for frame in 1..n {
        let source = seq.frames[frame]
            .gaussian(weights, rcfg)
            .map_err(|source| OdometryError::Registration { frame, source })?;
        let prior = match cfg.motion_prior {
            MotionPrior::Identity => Pose::identity(),
            MotionPrior::ConstantVelocity => relatives.last().copied().unwrap_or_default(),
        };
        let (rel, diag) = match register(&source, &target, &prior, rcfg) {
            Ok(r) => {
                failures = 0;
                let d = FrameDiagnostics {
                    frame,
                    points: source.len(),
                    iterations: r.iterations,
                    inner_iterations: r.inner_iterations,
                    cost: r.cost,
                    correspondences: r.inliers,
                    converged: r.converged,
                    fallback: false,
                };
                (r.pose, d)
            }
            Err(e) => {
                failures += 1;
                log::warn!("frame {frame}: registration failed ({e}); using motion prior");
                if failures >= cfg.max_consecutive_failures {
                    return Err(OdometryError::TooManyFailures { frame, count: failures });
                }
                let d = FrameDiagnostics {
                    frame,
                    points: source.len(),
                    iterations: 0,
                    inner_iterations: 0,
                    cost: f64::NAN,
                    correspondences: 0,
                    converged: false,
                    fallback: true,
                };
                (prior, d)
            }
        };
        log::debug!(
            "frame {frame}: {} rounds, cost {:.4e}, {} correspondences",
            diag.iterations,
            diag.cost,
            diag.correspondences
        );
        let world = traj.last().unwrap().compose(&rel);
        traj.push(frame, world)?;
        relatives.push(rel);
        diagnostics.push(diag);
        target = source;
    }
    Ok(SequenceRun { trajectory: traj, relatives, diagnostics })
}

/// Full pipeline from raw scans.
pub fn run_sequence(
    scans: &[PointCloud],
    external: Option<&[RawFeatures]>,
    weights: &MlpPair,
    cfg: &OdometryConfig,
) -> Result<SequenceRun, OdometryError> {
    if scans.len() < 2 {
        return Err(OdometryError::TooFewScans(scans.len()));
    }
    let seq = prepare_sequence(scans, external, None, cfg)?;
    run_prepared(&seq, weights, cfg)
}

/// Distance between the final estimated and ground-truth positions.
pub fn endpoint_error(gt: &Trajectory, est: &Trajectory) -> f64 {
    match (gt.last(), est.last()) {
        (Some(g), Some(e)) => (g.translation - e.translation).norm(),
        _ => 0.0,
    }
}

/// Ground-truth path length.
pub fn path_length(traj: &Trajectory) -> f64 {
    traj.poses().windows(2).map(|w| (w[1].translation - w[0].translation).norm()).sum()
}
