//! GICP registration with optional feature-extended data association and
//! learned covariance eigenvalues.
//!
//! The pose `T` maps source coordinates into the target frame. Each
//! correspondence contributes `dᵀ M⁻¹ d` with `d = b − T·a` and
//! `M = C_B + R·C_A·Rᵀ`. `M` is held fixed while linearizing, and pose
//! increments are applied on the left.

use std::sync::OnceLock;

use nalgebra::{Cholesky, Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::features::{neighborhood_eigen, FeatureSet};
use crate::geom::{hat, se3_exp, EigenDecomp3, Pose, SymMat3, Twist};
use crate::knn::{KdTree3, KdTree6, KnnError};
use crate::mlp::MlpWeights;

/// Registration gives up below this many correspondences.
pub const MIN_CORRESPONDENCES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error("cloud has {points} points, fewer than k = {k}")]
    TooFewPoints { points: usize, k: usize },
    #[error("feature rows ({features}) do not match point count ({points})")]
    FeatureRows { points: usize, features: usize },
    #[error("feature-extended association needs converted features on both clouds")]
    MissingAssociationFeatures,
    #[error("only {found} correspondences (need {MIN_CORRESPONDENCES})")]
    TooFewCorrespondences { found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    /// Nearest neighbor on positions only.
    #[default]
    Euclidean,
    /// Nearest neighbor on positions concatenated with converted features.
    FeatureExtended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Eigenvalues replaced by `(ε, 1, 1)`.
    #[default]
    Plane,
    /// Eigenvalues predicted from features, floored at ε and L2-normalized.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub association: AssociationMode,
    pub covariance: CovarianceMode,
    pub k: usize,
    pub epsilon: f64,
    /// Gate in the association space (meters for the position channels).
    pub max_correspondence_distance: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub tolerance: f64,
    pub lm_initial_lambda: f64,
    pub lm_factor: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            association: AssociationMode::Euclidean,
            covariance: CovarianceMode::Plane,
            k: 20,
            epsilon: 1e-3,
            max_correspondence_distance: 2.0,
            max_outer_iterations: 20,
            max_inner_iterations: 50,
            tolerance: 1e-6,
            lm_initial_lambda: 1e-4,
            lm_factor: 10.0,
        }
    }
}

/// Points with regularized covariances and, optionally, converted features
/// used for feature-extended association.
#[derive(Debug, Clone)]
pub struct GaussianCloud {
    pub cloud: PointCloud,
    pub covariances: Vec<SymMat3>,
    pub converted: Option<Vec<Vector3<f64>>>,
    /// Points whose neighborhood collapsed and fell back to `ε·I`.
    pub degenerate: usize,
    tree3: OnceLock<KdTree3>,
    tree6: OnceLock<KdTree6>,
}

impl GaussianCloud {
    pub fn new(cloud: PointCloud, covariances: Vec<SymMat3>) -> Self {
        assert_eq!(cloud.len(), covariances.len(), "one covariance per point");
        Self {
            cloud,
            covariances,
            converted: None,
            degenerate: 0,
            tree3: OnceLock::new(),
            tree6: OnceLock::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.cloud.positions
    }

    /// Attaches converted features `f̄ = conversion(f)` for feature-extended association.
    pub fn with_conversion(
        mut self,
        features: &FeatureSet,
        conversion: &MlpWeights,
    ) -> Result<Self, RegistrationError> {
        check_rows(self.len(), features.len())?;
        self.converted = Some(features.par_iter().map(|f| conversion.forward(f)).collect());
        self.tree6 = OnceLock::new();
        Ok(self)
    }

    pub fn with_converted(mut self, converted: Vec<Vector3<f64>>) -> Result<Self, RegistrationError> {
        check_rows(self.len(), converted.len())?;
        self.converted = Some(converted);
        self.tree6 = OnceLock::new();
        Ok(self)
    }

    pub fn position_tree(&self) -> Result<&KdTree3, KnnError> {
        if let Some(t) = self.tree3.get() {
            return Ok(t);
        }
        let t = KdTree3::from_positions(&self.cloud.positions)?;
        Ok(self.tree3.get_or_init(|| t))
    }

    /// Provides an already-built position tree (it must index these positions).
    pub fn set_position_tree(&self, tree: KdTree3) {
        let _ = self.tree3.set(tree);
    }

    pub fn association_vector(&self, i: usize) -> Option<[f64; 6]> {
        let f = self.converted.as_ref()?[i];
        let p = self.cloud.positions[i];
        Some([p.x, p.y, p.z, f.x, f.y, f.z])
    }

    pub fn feature_tree(&self) -> Result<&KdTree6, RegistrationError> {
        if let Some(t) = self.tree6.get() {
            return Ok(t);
        }
        if self.converted.is_none() {
            return Err(RegistrationError::MissingAssociationFeatures);
        }
        let pts = (0..self.len()).map(|i| self.association_vector(i).unwrap()).collect();
        let t = KdTree6::build(pts)?;
        Ok(self.tree6.get_or_init(|| t))
    }
}

fn check_rows(points: usize, features: usize) -> Result<(), RegistrationError> {
    if points != features {
        return Err(RegistrationError::FeatureRows { points, features });
    }
    Ok(())
}

/// Plane regularization: eigenvalues `(ε, 1, 1)` paired with the ascending
/// original eigenvectors. Collapsed neighborhoods become `ε·I`.
pub fn regularize_plane(eigen: Option<&EigenDecomp3>, epsilon: f64) -> SymMat3 {
    match eigen {
        Some(e) => e.rebuild_with(&Vector3::new(epsilon, 1.0, 1.0)),
        None => SymMat3::scaled_identity(epsilon),
    }
}

/// Sort ascending, floor each entry at ε, scale to unit L2 norm.
pub fn learned_eigenvalues(raw: &Vector3<f64>, epsilon: f64) -> Vector3<f64> {
    let mut e = [raw.x, raw.y, raw.z];
    e.sort_by(f64::total_cmp);
    for v in e.iter_mut() {
        if *v <= epsilon {
            *v = epsilon;
        }
    }
    let v = Vector3::from(e);
    let n = v.norm();
    // elementwise division keeps `min ≥ ε/‖e‖` exact; a reciprocal multiply can round below it
    v.map(|x| x / n)
}

/// Learned regularization: MLP eigenvalues (ascending) paired with the
/// ascending original eigenvectors.
pub fn regularize_learned(eigen: Option<&EigenDecomp3>, mlp_output: &Vector3<f64>, epsilon: f64) -> SymMat3 {
    match eigen {
        Some(e) => e.rebuild_with(&learned_eigenvalues(mlp_output, epsilon)),
        None => SymMat3::scaled_identity(epsilon),
    }
}

pub fn plane_covariances(eigen: &[Option<EigenDecomp3>], epsilon: f64) -> (Vec<SymMat3>, usize) {
    let covs = eigen.par_iter().map(|e| regularize_plane(e.as_ref(), epsilon)).collect();
    (covs, eigen.iter().filter(|e| e.is_none()).count())
}

pub fn learned_covariances(
    eigen: &[Option<EigenDecomp3>],
    features: &FeatureSet,
    weights: &MlpWeights,
    epsilon: f64,
) -> (Vec<SymMat3>, usize) {
    let covs = eigen
        .par_iter()
        .zip(features.par_iter())
        .map(|(e, f)| regularize_learned(e.as_ref(), &weights.forward(f), epsilon))
        .collect();
    (covs, eigen.iter().filter(|e| e.is_none()).count())
}

fn local_eigen(cloud: &PointCloud, k: usize) -> Result<(KdTree3, Vec<Option<EigenDecomp3>>), RegistrationError> {
    if cloud.len() < k.max(1) {
        return Err(RegistrationError::TooFewPoints { points: cloud.len(), k });
    }
    let tree = KdTree3::from_positions(&cloud.positions)?;
    let eig = neighborhood_eigen(cloud, &tree, k);
    Ok((tree, eig))
}

/// Plane-GICP covariances from each point's k-NN neighborhood.
pub fn estimate_covariances_plane(
    cloud: &PointCloud,
    k: usize,
    epsilon: f64,
) -> Result<GaussianCloud, RegistrationError> {
    let (tree, eig) = local_eigen(cloud, k)?;
    let (covs, degenerate) = plane_covariances(&eig, epsilon);
    let mut g = GaussianCloud::new(cloud.clone(), covs);
    g.degenerate = degenerate;
    g.set_position_tree(tree);
    Ok(g)
}

/// Covariances whose eigenvectors come from the neighborhood and whose
/// eigenvalues come from the eigenvalue-estimation network.
pub fn estimate_covariances_learned(
    cloud: &PointCloud,
    features: &FeatureSet,
    weights: &MlpWeights,
    k: usize,
    epsilon: f64,
) -> Result<GaussianCloud, RegistrationError> {
    check_rows(cloud.len(), features.len())?;
    let (tree, eig) = local_eigen(cloud, k)?;
    let (covs, degenerate) = learned_covariances(&eig, features, weights, epsilon);
    let mut g = GaussianCloud::new(cloud.clone(), covs);
    g.degenerate = degenerate;
    g.set_position_tree(tree);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    /// Squared distance in the association space.
    pub dist_sq: f64,
}

pub type Correspondences = Vec<Correspondence>;

/// Nearest-neighbor association of every source point under `pose`.
/// Feature channels are not transformed. An empty result is not an error.
pub fn associate(
    source: &GaussianCloud,
    target: &GaussianCloud,
    pose: &Pose,
    cfg: &RegistrationConfig,
) -> Result<Correspondences, RegistrationError> {
    let gate = cfg.max_correspondence_distance * cfg.max_correspondence_distance;
    let found: Vec<Option<Correspondence>> = match cfg.association {
        AssociationMode::Euclidean => {
            let tree = target.position_tree()?;
            source
                .positions()
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let q = pose.transform_point(p);
                    tree.nearest_within(&[q.x, q.y, q.z], gate)
                        .map(|n| Correspondence { source: i, target: n.index, dist_sq: n.dist_sq })
                })
                .collect()
        }
        AssociationMode::FeatureExtended => {
            let tree = target.feature_tree()?;
            let conv = source.converted.as_ref().ok_or(RegistrationError::MissingAssociationFeatures)?;
            source
                .positions()
                .par_iter()
                .zip(conv.par_iter())
                .enumerate()
                .map(|(i, (p, f))| {
                    let q = pose.transform_point(p);
                    tree.nearest_within(&[q.x, q.y, q.z, f.x, f.y, f.z], gate)
                        .map(|n| Correspondence { source: i, target: n.index, dist_sq: n.dist_sq })
                })
                .collect()
        }
    };
    Ok(found.into_iter().flatten().collect())
}

/// Pairwise tree reduction; the summation order depends only on the length.
pub(crate) fn pairwise_sum<T: Copy + std::ops::Add<Output = T>>(items: &[T], zero: T) -> T {
    match items.len() {
        0 => zero,
        1 => items[0],
        n => {
            let (a, b) = items.split_at(n / 2);
            pairwise_sum(a, zero) + pairwise_sum(b, zero)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PairTerm {
    cost: f64,
    gradient: Vector6<f64>,
    hessian: Matrix6<f64>,
}

impl std::ops::Add for PairTerm {
    type Output = PairTerm;
    fn add(self, o: PairTerm) -> PairTerm {
        PairTerm {
            cost: self.cost + o.cost,
            gradient: self.gradient + o.gradient,
            hessian: self.hessian + o.hessian,
        }
    }
}

impl PairTerm {
    fn zero() -> Self {
        PairTerm { cost: 0.0, gradient: Vector6::zeros(), hessian: Matrix6::zeros() }
    }
}

/// Cost, gradient and Gauss–Newton Hessian with respect to a left
/// perturbation `exp(ξ)·T` at `ξ = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub cost: f64,
    pub gradient: Vector6<f64>,
    pub hessian: Matrix6<f64>,
    /// Pairs whose combined covariance was not positive definite.
    pub dropped: usize,
}

fn combined_inverse(
    source: &GaussianCloud,
    target: &GaussianCloud,
    c: &Correspondence,
    rotation: &Matrix3<f64>,
) -> Option<Matrix3<f64>> {
    let ca = source.covariances[c.source].to_matrix();
    let m = target.covariances[c.target].to_matrix() + rotation * ca * rotation.transpose();
    Cholesky::new(m).map(|ch| ch.inverse())
}

fn pair_residual(source: &GaussianCloud, target: &GaussianCloud, c: &Correspondence, pose: &Pose) -> (Vector3<f64>, Vector3<f64>) {
    let q = pose.transform_point(&source.positions()[c.source]);
    (target.positions()[c.target] - q, q)
}

/// Mahalanobis term of every correspondence (`None` when dropped), with
/// `M` evaluated at `pose`.
pub fn pair_costs(
    source: &GaussianCloud,
    target: &GaussianCloud,
    corr: &[Correspondence],
    pose: &Pose,
) -> Vec<Option<f64>> {
    pair_costs_with(source, target, corr, pose, &pose.rotation)
}

/// As [`pair_costs`] but with `M` built from `frozen_rotation`.
pub fn pair_costs_with(
    source: &GaussianCloud,
    target: &GaussianCloud,
    corr: &[Correspondence],
    pose: &Pose,
    frozen_rotation: &Matrix3<f64>,
) -> Vec<Option<f64>> {
    corr.par_iter()
        .map(|c| {
            let minv = combined_inverse(source, target, c, frozen_rotation)?;
            let (d, _) = pair_residual(source, target, c, pose);
            Some(d.dot(&(minv * d)))
        })
        .collect()
}

/// Total cost with `M` evaluated at `pose`; also returns the dropped count.
pub fn gicp_cost(source: &GaussianCloud, target: &GaussianCloud, corr: &[Correspondence], pose: &Pose) -> (f64, usize) {
    let terms = pair_costs(source, target, corr, pose);
    let dropped = terms.iter().filter(|t| t.is_none()).count();
    let vals: Vec<f64> = terms.into_iter().flatten().collect();
    (pairwise_sum(&vals, 0.0), dropped)
}

pub fn gicp_cost_and_gradient(
    source: &GaussianCloud,
    target: &GaussianCloud,
    corr: &[Correspondence],
    pose: &Pose,
) -> CostTerms {
    let terms: Vec<Option<PairTerm>> = corr
        .par_iter()
        .map(|c| {
            let minv = combined_inverse(source, target, c, &pose.rotation)?;
            let (d, q) = pair_residual(source, target, c, pose);
            let mut j = SMatrix::<f64, 3, 6>::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&q));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
            let r = minv * d;
            let jt = j.transpose();
            Some(PairTerm {
                cost: d.dot(&r),
                gradient: jt * r * 2.0,
                hessian: jt * minv * j * 2.0,
            })
        })
        .collect();
    let dropped = terms.iter().filter(|t| t.is_none()).count();
    let kept: Vec<PairTerm> = terms.into_iter().flatten().collect();
    let total = pairwise_sum(&kept, PairTerm::zero());
    CostTerms { cost: total.cost, gradient: total.gradient, hessian: total.hessian, dropped }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationResult {
    pub pose: Pose,
    pub cost: f64,
    /// Association rounds performed.
    pub iterations: usize,
    /// LM solves across all rounds, rejected steps included.
    pub inner_iterations: usize,
    pub inliers: usize,
    pub converged: bool,
}

fn damped_step(terms: &CostTerms, lambda: f64) -> Option<Vector6<f64>> {
    let h = &terms.hessian;
    let floor = 1e-9 * h.diagonal().amax().max(1e-12);
    let mut a = *h;
    for i in 0..6 {
        a[(i, i)] += lambda * h[(i, i)].max(floor);
    }
    Cholesky::new(a).map(|ch| ch.solve(&(-terms.gradient)))
}

/// Alternates association with one accepted Levenberg–Marquardt step until
/// the accepted increment falls below the tolerance.
pub fn register(
    source: &GaussianCloud,
    target: &GaussianCloud,
    initial: &Pose,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    let mut pose = *initial;
    let mut lambda = cfg.lm_initial_lambda;
    let mut inner_total = 0;
    let mut last_cost = f64::INFINITY;
    let mut inliers = 0;
    let mut converged = false;
    let mut rounds = 0;

    while rounds < cfg.max_outer_iterations {
        rounds += 1;
        let corr = associate(source, target, &pose, cfg)?;
        if corr.len() < MIN_CORRESPONDENCES {
            return Err(RegistrationError::TooFewCorrespondences { found: corr.len() });
        }
        inliers = corr.len();
        let terms = gicp_cost_and_gradient(source, target, &corr, &pose);
        last_cost = terms.cost;

        let mut stationary = true;
        for _ in 0..cfg.max_inner_iterations {
            inner_total += 1;
            let Some(delta) = damped_step(&terms, lambda) else {
                lambda *= cfg.lm_factor;
                continue;
            };
            if delta.norm() < cfg.tolerance {
                break;
            }
            let candidate = se3_exp(&Twist::from_vector(&delta)).compose(&pose);
            let (cost, _) = gicp_cost(source, target, &corr, &candidate);
            if cost < terms.cost {
                pose = candidate;
                last_cost = cost;
                lambda /= cfg.lm_factor;
                stationary = false;
                break;
            }
            lambda *= cfg.lm_factor;
        }
        if stationary {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        pose,
        cost: last_cost,
        iterations: rounds,
        inner_iterations: inner_total,
        inliers,
        converged,
    })
}
