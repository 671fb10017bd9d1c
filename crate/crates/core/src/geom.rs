//! Rigid-body kinematics on SE(3) and symmetric 3x3 linear algebra.
//!
//! Twists are ordered `(ω, ρ)`: rotational part first, translational part
//! second. Pose increments are applied on the left, `T ← exp(ξ)·T`.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle the exponential and logarithm use series expansions.
const SMALL_ANGLE: f64 = 1e-8;
/// `se3_log` refuses rotations closer than this to π.
const NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("rotation angle {angle} rad is too close to pi for a well-conditioned logarithm")]
    NearPi { angle: f64 },
    #[error("matrix has non-finite entries")]
    NonFinite,
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation about the z axis by `yaw` radians followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self { rotation, translation: t }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Takes the upper 3x4 block; the bottom row is ignored.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Pose {
        Pose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Rotation angle in radians, from the trace with the cosine clamped to [-1, 1].
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// `‖RᵀR − I‖∞` (max absolute entry).
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // atan2 of the axial part stays accurate near zero, where acos of the trace does not
    let axial = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (axial.norm() * 0.5).atan2((r.trace() - 1.0) * 0.5)
}

/// Element of se(3), `(ω, ρ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let (w, r) = (&self.rotation, &self.translation);
        Vector6::new(w.x, w.y, w.z, r.x, r.y, r.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

/// Skew-symmetric matrix with `hat(a)·b = a × b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Exponential map se(3) → SE(3).
pub fn se3_exp(xi: &Twist) -> Pose {
    let w = &xi.rotation;
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let k2 = k * k;
    let (a, b, c) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let s = theta.sin();
        let half = (0.5 * theta).sin();
        (s / theta, 2.0 * half * half / theta2, (theta - s) / (theta2 * theta))
    };
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Pose { rotation, translation: v * xi.translation }
}

/// Logarithm SE(3) → se(3). Fails within 1e-6 rad of a half turn.
pub fn se3_log(p: &Pose) -> Result<Twist, GeomError> {
    let r = &p.rotation;
    if !r.iter().chain(p.translation.iter()).all(|v| v.is_finite()) {
        return Err(GeomError::NonFinite);
    }
    let axis_sin = vee(&(r - r.transpose())) * 0.5;
    let s = axis_sin.norm();
    let c = (r.trace() - 1.0) * 0.5;
    let theta = s.atan2(c);
    if theta > std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(GeomError::NearPi { angle: theta });
    }
    let theta2 = theta * theta;
    let scale = if theta < SMALL_ANGLE { 1.0 + theta2 / 6.0 } else { theta / theta.sin() };
    // W² coefficient of V⁻¹, (1 - (θ/2)·cot(θ/2)) / θ²; the closed form cancels badly for small θ
    let d = if theta < 1e-2 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let h = 0.5 * theta;
        (1.0 - h / h.tan()) / theta2
    };
    let w = axis_sin * scale;
    let k = hat(&w);
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * d;
    Ok(Twist { rotation: w, translation: v_inv * p.translation })
}

/// Symmetric 3x3 matrix stored by its six unique entries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SymMat3 {
    pub xx: f64,
    pub xy: f64,
    pub xz: f64,
    pub yy: f64,
    pub yz: f64,
    pub zz: f64,
}

impl SymMat3 {
    pub fn new(xx: f64, xy: f64, xz: f64, yy: f64, yz: f64, zz: f64) -> Self {
        Self { xx, xy, xz, yy, yz, zz }
    }

    pub fn identity() -> Self {
        Self::scaled_identity(1.0)
    }

    pub fn scaled_identity(s: f64) -> Self {
        Self::new(s, 0.0, 0.0, s, 0.0, s)
    }

    pub fn diagonal(d: &Vector3<f64>) -> Self {
        Self::new(d.x, 0.0, 0.0, d.y, 0.0, d.z)
    }

    /// Symmetrizes by averaging off-diagonal pairs.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self {
            xx: m[(0, 0)],
            xy: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            xz: 0.5 * (m[(0, 2)] + m[(2, 0)]),
            yy: m[(1, 1)],
            yz: 0.5 * (m[(1, 2)] + m[(2, 1)]),
            zz: m[(2, 2)],
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.xx, self.xy, self.xz, //
            self.xy, self.yy, self.yz, //
            self.xz, self.yz, self.zz,
        )
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.xx, self.xy, self.xz, self.yy, self.yz, self.zz]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy + self.zz
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    /// `R·S·Rᵀ`.
    pub fn rotated(&self, r: &Matrix3<f64>) -> SymMat3 {
        SymMat3::from_matrix(&(r * self.to_matrix() * r.transpose()))
    }
}

impl std::ops::Add for SymMat3 {
    type Output = SymMat3;
    fn add(self, o: SymMat3) -> SymMat3 {
        SymMat3::new(
            self.xx + o.xx,
            self.xy + o.xy,
            self.xz + o.xz,
            self.yy + o.yy,
            self.yz + o.yz,
            self.zz + o.zz,
        )
    }
}

/// Eigendecomposition with ascending eigenvalues; column `j` of `vectors`
/// pairs with `values[j]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenDecomp3 {
    pub values: Vector3<f64>,
    pub vectors: Matrix3<f64>,
}

impl EigenDecomp3 {
    /// `Q·diag(values)·Qᵀ` with the stored eigenvectors.
    pub fn rebuild_with(&self, values: &Vector3<f64>) -> SymMat3 {
        let q = &self.vectors;
        SymMat3::from_matrix(&(q * Matrix3::from_diagonal(values) * q.transpose()))
    }

    pub fn reconstruct(&self) -> SymMat3 {
        self.rebuild_with(&self.values)
    }
}

/// Symmetric eigendecomposition, eigenvalues ascending.
///
/// Each eigenvector is sign-normalized so its largest-magnitude component is
/// positive. The basis of a repeated eigenspace is arbitrary but orthonormal.
pub fn eig_sym3(m: &SymMat3) -> Result<EigenDecomp3, GeomError> {
    if !m.is_finite() {
        return Err(GeomError::NonFinite);
    }
    let eig = SymmetricEigen::new(m.to_matrix());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut values = Vector3::zeros();
    let mut vectors = Matrix3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col = -col;
        }
        vectors.set_column(dst, &col);
    }
    Ok(EigenDecomp3 { values, vectors })
}

/// Nearest rotation in the Frobenius sense (polar factor via SVD).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        let mut col = u2.column_mut(2);
        col *= -1.0;
        r = u2 * vt;
    }
    r
}
