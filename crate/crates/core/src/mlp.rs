//! The two tiny 6→4→3 encoders: feature conversion (association space) and
//! eigenvalue estimation (covariance shape).
//!
//! Parameter layout: layer-1 weights row-major (4×6), layer-1 biases (4),
//! layer-2 weights row-major (3×4), layer-2 biases (3). ReLU on the hidden
//! layer only; the output layer is linear.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3x4, Matrix4x6, Vector3, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const INPUTS: usize = 6;
pub const HIDDEN: usize = 4;
pub const OUTPUTS: usize = 3;
pub const PARAM_COUNT: usize = INPUTS * HIDDEN + HIDDEN + HIDDEN * OUTPUTS + OUTPUTS;

const HEADER: &str = "# gloam-mlp v1";

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("expected {PARAM_COUNT} parameters, found {0}")]
    WrongLength(usize),
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("malformed weight file at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("weight file holds the {found} network, expected {expected}")]
    RoleMismatch { expected: MlpRole, found: MlpRole },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpRole {
    Conversion,
    Eigenvalue,
}

impl fmt::Display for MlpRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MlpRole::Conversion => "conversion",
            MlpRole::Eigenvalue => "eigenvalue",
        })
    }
}

impl FromStr for MlpRole {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conversion" => Ok(MlpRole::Conversion),
            "eigenvalue" => Ok(MlpRole::Eigenvalue),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpWeights {
    params: [f64; PARAM_COUNT],
}

impl Default for MlpWeights {
    fn default() -> Self {
        Self::zeros()
    }
}

impl MlpWeights {
    pub fn zeros() -> Self {
        Self { params: [0.0; PARAM_COUNT] }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, MlpError> {
        let params: [f64; PARAM_COUNT] = v.try_into().map_err(|_| MlpError::WrongLength(v.len()))?;
        if let Some(i) = params.iter().position(|x| !x.is_finite()) {
            return Err(MlpError::NonFinite(i));
        }
        Ok(Self { params })
    }

    /// Deterministic uniform draw in [-1, 1].
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { params: std::array::from_fn(|_| rng.random_range(-1.0..=1.0)) }
    }

    /// A network whose output is the constant `bias` regardless of input.
    pub fn constant(bias: Vector3<f64>) -> Self {
        let mut w = Self::zeros();
        w.params[PARAM_COUNT - OUTPUTS..].copy_from_slice(bias.as_slice());
        w
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn layer1(&self) -> (Matrix4x6<f64>, Vector4<f64>) {
        let w = Matrix4x6::from_row_slice(&self.params[..24]);
        let b = Vector4::from_column_slice(&self.params[24..28]);
        (w, b)
    }

    pub fn layer2(&self) -> (Matrix3x4<f64>, Vector3<f64>) {
        let w = Matrix3x4::from_row_slice(&self.params[28..40]);
        let b = Vector3::from_column_slice(&self.params[40..43]);
        (w, b)
    }

    /// `W₂·relu(W₁x + b₁) + b₂`.
    pub fn forward(&self, x: &Vector6<f64>) -> Vector3<f64> {
        let p = &self.params;
        let mut h = [0.0; HIDDEN];
        for (r, hr) in h.iter_mut().enumerate() {
            let mut s = p[24 + r];
            for c in 0..INPUTS {
                s += p[r * INPUTS + c] * x[c];
            }
            *hr = s.max(0.0);
        }
        let mut y = Vector3::zeros();
        for r in 0..OUTPUTS {
            let mut s = p[40 + r];
            for c in 0..HIDDEN {
                s += p[28 + r * HIDDEN + c] * h[c];
            }
            y[r] = s;
        }
        y
    }

    pub fn to_text(&self, role: MlpRole) -> String {
        let mut s = format!("{HEADER}\nrole {role}\nshape {INPUTS} {HIDDEN} {OUTPUTS}\n");
        for v in &self.params {
            s += &format!("{v:?}\n");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<(MlpRole, Self), MlpError> {
        let err = |line: usize, msg: &str| MlpError::Format { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            _ => return Err(err(1, "missing header")),
        }
        let (ln, role_line) = lines.next().ok_or_else(|| err(2, "missing role"))?;
        let role = role_line
            .trim()
            .strip_prefix("role ")
            .ok_or_else(|| err(ln + 1, "expected `role`"))?
            .parse::<MlpRole>()
            .map_err(|m| err(ln + 1, &m))?;
        let (ln, shape) = lines.next().ok_or_else(|| err(3, "missing shape"))?;
        if shape.split_whitespace().collect::<Vec<_>>() != ["shape", "6", "4", "3"] {
            return Err(err(ln + 1, "unsupported shape"));
        }
        let params = lines
            .map(|(ln, l)| l.trim().parse::<f64>().map_err(|e| err(ln + 1, &e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((role, Self::from_slice(&params)?))
    }

    pub fn save(&self, role: MlpRole, path: impl AsRef<Path>) -> Result<(), MlpError> {
        fs::write(path, self.to_text(role))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected: MlpRole) -> Result<Self, MlpError> {
        let (role, w) = Self::from_text(&fs::read_to_string(path)?)?;
        if role != expected {
            return Err(MlpError::RoleMismatch { expected, found: role });
        }
        Ok(w)
    }
}

/// The two trainable blocks of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MlpPair {
    pub conversion: MlpWeights,
    pub eigenvalue: MlpWeights,
}

impl MlpPair {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            conversion: MlpWeights::random(rng.random()),
            eigenvalue: MlpWeights::random(rng.random()),
        }
    }

    pub fn load(conversion: impl AsRef<Path>, eigenvalue: impl AsRef<Path>) -> Result<Self, MlpError> {
        Ok(Self {
            conversion: MlpWeights::load(conversion, MlpRole::Conversion)?,
            eigenvalue: MlpWeights::load(eigenvalue, MlpRole::Eigenvalue)?,
        })
    }

    pub fn save(&self, conversion: impl AsRef<Path>, eigenvalue: impl AsRef<Path>) -> Result<(), MlpError> {
        self.conversion.save(MlpRole::Conversion, conversion)?;
        self.eigenvalue.save(MlpRole::Eigenvalue, eigenvalue)
    }
}
