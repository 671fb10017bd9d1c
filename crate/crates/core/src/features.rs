//! Per-point local geometric features: a classical eigenvalue-descriptor
//! backbone, ingestion of externally computed descriptor dumps (`GLF1`), and
//! PCA compression to six dimensions.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geom::{eig_sym3, EigenDecomp3, SymMat3};
use crate::knn::{vec3_to_array, KdTree3, KnnError};

pub const FEATURE_DIM: usize = 6;
pub const CLASSICAL_DIM: usize = 8;
pub const DEFAULT_DESCRIPTOR_K: usize = 20;
pub const DEFAULT_PCA_MAX_ROWS: usize = 100_000;
const GLF_MAGIC: &[u8; 4] = b"GLF1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error("cloud has {points} points, fewer than k = {k}")]
    TooFewPoints { points: usize, k: usize },
    #[error("feature file is not GLF1")]
    BadMagic,
    #[error("feature file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("feature file holds {found} rows but the cloud has {expected} points")]
    RowMismatch { expected: usize, found: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("PCA needs at least 7 rows and 6 columns, got {rows}x{cols}")]
    PcaShape { rows: usize, cols: usize },
    #[error("PCA model expects {expected} input columns, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("malformed PCA model: {0}")]
    ModelFormat(String),
}

/// Row-major `N×D` matrix of raw per-point descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RawFeatures {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, FeatureError> {
        assert_eq!(data.len(), rows * cols, "data length must equal rows * cols");
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { row: i / cols.max(1), col: i % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FeatureError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Row-wise mean over groups, e.g. the members of each voxel.
    pub fn aggregate(&self, assignment: &[Option<usize>], groups: usize) -> RawFeatures {
        let mut sum = vec![0.0; groups * self.cols];
        let mut count = vec![0usize; groups];
        for (i, g) in assignment.iter().enumerate() {
            if let Some(g) = *g {
                count[g] += 1;
                for (d, s) in sum[g * self.cols..(g + 1) * self.cols].iter_mut().zip(self.row(i)) {
                    *d += s;
                }
            }
        }
        for (g, &c) in count.iter().enumerate() {
            if c > 0 {
                sum[g * self.cols..(g + 1) * self.cols].iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        RawFeatures { rows: groups, cols: self.cols, data: sum }
    }

    pub fn select(&self, keep: &[usize]) -> RawFeatures {
        let data = keep.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        RawFeatures { rows: keep.len(), cols: self.cols, data }
    }

    /// Uniform stride subsample of at most `max_rows` rows.
    pub fn subsample(&self, max_rows: usize) -> RawFeatures {
        if self.rows <= max_rows {
            return self.clone();
        }
        let keep: Vec<usize> = (0..max_rows).map(|i| i * self.rows / max_rows).collect();
        self.select(&keep)
    }

    pub fn vstack(parts: &[RawFeatures]) -> Option<RawFeatures> {
        let cols = parts.first()?.cols;
        if parts.iter().any(|p| p.cols != cols) {
            return None;
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Some(RawFeatures { rows: data.len() / cols.max(1), cols, data })
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Six-dimensional compressed features, one per point.
pub type FeatureSet = Vec<Vector6<f64>>;

/// Biased (divide-by-k) sample covariance of the given neighborhood.
pub fn sample_covariance(points: &[Vector3<f64>], members: impl Iterator<Item = usize> + Clone) -> SymMat3 {
    let n = members.clone().count() as f64;
    let mean = members.clone().fold(Vector3::zeros(), |acc, j| acc + points[j]) / n;
    let mut c = [0.0; 6];
    for j in members {
        let d = points[j] - mean;
        c[0] += d.x * d.x;
        c[1] += d.x * d.y;
        c[2] += d.x * d.z;
        c[3] += d.y * d.y;
        c[4] += d.y * d.z;
        c[5] += d.z * d.z;
    }
    SymMat3::from_array(c.map(|v| v / n))
}

/// Eigendecomposition of each point's k-NN covariance, or `None` for a
/// neighborhood of coincident points.
pub fn neighborhood_eigen(
    cloud: &PointCloud,
    tree: &KdTree3,
    k: usize,
) -> Vec<Option<EigenDecomp3>> {
    cloud
        .positions
        .par_iter()
        .map(|p| {
            let nn = tree.knn(&vec3_to_array(p), k);
            let cov = sample_covariance(&cloud.positions, nn.iter().map(|n| n.index));
            let scale = 1.0 + p.norm_squared();
            if cov.trace() <= 1e-20 * scale {
                return None;
            }
            eig_sym3(&cov).ok()
        })
        .collect()
}

/// The 8-channel descriptor for normalized ascending eigenvalues.
pub fn eigen_descriptor(values: &Vector3<f64>, height: f64) -> [f64; CLASSICAL_DIM] {
    let l = values.map(|v| v.max(0.0));
    let sum = l.sum();
    if sum <= 0.0 || l[2] <= 0.0 {
        let mut out = [0.0; CLASSICAL_DIM];
        out[7] = height;
        return out;
    }
    let (l1, l2, l3) = (l[0] / sum, l[1] / sum, l[2] / sum);
    let xlnx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    [
        (l3 - l2) / l3,
        (l2 - l1) / l3,
        l1 / l3,
        (l1 * l2 * l3).cbrt(),
        (l3 - l1) / l3,
        -(xlnx(l1) + xlnx(l2) + xlnx(l3)),
        l1 / (l1 + l2 + l3),
        height,
    ]
}

/// Linearity, planarity, sphericity, omnivariance, anisotropy, eigenentropy,
/// surface variation and normalized height for every point.
pub fn classical_descriptors(cloud: &PointCloud, k: usize) -> Result<RawFeatures, FeatureError> {
    if cloud.len() < k.max(1) {
        return Err(FeatureError::TooFewPoints { points: cloud.len(), k });
    }
    let tree = KdTree3::from_positions(&cloud.positions)?;
    Ok(classical_descriptors_with(cloud, &neighborhood_eigen(cloud, &tree, k)))
}

/// Descriptors from precomputed neighborhood eigendecompositions.
pub fn classical_descriptors_with(cloud: &PointCloud, eigen: &[Option<EigenDecomp3>]) -> RawFeatures {
    let (zmin, zmax) = cloud
        .positions
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.z), hi.max(p.z)));
    let extent = zmax - zmin;
    let data: Vec<f64> = cloud
        .positions
        .par_iter()
        .zip(eigen.par_iter())
        .flat_map_iter(|(p, e)| {
            let h = if extent > 0.0 { (p.z - zmin) / extent } else { 0.0 };
            let values = e.map_or(Vector3::zeros(), |e| e.values);
            eigen_descriptor(&values, h)
        })
        .collect();
    RawFeatures { rows: cloud.len(), cols: CLASSICAL_DIM, data }
}

pub fn encode_glf(raw: &RawFeatures) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + raw.data.len() * 4);
    out.extend_from_slice(GLF_MAGIC);
    out.extend_from_slice(&(raw.rows as u32).to_le_bytes());
    out.extend_from_slice(&(raw.cols as u32).to_le_bytes());
    for v in &raw.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_glf(bytes: &[u8]) -> Result<RawFeatures, FeatureError> {
    if bytes.len() < 12 || &bytes[..4] != GLF_MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + n * d * 4;
    if bytes.len() != expected {
        return Err(FeatureError::Truncated { expected, found: bytes.len() });
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    RawFeatures::new(n, d, data)
}

pub fn write_external_features(raw: &RawFeatures, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    fs::write(path, encode_glf(raw))?;
    Ok(())
}

/// Loads a `GLF1` dump and checks its row count against the owning cloud.
pub fn load_external_features(path: impl AsRef<Path>, n_points: usize) -> Result<RawFeatures, FeatureError> {
    let raw = decode_glf(&fs::read(path)?)?;
    if raw.rows != n_points {
        return Err(FeatureError::RowMismatch { expected: n_points, found: raw.rows });
    }
    Ok(raw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `6×D`, orthonormal rows.
    pub projection: DMatrix<f64>,
    pub explained_variance_ratio: Vector6<f64>,
    /// Set when fewer than six directions carried variance and the rest were
    /// filled by an orthonormal completion.
    pub rank_deficient: bool,
}

fn orthonormal_completion(kept: &mut Vec<DVector<f64>>, dim: usize, want: usize) {
    let mut e = 0;
    while kept.len() < want && e < dim {
        let mut v = DVector::zeros(dim);
        v[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for u in kept.iter() {
                let d = u.dot(&v);
                v -= u * d;
            }
        }
        let n = v.norm();
        if n > 1e-6 {
            kept.push(v / n);
        }
    }
}

/// Mean-centered SVD; keeps the top six right singular directions.
pub fn pca_fit(samples: &RawFeatures) -> Result<PcaModel, FeatureError> {
    let (n, d) = (samples.rows, samples.cols);
    if n < FEATURE_DIM + 1 || d < FEATURE_DIM {
        return Err(FeatureError::PcaShape { rows: n, cols: d });
    }
    let mut x = samples.to_matrix();
    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let smax = sv[order[0]];
    let tol = smax * (n.max(d) as f64) * f64::EPSILON;

    let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(FEATURE_DIM);
    let mut ratio = Vector6::zeros();
    for &j in order.iter().take(FEATURE_DIM) {
        if sv[j] <= tol || total == 0.0 {
            break;
        }
        let mut v = v_t.row(j).transpose().into_owned();
        if v[v.iamax()] < 0.0 {
            v = -v;
        }
        ratio[dirs.len()] = sv[j] * sv[j] / total;
        dirs.push(v);
    }
    let rank_deficient = dirs.len() < FEATURE_DIM;
    orthonormal_completion(&mut dirs, d, FEATURE_DIM);
    let mut projection = DMatrix::zeros(FEATURE_DIM, d);
    for (i, v) in dirs.iter().enumerate() {
        projection.set_row(i, &v.transpose());
    }
    Ok(PcaModel { mean, projection, explained_variance_ratio: ratio, rank_deficient })
}

pub fn pca_fit_subsampled(samples: &RawFeatures, max_rows: usize) -> Result<PcaModel, FeatureError> {
    pca_fit(&samples.subsample(max_rows))
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cumulative_ratio(&self) -> f64 {
        self.explained_variance_ratio.sum()
    }

    pub fn transform_row(&self, row: &[f64]) -> Vector6<f64> {
        let mut out = Vector6::zeros();
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, x) in row.iter().enumerate() {
                s += (x - self.mean[j]) * self.projection[(i, j)];
            }
            *o = s;
        }
        out
    }

    pub fn to_text(&self) -> String {
        let fmt = |it: &mut dyn Iterator<Item = f64>| {
            it.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
        };
        let mut s = format!("gloam-pca v1\ndims {}\n", self.input_dim());
        s += &format!("mean {}\n", fmt(&mut self.mean.iter().copied()));
        for r in self.projection.row_iter() {
            s += &format!("row {}\n", fmt(&mut r.iter().copied()));
        }
        s += &format!("ratio {}\n", fmt(&mut self.explained_variance_ratio.iter().copied()));
        s += &format!("rank_deficient {}\n", self.rank_deficient as u8);
        s
    }

    pub fn from_text(text: &str) -> Result<PcaModel, FeatureError> {
        let bad = |m: &str| FeatureError::ModelFormat(m.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("gloam-pca v1") {
            return Err(bad("missing header"));
        }
        let mut field = |name: &str| -> Result<Vec<f64>, FeatureError> {
            let line = lines.next().ok_or_else(|| bad("unexpected end"))?;
            let rest = line
                .strip_prefix(name)
                .ok_or_else(|| FeatureError::ModelFormat(format!("expected `{name}`")))?;
            rest.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| FeatureError::ModelFormat(e.to_string())))
                .collect()
        };
        let dims = field("dims")?;
        let d = *dims.first().ok_or_else(|| bad("dims"))? as usize;
        let mean = field("mean")?;
        if mean.len() != d {
            return Err(bad("mean length"));
        }
        let mut projection = DMatrix::zeros(FEATURE_DIM, d);
        for i in 0..FEATURE_DIM {
            let r = field("row")?;
            if r.len() != d {
                return Err(bad("row length"));
            }
            for (j, v) in r.into_iter().enumerate() {
                projection[(i, j)] = v;
            }
        }
        let ratio = field("ratio")?;
        if ratio.len() != FEATURE_DIM {
            return Err(bad("ratio length"));
        }
        let rd = field("rank_deficient")?;
        Ok(PcaModel {
            mean: DVector::from_vec(mean),
            projection,
            explained_variance_ratio: Vector6::from_column_slice(&ratio),
            rank_deficient: rd.first() == Some(&1.0),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PcaModel, FeatureError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// `(raw − mean)·projectionᵀ` for every row.
pub fn pca_transform(model: &PcaModel, raw: &RawFeatures) -> Result<FeatureSet, FeatureError> {
    if raw.cols != model.input_dim() {
        return Err(FeatureError::DimMismatch { expected: model.input_dim(), found: raw.cols });
    }
    Ok((0..raw.rows).into_par_iter().map(|i| model.transform_row(raw.row(i))).collect())
}
