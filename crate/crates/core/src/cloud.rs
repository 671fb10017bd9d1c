//! Point-cloud container, KITTI scan I/O, range gating, voxel downsampling
//! and PLY/CSV export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::SymMat3;

const KITTI_RECORD: usize = 16;
const VOXEL_BITS: u32 = 21;
const VOXEL_OFFSET: i64 = 1 << (VOXEL_BITS - 1);
const VOXEL_MASK: u64 = (1 << VOXEL_BITS) - 1;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("scan length {len} is not a multiple of 16 bytes (truncated record at byte {offset})")]
    Truncated { len: usize, offset: usize },
    #[error("non-finite value at byte offset {offset}")]
    NonFinite { offset: usize },
    #[error("intensity length {intensity} does not match {points} positions")]
    IntensityLength { points: usize, intensity: usize },
    #[error("covariance count {covs} does not match {points} points")]
    CovarianceLength { points: usize, covs: usize },
    #[error("voxel leaf must be positive and finite, got {0}")]
    BadLeaf(f64),
    #[error("malformed PLY: {0}")]
    Ply(String),
}

/// Positions of one LiDAR scan, with optional per-point intensity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub intensity: Option<Vec<f64>>,
    pub frame_id: u64,
}

impl PointCloud {
    pub fn new(positions: Vec<Vector3<f64>>) -> Self {
        Self { positions, intensity: None, frame_id: 0 }
    }

    pub fn with_intensity(
        positions: Vec<Vector3<f64>>,
        intensity: Vec<f64>,
    ) -> Result<Self, CloudError> {
        if positions.len() != intensity.len() {
            return Err(CloudError::IntensityLength {
                points: positions.len(),
                intensity: intensity.len(),
            });
        }
        Ok(Self { positions, intensity: Some(intensity), frame_id: 0 })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps the points selected by `keep`, preserving order.
    pub fn select(&self, keep: &[usize]) -> PointCloud {
        PointCloud {
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
            intensity: self.intensity.as_ref().map(|v| keep.iter().map(|&i| v[i]).collect()),
            frame_id: self.frame_id,
        }
    }

    pub fn transformed(&self, pose: &crate::geom::Pose) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(|p| pose.transform_point(p)).collect(),
            intensity: self.intensity.clone(),
            frame_id: self.frame_id,
        }
    }
}

/// Parses consecutive little-endian `f32` records `(x, y, z, intensity)`.
pub fn parse_kitti_bin(bytes: &[u8]) -> Result<PointCloud, CloudError> {
    if !bytes.len().is_multiple_of(KITTI_RECORD) {
        return Err(CloudError::Truncated {
            len: bytes.len(),
            offset: bytes.len() - bytes.len() % KITTI_RECORD,
        });
    }
    let n = bytes.len() / KITTI_RECORD;
    let mut positions = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (rec, chunk) in bytes.chunks_exact(KITTI_RECORD).enumerate() {
        let mut v = [0f32; 4];
        for (j, slot) in v.iter_mut().enumerate() {
            let off = 4 * j;
            *slot = f32::from_le_bytes(chunk[off..off + 4].try_into().unwrap());
            if !slot.is_finite() {
                return Err(CloudError::NonFinite { offset: rec * KITTI_RECORD + off });
            }
        }
        positions.push(Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64));
        intensity.push(v[3] as f64);
    }
    Ok(PointCloud { positions, intensity: Some(intensity), frame_id: 0 })
}

pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud, CloudError> {
    parse_kitti_bin(&fs::read(path)?)
}

/// `.bin` files of a scan directory in lexicographic order.
pub fn list_kitti_scans(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, CloudError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Every scan of a directory; `frame_id` is the position in the listing.
pub fn read_kitti_dir(dir: impl AsRef<Path>) -> Result<Vec<PointCloud>, CloudError> {
    list_kitti_scans(dir)?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = read_kitti_bin(p)?;
            c.frame_id = i as u64;
            Ok(c)
        })
        .collect()
}

pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * KITTI_RECORD);
    for (i, p) in cloud.positions.iter().enumerate() {
        let w = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for x in [p.x, p.y, p.z, w] {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), CloudError> {
    fs::write(path, encode_kitti_bin(cloud))?;
    Ok(())
}

/// Sensor-range gate applied at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RangeGate {
    pub min: f64,
    pub max: f64,
}

impl Default for RangeGate {
    fn default() -> Self {
        Self { min: 1.0, max: 100.0 }
    }
}

impl RangeGate {
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let keep: Vec<usize> = (0..cloud.len())
            .filter(|&i| {
                let r = cloud.positions[i].norm();
                r >= self.min && r <= self.max
            })
            .collect();
        cloud.select(&keep)
    }
}

/// Output of [`voxel_downsample_indexed`].
#[derive(Debug, Clone)]
pub struct Downsampled {
    pub cloud: PointCloud,
    /// For every input point, the output point it was merged into, or `None`
    /// when its voxel index overflowed the 21-bit packing.
    pub assignment: Vec<Option<usize>>,
    pub dropped: usize,
}

fn voxel_key(p: &Vector3<f64>, leaf: f64) -> Option<u64> {
    let mut key = 0u64;
    for c in [p.x, p.y, p.z] {
        let i = (c / leaf).floor();
        if !i.is_finite() {
            return None;
        }
        let shifted = i as i64 + VOXEL_OFFSET;
        if !(0..(1i64 << VOXEL_BITS)).contains(&shifted) {
            return None;
        }
        key = (key << VOXEL_BITS) | (shifted as u64 & VOXEL_MASK);
    }
    Some(key)
}

/// One centroid per occupied voxel, ordered by packed voxel index.
pub fn voxel_downsample_indexed(cloud: &PointCloud, leaf: f64) -> Result<Downsampled, CloudError> {
    if !(leaf > 0.0 && leaf.is_finite()) {
        return Err(CloudError::BadLeaf(leaf));
    }
    let mut cells: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut dropped = 0;
    for (i, p) in cloud.positions.iter().enumerate() {
        match voxel_key(p, leaf) {
            Some(k) => cells.entry(k).or_default().push(i),
            None => dropped += 1,
        }
    }
    let mut assignment = vec![None; cloud.len()];
    let mut positions = Vec::with_capacity(cells.len());
    let mut intensity = cloud.intensity.as_ref().map(|_| Vec::with_capacity(cells.len()));
    for (out_idx, members) in cells.values().enumerate() {
        let n = members.len() as f64;
        let mut sum = Vector3::zeros();
        for &m in members {
            sum += cloud.positions[m];
            assignment[m] = Some(out_idx);
        }
        positions.push(sum / n);
        if let (Some(dst), Some(src)) = (intensity.as_mut(), cloud.intensity.as_ref()) {
            dst.push(members.iter().map(|&m| src[m]).sum::<f64>() / n);
        }
    }
    if dropped > 0 {
        log::debug!("voxel downsample dropped {dropped} points outside the packable range");
    }
    Ok(Downsampled {
        cloud: PointCloud { positions, intensity, frame_id: cloud.frame_id },
        assignment,
        dropped,
    })
}

pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> Result<PointCloud, CloudError> {
    Ok(voxel_downsample_indexed(cloud, leaf)?.cloud)
}

/// ASCII PLY. Covariances, when given, become properties `cxx cxy cxz cyy cyz czz`.
pub fn ply_string(cloud: &PointCloud, covs: Option<&[SymMat3]>) -> Result<String, CloudError> {
    if let Some(c) = covs {
        if c.len() != cloud.len() {
            return Err(CloudError::CovarianceLength { points: cloud.len(), covs: c.len() });
        }
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {p}");
    }
    if cloud.intensity.is_some() {
        s.push_str("property double intensity\n");
    }
    if covs.is_some() {
        for p in ["cxx", "cxy", "cxz", "cyy", "cyz", "czz"] {
            let _ = writeln!(s, "property double {p}");
        }
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.positions.iter().enumerate() {
        let _ = write!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
        if let Some(w) = &cloud.intensity {
            let _ = write!(s, " {:?}", w[i]);
        }
        if let Some(c) = covs {
            for v in c[i].as_array() {
                let _ = write!(s, " {v:?}");
            }
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_ply(
    cloud: &PointCloud,
    covs: Option<&[SymMat3]>,
    path: impl AsRef<Path>,
) -> Result<(), CloudError> {
    let text = ply_string(cloud, covs)?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads back the ASCII PLY layout written by [`export_ply`].
pub fn parse_ply(text: &str) -> Result<(PointCloud, Option<Vec<SymMat3>>), CloudError> {
    let bad = |m: &str| CloudError::Ply(m.to_string());
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") if line.trim() != "format ascii 1.0" => {
                return Err(bad("only ascii 1.0 supported"))
            }
            Some("element") => {
                if tok.next() != Some("vertex") {
                    return Err(bad("unexpected element"));
                }
                count = tok.next().and_then(|n| n.parse::<usize>().ok());
            }
            Some("property") => {
                props.push(tok.nth(1).ok_or_else(|| bad("property without name"))?.to_string())
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("missing vertex count"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad("missing x/y/z")),
    };
    let iw = col("intensity");
    let icov: Option<Vec<usize>> =
        ["cxx", "cxy", "cxz", "cyy", "cyz", "czz"].iter().map(|n| col(n)).collect();
    let mut positions = Vec::with_capacity(count);
    let mut intensity = iw.map(|_| Vec::with_capacity(count));
    let mut covs = icov.as_ref().map(|_| Vec::with_capacity(count));
    for (row, line) in lines.take(count).enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CloudError::Ply(format!("vertex {row}: {e}")))?;
        if vals.len() != props.len() {
            return Err(CloudError::Ply(format!("vertex {row}: wrong property count")));
        }
        positions.push(Vector3::new(vals[ix], vals[iy], vals[iz]));
        if let (Some(dst), Some(i)) = (intensity.as_mut(), iw) {
            dst.push(vals[i]);
        }
        if let (Some(dst), Some(idx)) = (covs.as_mut(), icov.as_ref()) {
            let a: [f64; 6] = std::array::from_fn(|k| vals[idx[k]]);
            dst.push(SymMat3::from_array(a));
        }
    }
    if positions.len() != count {
        return Err(bad("fewer vertices than declared"));
    }
    Ok((PointCloud { positions, intensity, frame_id: 0 }, covs))
}

/// CSV with header `x,y,z[,intensity]`.
pub fn export_csv(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), CloudError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_csv(cloud, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv(cloud: &PointCloud, w: &mut impl Write) -> io::Result<()> {
    match &cloud.intensity {
        Some(_) => writeln!(w, "x,y,z,intensity")?,
        None => writeln!(w, "x,y,z")?,
    }
    for (i, p) in cloud.positions.iter().enumerate() {
        write!(w, "{:?},{:?},{:?}", p.x, p.y, p.z)?;
        if let Some(v) = &cloud.intensity {
            write!(w, ",{:?}", v[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}
