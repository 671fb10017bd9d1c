//! KITTI pose files and relative trajectory error with development-kit
//! window semantics.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{nearest_rotation, Pose};
use crate::odometry::Trajectory;

/// Sub-trajectory lengths of the KITTI odometry benchmark, meters.
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

const ORTHO_REJECT: f64 = 1e-3;
const ORTHO_REPAIR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: expected 12 values, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: rotation is not orthonormal (error {error:.2e})")]
    NotOrthonormal { line: usize, error: f64 },
    #[error("trajectories differ in length: ground truth {gt}, estimate {est}")]
    LengthMismatch { gt: usize, est: usize },
    #[error("trajectory is shorter than the smallest evaluation length")]
    TooShort,
    #[error("calibration has no `Tr:` entry")]
    MissingCalib,
}

#[derive(Debug, Clone)]
pub struct PoseFile {
    pub trajectory: Trajectory,
    /// Lines whose rotation drifted past 1e-6 and was re-orthonormalized.
    pub repaired: Vec<usize>,
}

/// Parses 12 values per line: rows 1–3 of a homogeneous matrix, row-major.
pub fn parse_kitti_poses(text: &str) -> Result<PoseFile, EvalError> {
    let mut poses = Vec::new();
    let mut repaired = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EvalError::Parse { line: line_no, msg: e.to_string() })?;
        if vals.len() != 12 {
            return Err(EvalError::FieldCount { line: line_no, found: vals.len() });
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::Parse { line: line_no, msg: "non-finite value".into() });
        }
        let mut rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if err > ORTHO_REJECT || rotation.determinant() <= 0.0 {
            return Err(EvalError::NotOrthonormal { line: line_no, error: err });
        }
        if err > ORTHO_REPAIR {
            rotation = nearest_rotation(&rotation);
            repaired.push(line_no);
        }
        poses.push(Pose::new(rotation, translation));
    }
    Ok(PoseFile { trajectory: Trajectory::from_poses(poses), repaired })
}

/// The `Tr:` entry of a KITTI odometry calibration file, which maps
/// velodyne coordinates into the left camera frame.
pub fn parse_kitti_calib(text: &str) -> Result<Pose, EvalError> {
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix("Tr:") else { continue };
        let vals = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EvalError::Parse { line: i + 1, msg: e.to_string() })?;
        if vals.len() != 12 {
            return Err(EvalError::FieldCount { line: i + 1, found: vals.len() });
        }
        let rotation = Matrix3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if err > ORTHO_REJECT || rotation.determinant() <= 0.0 {
            return Err(EvalError::NotOrthonormal { line: i + 1, error: err });
        }
        return Ok(Pose::new(nearest_rotation(&rotation), Vector3::new(vals[3], vals[7], vals[11])));
    }
    Err(EvalError::MissingCalib)
}

/// Re-expresses a trajectory of one sensor in a rigidly attached frame:
/// `X·T_k·X⁻¹` for the extrinsic `X` mapping sensor into that frame.
pub fn change_frame(traj: &Trajectory, extrinsic: &Pose) -> Trajectory {
    let inv = extrinsic.inverse();
    Trajectory::from_poses(traj.poses().iter().map(|p| extrinsic.compose(p).compose(&inv)).collect())
}

pub fn read_kitti_poses(path: impl AsRef<Path>) -> Result<Trajectory, EvalError> {
    let file = parse_kitti_poses(&fs::read_to_string(path)?)?;
    if !file.repaired.is_empty() {
        log::warn!("re-orthonormalized {} pose rotations", file.repaired.len());
    }
    Ok(file.trajectory)
}

pub fn format_kitti_poses(traj: &Trajectory) -> String {
    let mut s = String::new();
    for p in traj.poses() {
        let (r, t) = (&p.rotation, &p.translation);
        let vals = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ];
        let line: Vec<String> = vals.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn write_kitti_poses(traj: &Trajectory, path: impl AsRef<Path>) -> Result<(), EvalError> {
    fs::write(path, format_kitti_poses(traj))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RteConfig {
    pub lengths: Vec<f64>,
    pub stride: usize,
}

impl Default for RteConfig {
    fn default() -> Self {
        Self { lengths: KITTI_LENGTHS.to_vec(), stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthError {
    pub length: f64,
    pub windows: usize,
    /// Percent: meters of error per 100 m.
    pub translational: f64,
    /// Degrees per meter.
    pub rotational: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RteReport {
    pub per_length: Vec<LengthError>,
    /// Mean over every evaluated (start, length) window, percent.
    pub t_rte: f64,
    /// Mean over every evaluated window, degrees per meter.
    pub r_rte: f64,
    pub windows: usize,
    /// No window of any length fit inside the trajectory.
    pub too_short: bool,
}

impl RteReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length_m,windows,t_err_pct,r_err_deg_per_m\n");
        for l in &self.per_length {
            let _ = writeln!(s, "{},{},{:.6},{:.8}", l.length, l.windows, l.translational, l.rotational);
        }
        let _ = writeln!(s, "all,{},{:.6},{:.8}", self.windows, self.t_rte, self.r_rte);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>8} {:>8} {:>12} {:>14}\n", "length", "windows", "t_RTE [%]", "r_RTE [deg/m]");
        for l in &self.per_length {
            let _ = writeln!(s, "{:>8} {:>8} {:>12.4} {:>14.6}", l.length, l.windows, l.translational, l.rotational);
        }
        let _ = writeln!(s, "{:>8} {:>8} {:>12.4} {:>14.6}", "mean", self.windows, self.t_rte, self.r_rte);
        s
    }
}

/// Cumulative path length of the ground truth at each frame.
pub fn path_distances(traj: &Trajectory) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len());
    let mut acc = 0.0;
    let poses = traj.poses();
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += (p.translation - poses[i - 1].translation).norm();
        }
        out.push(acc);
    }
    out
}

/// First frame at or after `start` whose distance from `start` reaches `length`.
fn window_end(dist: &[f64], start: usize, length: f64) -> Option<usize> {
    let target = dist[start] + length;
    let j = start + dist[start..].partition_point(|&d| d < target);
    (j < dist.len()).then_some(j)
}

struct Window {
    length_idx: usize,
    t_err: f64,
    r_err: f64,
    delta: f64,
}

fn windows(gt: &Trajectory, est: &Trajectory, cfg: &RteConfig) -> Result<Vec<Window>, EvalError> {
    if gt.len() != est.len() {
        return Err(EvalError::LengthMismatch { gt: gt.len(), est: est.len() });
    }
    let dist = path_distances(gt);
    let (g, e) = (gt.poses(), est.poses());
    let starts: Vec<usize> = (0..gt.len()).step_by(cfg.stride.max(1)).collect();
    let per_start: Vec<Vec<Window>> = starts
        .par_iter()
        .map(|&i| {
            cfg.lengths
                .iter()
                .enumerate()
                .filter_map(|(li, &len)| {
                    let j = window_end(&dist, i, len)?;
                    let dg = g[i].inverse().compose(&g[j]);
                    let de = e[i].inverse().compose(&e[j]);
                    let err = dg.inverse().compose(&de);
                    Some(Window {
                        length_idx: li,
                        t_err: err.translation.norm() / len,
                        r_err: err.rotation_angle() / len,
                        delta: (dg.translation - de.translation).norm(),
                    })
                })
                .collect()
        })
        .collect();
    Ok(per_start.into_iter().flatten().collect())
}

/// Relative trajectory error over distance-selected windows.
pub fn rte(gt: &Trajectory, est: &Trajectory) -> Result<RteReport, EvalError> {
    rte_with(gt, est, &RteConfig::default())
}

pub fn rte_with(gt: &Trajectory, est: &Trajectory, cfg: &RteConfig) -> Result<RteReport, EvalError> {
    let ws = windows(gt, est, cfg)?;
    let mut per_length: Vec<LengthError> = cfg
        .lengths
        .iter()
        .map(|&length| LengthError { length, windows: 0, translational: 0.0, rotational: 0.0 })
        .collect();
    let (mut t_sum, mut r_sum) = (0.0, 0.0);
    for w in &ws {
        let l = &mut per_length[w.length_idx];
        l.windows += 1;
        l.translational += w.t_err;
        l.rotational += w.r_err;
        t_sum += w.t_err;
        r_sum += w.r_err;
    }
    for l in per_length.iter_mut().filter(|l| l.windows > 0) {
        l.translational = 100.0 * l.translational / l.windows as f64;
        l.rotational = l.rotational.to_degrees() / l.windows as f64;
    }
    let n = ws.len();
    Ok(RteReport {
        per_length,
        t_rte: if n > 0 { 100.0 * t_sum / n as f64 } else { 0.0 },
        r_rte: if n > 0 { r_sum.to_degrees() / n as f64 } else { 0.0 },
        windows: n,
        too_short: n == 0,
    })
}

/// Mean over lengths of the mean `‖δt_gt − δt_est‖` (meters), where `δt` is
/// the start-frame-relative translation of each window. Lengths with no
/// window are left out of the outer mean.
pub fn rte_loss(gt: &Trajectory, est: &Trajectory) -> Result<f64, EvalError> {
    rte_loss_with(gt, est, &RteConfig::default())
}

pub fn rte_loss_with(gt: &Trajectory, est: &Trajectory, cfg: &RteConfig) -> Result<f64, EvalError> {
    let ws = windows(gt, est, cfg)?;
    let mut sum = vec![0.0; cfg.lengths.len()];
    let mut count = vec![0usize; cfg.lengths.len()];
    for w in &ws {
        sum[w.length_idx] += w.delta;
        count[w.length_idx] += 1;
    }
    let means: Vec<f64> =
        sum.iter().zip(&count).filter(|(_, &c)| c > 0).map(|(s, &c)| s / c as f64).collect();
    if means.is_empty() {
        return Err(EvalError::TooShort);
    }
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}
