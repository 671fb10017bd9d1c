//! Closed-loop black-box training of the two encoders.
//!
//! A trial decodes an 86-vector into an [`MlpPair`], runs the odometry on
//! every training sequence and scores the trajectories. Suggestions come
//! from a coordinate-independent tree-structured Parzen estimator. The
//! study journal is one JSON object per line and is rewritten atomically
//! after every trial, so a killed study resumes exactly where it stopped.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::eval::{rte_loss_with, RteConfig};
use crate::features::RawFeatures;
use crate::mlp::{MlpError, MlpPair, MlpWeights, PARAM_COUNT};
use crate::odometry::{prepare_sequence, run_prepared, OdometryConfig, OdometryError, PreparedSequence, Trajectory};

/// Both networks' parameters: conversion first, then eigenvalue.
pub const TRAINABLE_PARAMS: usize = 2 * PARAM_COUNT;

/// Loss given to a failed trial when no finite loss has been seen yet.
pub const MIN_PENALTY: f64 = 1e3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("journal io: {0}")]
    Io(#[from] io::Error),
    #[error("journal line {line}: {msg}")]
    Journal { line: usize, msg: String },
    #[error("journal has {found} parameters per trial, study expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("training needs at least one sequence")]
    EmptyDataset,
    #[error("sequence {index}: {found} ground-truth poses for {expected} scans")]
    GroundTruth { index: usize, expected: usize, found: usize },
    #[error("sequence {index}: {source}")]
    Prepare { index: usize, source: OdometryError },
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("no completed trials")]
    NoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    /// Objective failed; `loss` holds the penalty.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub params: Vec<f64>,
    pub loss: f64,
    pub status: TrialStatus,
    /// Not journaled, so resumed trials have none.
    #[serde(skip)]
    pub wall_time: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Bandwidth {
    /// `max(range/√n, 1e-3)` with `range` the spread of the set's samples.
    #[default]
    ObservedRange,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    /// Per-parameter `[low, high]`. A single entry is broadcast to every
    /// dimension.
    pub bounds: Vec<(f64, f64)>,
    pub startup: usize,
    pub gamma: f64,
    pub candidates: usize,
    pub bandwidth: Bandwidth,
    pub budget: usize,
    pub seed: u64,
    /// Trials evaluated at once during the random startup phase.
    pub parallelism: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            bounds: vec![(-3.0, 3.0)],
            startup: 30,
            gamma: 0.25,
            candidates: 24,
            bandwidth: Bandwidth::ObservedRange,
            budget: 300,
            seed: 0,
            parallelism: 1,
        }
    }
}

impl TpeConfig {
    pub fn bound(&self, dim: usize) -> (f64, f64) {
        match self.bounds.as_slice() {
            [b] => *b,
            bs => bs[dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudyState {
    pub trials: Vec<Trial>,
}

impl StudyState {
    pub fn best(&self) -> Option<&Trial> {
        self.trials
            .iter()
            .filter(|t| t.status == TrialStatus::Complete)
            .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.trial.cmp(&b.trial)))
    }

    /// Best loss after each trial.
    pub fn best_curve(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trials
            .iter()
            .map(|t| {
                if t.status == TrialStatus::Complete {
                    best = best.min(t.loss);
                }
                best
            })
            .collect()
    }

    pub fn penalty(&self) -> f64 {
        let worst = self
            .trials
            .iter()
            .filter(|t| t.status == TrialStatus::Complete)
            .map(|t| t.loss)
            .fold(f64::NEG_INFINITY, f64::max);
        (10.0 * worst).max(MIN_PENALTY)
    }

    pub fn to_journal(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            s += &serde_json::to_string(t).expect("trial serializes");
            s.push('\n');
        }
        s
    }

    pub fn from_journal(text: &str, dim: usize) -> Result<Self, TrainError> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let t: Trial = serde_json::from_str(line)
                .map_err(|e| TrainError::Journal { line: i + 1, msg: e.to_string() })?;
            if t.trial != trials.len() {
                return Err(TrainError::Journal {
                    line: i + 1,
                    msg: format!("trial {} out of sequence, expected {}", t.trial, trials.len()),
                });
            }
            if t.params.len() != dim {
                return Err(TrainError::Dimension { expected: dim, found: t.params.len() });
            }
            trials.push(t);
        }
        Ok(Self { trials })
    }
}

/// Deterministic per-trial stream, so a resumed study draws exactly what an
/// uninterrupted one would.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// One-dimensional Gaussian Parzen estimator truncated to `[lo, hi]`,
/// mixed with a uniform prior that carries the weight of one sample.
struct Parzen<'a> {
    centers: &'a [f64],
    sigma: f64,
    lo: f64,
    hi: f64,
}

impl<'a> Parzen<'a> {
    fn new(centers: &'a [f64], lo: f64, hi: f64, rule: Bandwidth) -> Self {
        let sigma = match rule {
            Bandwidth::ObservedRange => {
                let min = centers.iter().copied().fold(f64::INFINITY, f64::min);
                let max = centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                ((max - min) / (centers.len() as f64).sqrt()).max(1e-3)
            }
            Bandwidth::Fixed(s) => s.max(1e-3),
        };
        Self { centers, sigma, lo, hi }
    }

    fn pdf(&self, x: f64) -> f64 {
        let n = self.centers.len() as f64;
        let width = self.hi - self.lo;
        let mut s = 1.0 / width;
        for &c in self.centers {
            let mass = normal_cdf((self.hi - c) / self.sigma) - normal_cdf((self.lo - c) / self.sigma);
            let z = (x - c) / self.sigma;
            let dens = (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt());
            s += dens / mass.max(1e-300);
        }
        s / (n + 1.0)
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let pick = rng.random_range(0..=self.centers.len());
        if pick == self.centers.len() {
            return rng.random_range(self.lo..=self.hi);
        }
        let c = self.centers[pick];
        for _ in 0..64 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let x = c + self.sigma * z;
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        c.clamp(self.lo, self.hi)
    }
}

fn uniform(dim: usize, cfg: &TpeConfig, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            let (lo, hi) = cfg.bound(d);
            rng.random_range(lo..=hi)
        })
        .collect()
}

/// Next parameter vector for a `dim`-dimensional search.
pub fn tpe_suggest(state: &StudyState, dim: usize, cfg: &TpeConfig, rng: &mut impl Rng) -> Vec<f64> {
    let n = state.trials.len();
    if n < cfg.startup || n < 2 {
        return uniform(dim, cfg, rng);
    }
    let mut order: Vec<&Trial> = state.trials.iter().collect();
    order.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.trial.cmp(&b.trial)));
    let n_good = ((cfg.gamma * n as f64).ceil() as usize).clamp(1, n - 1);
    let (good, bad) = order.split_at(n_good);

    let mut gx = vec![0.0; good.len()];
    let mut bx = vec![0.0; bad.len()];
    (0..dim)
        .map(|d| {
            let (lo, hi) = cfg.bound(d);
            gx.iter_mut().zip(good).for_each(|(x, t)| *x = t.params[d]);
            bx.iter_mut().zip(bad).for_each(|(x, t)| *x = t.params[d]);
            let l = Parzen::new(&gx, lo, hi, cfg.bandwidth);
            let g = Parzen::new(&bx, lo, hi, cfg.bandwidth);
            let mut best = (f64::NEG_INFINITY, lo);
            for _ in 0..cfg.candidates.max(1) {
                let x = l.sample(rng);
                let score = l.pdf(x).ln() - g.pdf(x).ln();
                if score > best.0 {
                    best = (score, x);
                }
            }
            best.1
        })
        .collect()
}

/// A TPE study over a fixed-dimension box, optionally backed by a journal.
#[derive(Debug, Clone)]
pub struct Study {
    pub state: StudyState,
    pub cfg: TpeConfig,
    pub dim: usize,
    journal: Option<PathBuf>,
    queued: Vec<Vec<f64>>,
}

impl Study {
    pub fn new(dim: usize, cfg: TpeConfig) -> Self {
        Self { state: StudyState::default(), cfg, dim, journal: None, queued: Vec::new() }
    }

    /// Opens (or starts) a study persisted at `path`.
    pub fn with_journal(dim: usize, cfg: TpeConfig, path: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let path = path.into();
        let state = match fs::read_to_string(&path) {
            Ok(text) => StudyState::from_journal(&text, dim)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => StudyState::default(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self { state, cfg, dim, journal: Some(path), queued: Vec::new() })
    }

    /// Fixed vectors evaluated as trials 0, 1, … before any suggestion.
    pub fn enqueue(&mut self, params: Vec<f64>) {
        assert_eq!(params.len(), self.dim, "queued trial has the wrong dimension");
        self.queued.push(params);
    }

    pub fn next_index(&self) -> usize {
        self.state.trials.len()
    }

    /// Parameters for trial `index`, given the trials before it.
    fn ask_at(&self, index: usize) -> Vec<f64> {
        if let Some(q) = self.queued.get(index) {
            return q.clone();
        }
        let mut rng = trial_rng(self.cfg.seed, index);
        tpe_suggest(&self.state, self.dim, &self.cfg, &mut rng)
    }

    pub fn ask(&self) -> Vec<f64> {
        self.ask_at(self.next_index())
    }

    /// Records a trial outcome; `None` or a non-finite loss is a failure.
    pub fn tell(&mut self, params: Vec<f64>, loss: Option<f64>, wall_time: Option<Duration>) -> Result<&Trial, TrainError> {
        let (loss, status) = match loss {
            Some(l) if l.is_finite() => (l, TrialStatus::Complete),
            _ => (self.state.penalty(), TrialStatus::Failed),
        };
        let trial = self.next_index();
        self.state.trials.push(Trial { trial, params, loss, status, wall_time });
        self.persist()?;
        Ok(self.state.trials.last().unwrap())
    }

    fn persist(&self) -> Result<(), TrainError> {
        let Some(path) = &self.journal else { return Ok(()) };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile_in(dir, path)?;
        tmp.1.write_all(self.state.to_journal().as_bytes())?;
        tmp.1.sync_all()?;
        drop(tmp.1);
        fs::rename(&tmp.0, path)?;
        Ok(())
    }

    /// Runs trials until the budget is reached. During the random startup
    /// phase up to `parallelism` trials are evaluated at once; afterwards
    /// every suggestion waits for the previous result, so the trial
    /// sequence does not depend on the thread count.
    pub fn optimize<F>(&mut self, objective: F) -> Result<(), TrainError>
    where
        F: Fn(&[f64]) -> Option<f64> + Sync,
    {
        while self.next_index() < self.cfg.budget {
            let start = self.next_index();
            let batch = if start < self.cfg.startup.max(self.queued.len()) {
                self.cfg
                    .parallelism
                    .max(1)
                    .min(self.cfg.startup.max(self.queued.len()) - start)
                    .min(self.cfg.budget - start)
            } else {
                1
            };
            // startup suggestions do not look at the state, so they can be drawn up front
            let params: Vec<Vec<f64>> = (start..start + batch).map(|i| self.ask_at(i)).collect();
            let results: Vec<(Option<f64>, Duration)> = params
                .par_iter()
                .map(|p| {
                    let t = Instant::now();
                    let loss = objective(p);
                    (loss, t.elapsed())
                })
                .collect();
            for (p, (loss, dt)) in params.into_iter().zip(results) {
                let t = self.tell(p, loss, Some(dt))?;
                log::info!("trial {} loss {:.6} ({:?})", t.trial, t.loss, t.status);
            }
        }
        Ok(())
    }
}

fn tempfile_in(dir: &Path, target: &Path) -> io::Result<(PathBuf, fs::File)> {
    let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("journal");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let f = fs::File::create(&tmp)?;
    Ok((tmp, f))
}

/// Conversion network parameters followed by the eigenvalue network's.
pub fn encode_params(pair: &MlpPair) -> Vec<f64> {
    let mut v = pair.conversion.as_slice().to_vec();
    v.extend_from_slice(pair.eigenvalue.as_slice());
    v
}

pub fn decode_params(v: &[f64]) -> Result<MlpPair, MlpError> {
    if v.len() != TRAINABLE_PARAMS {
        return Err(MlpError::WrongLength(v.len()));
    }
    Ok(MlpPair {
        conversion: MlpWeights::from_slice(&v[..PARAM_COUNT])?,
        eigenvalue: MlpWeights::from_slice(&v[PARAM_COUNT..])?,
    })
}

/// Zero conversion (pure Euclidean association) and an eigenvalue network
/// that always answers the plane shape.
pub fn plane_equivalent_pair() -> MlpPair {
    MlpPair { conversion: MlpWeights::zeros(), eigenvalue: MlpWeights::constant(Vector3::new(0.0, 1.0, 1.0)) }
}

#[derive(Debug, Clone)]
pub struct TrainingSequence {
    pub scans: Vec<PointCloud>,
    pub ground_truth: Trajectory,
    pub external: Option<Vec<RawFeatures>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub odometry: OdometryConfig,
    pub tpe: TpeConfig,
    pub rte: RteConfig,
    /// Seed the study with the plane-equivalent and all-zero pairs.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            odometry: OdometryConfig::default(),
            tpe: TpeConfig::default(),
            rte: RteConfig::default(),
            warm_start: true,
        }
    }
}

/// Training data with every weight-independent step already done.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub sequences: Vec<(PreparedSequence, Trajectory)>,
}

impl PreparedDataset {
    pub fn prepare(dataset: &[TrainingSequence], cfg: &OdometryConfig) -> Result<Self, TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let sequences = dataset
            .iter()
            .enumerate()
            .map(|(index, s)| {
                if s.ground_truth.len() != s.scans.len() {
                    return Err(TrainError::GroundTruth {
                        index,
                        expected: s.scans.len(),
                        found: s.ground_truth.len(),
                    });
                }
                let seq = prepare_sequence(&s.scans, s.external.as_deref(), None, cfg)
                    .map_err(|source| TrainError::Prepare { index, source })?;
                Ok((seq, s.ground_truth.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { sequences })
    }

    /// Mean trajectory loss over all sequences, `None` if any run aborts or
    /// cannot be scored.
    pub fn loss(&self, pair: &MlpPair, odo: &OdometryConfig, rte: &RteConfig) -> Option<f64> {
        let mut sum = 0.0;
        for (seq, gt) in &self.sequences {
            let run = match run_prepared(seq, pair, odo) {
                Ok(r) => r,
                Err(e) => {
                    log::debug!("trial run aborted: {e}");
                    return None;
                }
            };
            sum += rte_loss_with(gt, &run.trajectory, rte).ok()?;
        }
        Some(sum / self.sequences.len() as f64)
    }
}

/// Runs (or resumes) a study and returns the best pair with the final state.
pub fn train(
    dataset: &[TrainingSequence],
    cfg: &TrainConfig,
    journal: Option<&Path>,
) -> Result<(MlpPair, StudyState), TrainError> {
    let prepared = PreparedDataset::prepare(dataset, &cfg.odometry)?;
    train_prepared(&prepared, cfg, journal)
}

pub fn train_prepared(
    prepared: &PreparedDataset,
    cfg: &TrainConfig,
    journal: Option<&Path>,
) -> Result<(MlpPair, StudyState), TrainError> {
    let mut study = match journal {
        Some(p) => Study::with_journal(TRAINABLE_PARAMS, cfg.tpe.clone(), p)?,
        None => Study::new(TRAINABLE_PARAMS, cfg.tpe.clone()),
    };
    if cfg.warm_start {
        study.enqueue(encode_params(&plane_equivalent_pair()));
        study.enqueue(vec![0.0; TRAINABLE_PARAMS]);
    }
    study.optimize(|p| {
        let pair = decode_params(p).ok()?;
        prepared.loss(&pair, &cfg.odometry, &cfg.rte)
    })?;
    let best = study.state.best().ok_or(TrainError::NoTrials)?;
    Ok((decode_params(&best.params)?, study.state))
}
