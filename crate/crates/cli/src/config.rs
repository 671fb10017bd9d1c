use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gloam::{OdometryConfig, RteConfig, TpeConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Layered run configuration: defaults, then the TOML file, then flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub odometry: OdometryConfig,
    pub tpe: TpeConfig,
    pub rte: RteConfig,
    pub warm_start: Option<bool>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.odometry;
        if !(o.voxel_leaf > 0.0 && o.voxel_leaf.is_finite()) {
            bail!("odometry.voxel_leaf must be positive");
        }
        if o.registration.k < 3 || o.descriptor_k < 3 {
            bail!("neighborhood sizes must be at least 3");
        }
        if !(o.registration.epsilon > 0.0) {
            bail!("odometry.registration.epsilon must be positive");
        }
        if self.rte.lengths.is_empty() || self.rte.lengths.iter().any(|l| !(*l > 0.0)) || self.rte.stride == 0 {
            bail!("rte.lengths must be positive and rte.stride nonzero");
        }
        if !(self.tpe.gamma > 0.0 && self.tpe.gamma < 1.0) || self.tpe.bounds.is_empty() {
            bail!("tpe.gamma must lie in (0, 1) and tpe.bounds must be non-empty");
        }
        if self.tpe.bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            bail!("every tpe bound needs low < high");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig {
            odometry: self.odometry.clone(),
            tpe: self.tpe.clone(),
            rte: self.rte.clone(),
            ..TrainConfig::default()
        };
        t.tpe.seed = self.seed;
        if let Some(w) = self.warm_start {
            t.warm_start = w;
        }
        t
    }
}

/// One entry of a training dataset manifest.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub scans: PathBuf,
    pub poses: Option<PathBuf>,
    /// Directory of per-scan `.glf` descriptor files named like the scans.
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(rename = "sequence")]
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    /// Reads the manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading dataset {}", path.display()))?;
        let mut m: DatasetManifest =
            toml::from_str(&text).with_context(|| format!("parsing dataset {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (i, s) in m.sequences.iter_mut().enumerate() {
            s.scans = base.join(&s.scans);
            s.features = s.features.as_ref().map(|f| base.join(f));
            match &s.poses {
                Some(p) => s.poses = Some(base.join(p)),
                None => bail!("sequence {i} has no ground-truth poses"),
            }
        }
        if m.sequences.is_empty() {
            bail!("dataset has no sequences");
        }
        Ok(m)
    }
}
