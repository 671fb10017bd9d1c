use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Config;

/// Written next to every output. Holds no wall-clock data, so identical
/// runs produce identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub config: Config,
    pub inputs: BTreeMap<&'static str, PathBuf>,
    pub outputs: BTreeMap<&'static str, PathBuf>,
    pub summary: BTreeMap<&'static str, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &'static str, config: &Config) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: config.seed,
            threads: rayon::current_num_threads(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, key: &'static str, path: &Path) -> &mut Self {
        self.inputs.insert(key, path.to_path_buf());
        self
    }

    pub fn output(&mut self, key: &'static str, path: &Path) -> &mut Self {
        self.outputs.insert(key, path.to_path_buf());
        self
    }

    pub fn note(&mut self, key: &'static str, value: impl Serialize) -> &mut Self {
        self.summary.insert(key, serde_json::to_value(value).expect("summary value serializes"));
        self
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// `<path>.<suffix>` beside an output file.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
