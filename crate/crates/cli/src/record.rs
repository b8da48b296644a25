//! Per-run result records, persisted as JSON.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use retrofeat_core::engine::LossBreakdown;
use retrofeat_core::metrics::{AccuracyMatrix, MetricSummary};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RECORD_FILE: &str = "record.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub base: usize,
    pub per_phase: usize,
    pub phases: usize,
}

/// Test confusion counts after one phase; rows are true classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: Vec<usize>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Every resolved config key.
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed: u64,
    /// `generation+compensation`.
    pub strategy: String,
    /// Command-line assignments that defined this cell of a sweep.
    pub overrides: Vec<(String, String)>,
    pub protocol: Protocol,
    pub matrix: AccuracyMatrix,
    pub metrics: MetricSummary,
    /// Per phase, per epoch mean losses.
    pub epoch_losses: Vec<Vec<LossBreakdown>>,
    pub confusion: Vec<Confusion>,
    pub phase_seconds: Vec<f64>,
    /// Interpretation choices that matter when comparing with other
    /// implementations.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunRecord {
    /// Row name in comparison tables and plot headers: the strategy, plus
    /// any non-strategy overrides.
    pub fn label(&self) -> String {
        let extra: Vec<String> = self
            .overrides
            .iter()
            .filter(|(k, _)| !k.starts_with("strategy.") && k != "train.seed")
            .map(|(k, v)| format!("{}={}", k, v))
            .collect();
        if extra.is_empty() {
            self.strategy.clone()
        } else {
            format!("{} {}", self.strategy, extra.join(" "))
        }
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `dir/record.json`; never replaces an existing record.
    pub fn write_new(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RECORD_FILE);
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Exists(path.clone())
            } else {
                e.into()
            }
        })?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Every `*/record.json` directly under `dir`, sorted by directory name.
pub fn load_all(dir: &Path) -> Result<Vec<RunRecord>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path().join(RECORD_FILE))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| RunRecord::read(p)).collect()
}

/// Directory name of a run: first 16 hex digits of the config hash, then
/// the seed.
pub fn run_dir_name(config_hash: &str, seed: u64) -> String {
    format!("{}-s{}", &config_hash[..16.min(config_hash.len())], seed)
}
