//! Run reports: the metrics a run produced, the config it echoed, and a
//! provenance block tying the two together. Reports are pretty-printed JSON
//! (one field per line) so CI diffs stay reviewable.

use crate::error::{Error, Result};
use crate::io::checkpoint::atomic_write;
use crate::io::config::ConfigFile;
use crate::pipeline::MetricsReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Provenance { config_hash, seed, version: env!("CARGO_PKG_VERSION").to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigFile,
    pub provenance: Provenance,
    /// Present when the run allocated ranks from warmup loss reductions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_plan: Option<crate::lowrank::RankPlan>,
    pub metrics: MetricsReport,
}

impl RunReport {
    /// Equality contract for reproducibility checks: two runs with equal
    /// provenance must agree on everything except wall-clock timing.
    pub fn equal_modulo_timing(&self, other: &RunReport) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.metrics.timing = Default::default();
        b.metrics.timing = Default::default();
        a == b
    }
}

/// Serialize to pretty JSON with a trailing newline and write atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
