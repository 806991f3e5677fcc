//! JSON report emitted by every command. One schema, versioned; sections not
//! relevant to a command are omitted.

use serde::Serialize;

use cibhash::retrieval::PrPoint;
use cibhash::trainer::{EpochLoss, GradCheckReport, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// One sweep table row.
#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub maps: Vec<f64>,
    pub median_map: f64,
}

/// Metric values; all in [0, 1].
#[derive(Debug, Default, Serialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_at_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_at_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pr_curve: Option<Vec<PrPoint>>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub schema: u32,
    pub command: String,
    pub run_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Echo of the effective training config (after mode/flag overrides).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_losses: Option<Vec<EpochLoss>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<SweepRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradCheckReport>,
    pub wall_time_ms: u64,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            command: command.to_string(),
            run_id: String::new(),
            seed: None,
            config: None,
            method: None,
            metrics: None,
            epoch_losses: None,
            checkpoint: None,
            param: None,
            rows: None,
            gradcheck: None,
            wall_time_ms: 0,
        }
    }

    /// Derive the run id from the command, config echo, and seed, so
    /// identical invocations share an id.
    pub fn finalize_run_id(&mut self) {
        let mut material = self.command.clone();
        if let Some(cfg) = &self.config {
            material.push_str(&serde_json::to_string(cfg).unwrap());
        }
        if let Some(seed) = self.seed {
            material.push_str(&seed.to_string());
        }
        if let Some(method) = &self.method {
            material.push_str(method);
        }
        if let Some(param) = &self.param {
            material.push_str(param);
        }
        self.run_id = format!("{:016x}", fnv1a64(material.as_bytes()));
    }

    pub fn write(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).unwrap();
        text.push('\n');
        std::fs::write(path, text)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
