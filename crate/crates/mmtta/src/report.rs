//! Per-batch metrics records, run aggregates, reports, and the run manifest.
//!
//! Records are emitted as JSON-lines (one record per line); the report embeds
//! the same records next to the config echo and final aggregates. Everything
//! except the report's wall-clock field is deterministic for a fixed
//! (config, scenario, stream) triple.

use serde::{Deserialize, Serialize};

use crate::config::AdaptationConfig;

/// One batch's metrics. Partition counts appear only when tracing is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub samples: usize,
    pub loss_g: f64,
    pub loss_ra: f64,
    pub loss_bal: f64,
    pub loss_c: f64,
    pub loss_total: f64,
    pub acc_fused: f64,
    pub acc_source: f64,
    pub acc_gda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_m1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_m2: Option<usize>,
}

/// Stream-level aggregates: accuracies over all samples, mean losses over
/// batches, and partition totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregates {
    pub batches: usize,
    pub samples: usize,
    pub acc_fused: Option<f64>,
    pub acc_source: Option<f64>,
    pub acc_gda: Option<f64>,
    pub mean_loss_g: f64,
    pub mean_loss_ra: f64,
    pub mean_loss_bal: f64,
    pub mean_loss_c: f64,
    pub mean_loss_total: f64,
    pub partition_m1_total: usize,
    pub partition_m2_total: usize,
}

/// Full run output: config echo, per-batch records, aggregates, wall-clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: AdaptationConfig,
    pub records: Vec<BatchRecord>,
    pub aggregates: RunAggregates,
    pub wall_clock_seconds: f64,
}

/// Written before a run starts; ties outputs to their exact inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: AdaptationConfig,
    pub seed: u64,
    /// SHA-256 of the input stream file, when the run reads one.
    pub input_hash: Option<String>,
    pub input_path: Option<String>,
    pub scenario_path: Option<String>,
    pub output_paths: Vec<String>,
}
