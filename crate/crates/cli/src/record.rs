use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::Kind;

pub const RECORD_FILE: &str = "run_record.json";
pub const META_FILE: &str = "run_meta.json";

/// Mean and population standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let (mean, std) = biaslab::equivalence::mean_std(values);
        Summary {
            mean,
            std,
            n: values.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

/// Wall-clock metadata, kept out of the record so reruns compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub tool_version: String,
    pub kind: Kind,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub status: Status,
    pub error: Option<String>,
    /// Per-seed result files, relative to the run directory.
    pub results: Vec<String>,
    /// Aggregate reports and tables, relative to the run directory.
    pub outputs: Vec<String>,
    pub summary: BTreeMap<String, Summary>,
    #[serde(skip)]
    pub meta: Option<RunMeta>,
}

impl RunRecord {
    pub fn new(kind: Kind, config_hash: String, seeds: Vec<u64>) -> Self {
        RunRecord {
            tool: "biaslab".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            kind,
            config_hash,
            seeds,
            status: Status::Ok,
            error: None,
            results: Vec::new(),
            outputs: Vec::new(),
            summary: BTreeMap::new(),
            meta: None,
        }
    }
}
