//! CSV tables behind the overlap ablation, the correlation scatter and the
//! sweep curve. No rendering happens here.

use std::fs;
use std::path::{Path, PathBuf};

use biaslab::equivalence::EquivalenceReport;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::config::Kind;
use crate::record::{RunRecord, Status, RECORD_FILE};
use crate::runner::{SweepEntry, SweepReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    OverlapAblation,
    CorrelationScatter,
    SweepCurve,
}

impl PlotKind {
    pub fn header(self) -> &'static [&'static str] {
        match self {
            PlotKind::OverlapAblation => &["eta", "epsilon", "pred_delta", "obs_delta"],
            PlotKind::CorrelationScatter => &["pair_id", "epsilon", "obs_delta"],
            PlotKind::SweepCurve => &["pair_id", "alpha", "corollary_ratio", "obs_delta", "obs_delta_std", "pred_delta"],
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::OverlapAblation => "overlap_ablation.csv",
            PlotKind::CorrelationScatter => "correlation_scatter.csv",
            PlotKind::SweepCurve => "sweep_curve.csv",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("reading {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("run record {path} is missing `{field}`: {reason}")]
    Missing { path: PathBuf, field: String, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PlotError> {
    let text = fs::read_to_string(path).map_err(|e| PlotError::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| PlotError::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Accepts a run directory or the path of its record file.
pub fn record_path(run: &Path) -> PathBuf {
    if run.is_dir() {
        run.join(RECORD_FILE)
    } else {
        run.to_path_buf()
    }
}

/// Loads the equivalence reports a run produced, as sweep entries.
pub fn load_entries(run: &Path) -> Result<Vec<SweepEntry>, PlotError> {
    let path = record_path(run);
    let record: RunRecord = read_json(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let missing = |field: &str, reason: String| PlotError::Missing {
        path: path.clone(),
        field: field.into(),
        reason,
    };
    if record.status != Status::Ok {
        return Err(missing("status", "the run did not finish".into()));
    }
    let wanted = match record.kind {
        Kind::Sweep => "sweep.json",
        Kind::ValidatePair => "equivalence.json",
        other => return Err(missing("outputs", format!("{} runs carry no equivalence reports", other.verb()))),
    };
    if !record.outputs.iter().any(|o| o == wanted) {
        return Err(missing("outputs", format!("{wanted} is not listed")));
    }
    if record.kind == Kind::Sweep {
        let sweep: SweepReport = read_json(&dir.join(wanted))?;
        return Ok(sweep.entries);
    }
    let report: EquivalenceReport = read_json(&dir.join(wanted))?;
    Ok(vec![SweepEntry {
        pair_id: format!("{}|{}", report.spec1_id, report.spec2_id),
        alpha: f64::NAN,
        corollary_ratio: None,
        eta_target: None,
        overlap_control: 0.0,
        report,
    }])
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

/// Renders the table for `kind`; an empty run gives the header alone.
pub fn render(entries: &[SweepEntry], kind: PlotKind) -> Result<String, PlotError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(kind.header())?;
    for e in entries {
        let r = &e.report;
        let row: Vec<String> = match kind {
            PlotKind::OverlapAblation => vec![num(r.eta.value), num(r.epsilon), num(r.predicted_delta), num(r.observed_delta)],
            PlotKind::CorrelationScatter => vec![e.pair_id.clone(), num(r.epsilon), num(r.observed_delta)],
            PlotKind::SweepCurve => vec![
                e.pair_id.clone(),
                num(e.alpha),
                e.corollary_ratio.map_or_else(|| "NA".into(), num),
                num(r.observed_delta),
                num(r.observed_delta_std),
                num(r.predicted_delta),
            ],
        };
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| PlotError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Writes the table for `kind` into `out_dir` and returns its path.
pub fn emit_plot_data(run: &Path, kind: PlotKind, out_dir: &Path) -> Result<PathBuf, PlotError> {
    let entries = load_entries(run)?;
    let csv = render(&entries, kind)?;
    let path = out_dir.join(kind.file_name());
    fs::create_dir_all(out_dir)
        .and_then(|_| fs::write(&path, csv))
        .map_err(|e| PlotError::Read {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    Ok(path)
}
