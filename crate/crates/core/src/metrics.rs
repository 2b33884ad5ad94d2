//! Group-decomposed evaluation.
//!
//! Metrics that need a group which is absent from the evaluation data are
//! reported as `None` (JSON `null`, CSV `NA`) rather than zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{self, ModelParams};
use crate::problems::{Dataset, Group, GroupTable};

pub const CSV_HEADER: &str = "spec_id,method,seed,avg_acc,worst_acc,dp_gap,eo_viol";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub group_table: GroupTable,
    pub average_accuracy: f64,
    pub worst_group_accuracy: Option<f64>,
    pub dp_gap: Option<f64>,
    pub eo_violation: Option<f64>,
    pub n_eval: u64,
}

fn rate(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn evaluate_predictions(preds: &[u8], labels: &[u8], attrs: &[u8]) -> Result<EvalReport> {
    if preds.len() != labels.len() || preds.len() != attrs.len() {
        return Err(Error::LengthMismatch {
            what: format!("{} predictions, {} labels, {} attributes", preds.len(), labels.len(), attrs.len()),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("evaluation data".into()));
    }
    let mut counts = [0u64; 4];
    let mut correct = [0u64; 4];
    let mut positive = [0u64; 4];
    for ((&p, &y), &a) in preds.iter().zip(labels).zip(attrs) {
        let g = Group::new(y, a).index();
        counts[g] += 1;
        correct[g] += u64::from(p == y);
        positive[g] += u64::from(p == 1);
    }

    let mut table = GroupTable::from_counts(counts);
    for g in 0..4 {
        table.accuracies[g] = rate(correct[g], counts[g]);
    }
    let n = preds.len() as u64;
    let average_accuracy = correct.iter().sum::<u64>() as f64 / n as f64;
    let worst_group_accuracy = table
        .accuracies
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|accs| accs.into_iter().fold(f64::INFINITY, f64::min));

    let pos_rate_a = |a: u8| {
        let (g0, g1) = (Group::new(0, a).index(), Group::new(1, a).index());
        rate(positive[g0] + positive[g1], counts[g0] + counts[g1])
    };
    let dp_gap = match (pos_rate_a(1), pos_rate_a(0)) {
        (Some(r1), Some(r0)) => Some((r1 - r0).abs()),
        _ => None,
    };
    let pos_rate = |g: Group| rate(positive[g.index()], counts[g.index()]);
    let eo_violation = (0..2u8)
        .map(|y| match (pos_rate(Group::new(y, 1)), pos_rate(Group::new(y, 0))) {
            (Some(r1), Some(r0)) => Some((r1 - r0).abs()),
            _ => None,
        })
        .collect::<Option<Vec<f64>>>()
        .map(|gaps| gaps.into_iter().fold(0.0, f64::max));

    Ok(EvalReport {
        group_table: table,
        average_accuracy,
        worst_group_accuracy,
        dp_gap,
        eo_violation,
        n_eval: n,
    })
}

pub fn evaluate(model: &ModelParams, ds: &Dataset) -> Result<EvalReport> {
    let preds = learner::predict_dataset(model, ds)?;
    evaluate_predictions(&preds, &ds.labels, &ds.attributes)
}

/// Mean per-example loss within each `(y, a)` group.
pub fn group_losses(model: &ModelParams, ds: &Dataset, loss: impl Fn(f64, u8) -> f64) -> Result<[f64; 4]> {
    let missing = ds.group_table().empty_groups();
    if !missing.is_empty() {
        return Err(Error::MissingGroups { missing });
    }
    let mut sums = [0.0; 4];
    let mut counts = [0u64; 4];
    for i in 0..ds.len() {
        let p = learner::predict_proba(model, ds.row(i))?;
        let g = ds.group(i).index();
        sums[g] += loss(p, ds.labels[i]);
        counts[g] += 1;
    }
    let mut out = [0.0; 4];
    for g in 0..4 {
        out[g] = sums[g] / counts[g] as f64;
    }
    Ok(out)
}

fn csv_field(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl EvalReport {
    /// One row under [`CSV_HEADER`].
    pub fn csv_row(&self, spec_id: &str, method: &str, seed: u64) -> String {
        format!(
            "{spec_id},{method},{seed},{},{},{},{}",
            self.average_accuracy,
            csv_field(self.worst_group_accuracy),
            csv_field(self.dp_gap),
            csv_field(self.eo_violation)
        )
    }

    pub fn group_accuracy(&self, group: Group) -> Option<f64> {
        self.group_table.accuracies[group.index()]
    }
}
