//! Executes resolved configs and persists their artifacts.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use biaslab::debias::RunLog;
use biaslab::equivalence::{
    self, alpha_to_ratio, fit_and_measure, overlap_control_for, EquivalenceReport, ModelResult, PairLeg,
};
use biaslab::metrics::CSV_HEADER;
use biaslab::problems::{empirical_alpha, sample, Mechanism, ProblemSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Kind};
use crate::record::{RunMeta, RunRecord, Status, Summary, META_FILE, RECORD_FILE};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("output directory {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Core(#[from] biaslab::Error),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Tracks files written under the run directory.
struct Artifacts<'a> {
    root: &'a Path,
    results: Vec<String>,
    outputs: Vec<String>,
}

impl Artifacts<'_> {
    fn write(&self, rel: &str, bytes: &[u8]) -> Result<(), RunError> {
        let path = self.root.join(rel);
        let io_err = |source| RunError::Io { path: path.clone(), source };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        fs::write(&path, bytes).map_err(io_err)
    }

    fn result<T: Serialize>(&mut self, rel: String, value: &T) -> Result<(), RunError> {
        self.write(&rel, &pretty(value))?;
        self.results.push(rel);
        Ok(())
    }

    fn output(&mut self, rel: &str, bytes: &[u8]) -> Result<(), RunError> {
        self.write(rel, bytes)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }
}

fn pretty<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report types serialize");
    bytes.push(b'\n');
    bytes
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// File-name-safe form of a spec id.
pub fn slug(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

/// Creates `out`, runs the experiment and writes its record. A failed run
/// still leaves a record with `status: failed`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, RunError> {
    fs::create_dir_all(out).map_err(|source| RunError::Output {
        path: out.to_path_buf(),
        source,
    })?;
    let started = now_ms();
    let hash = cfg.hash();
    let mut record = RunRecord::new(cfg.kind, hash.clone(), cfg.seeds.clone());
    let mut art = Artifacts {
        root: out,
        results: Vec::new(),
        outputs: Vec::new(),
    };

    let mut resolved = biaslab::canonical_json(cfg).into_bytes();
    resolved.push(b'\n');
    art.output("config.resolved.json", &resolved)?;

    let outcome = match cfg.kind {
        Kind::Generate => generate(cfg, &mut art, &mut record),
        Kind::Train => train(cfg, &mut art, &mut record, true),
        Kind::Measure => train(cfg, &mut art, &mut record, false),
        Kind::ValidatePair => validate(cfg, &mut art, &mut record),
        Kind::Transfer => transfer(cfg, &mut art, &mut record),
        Kind::Sweep => sweep(cfg, &mut art, &mut record),
    };
    if let Err(e) = &outcome {
        log::error!("{} run failed: {e}", cfg.kind.verb());
        record.status = Status::Failed;
        record.error = Some(e.to_string());
    }
    record.results = art.results.clone();
    record.outputs = art.outputs.clone();
    art.write(RECORD_FILE, &pretty(&record))?;
    let meta = RunMeta {
        config_hash: hash,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    };
    art.write(META_FILE, &pretty(&meta))?;
    record.meta = Some(meta);
    outcome.map(|_| record)
}

fn generate(cfg: &ExperimentConfig, art: &mut Artifacts<'_>, record: &mut RunRecord) -> Result<(), RunError> {
    for spec in &cfg.specs {
        let dir = format!("data/{}", slug(&spec.id));
        art.output(&format!("{dir}/spec.json"), &pretty(spec))?;
        let sets = cfg
            .seeds
            .par_iter()
            .map(|&seed| sample(spec, cfg.protocol.n_samples, seed))
            .collect::<Result<Vec<_>, _>>()?;
        let mut alphas = Vec::new();
        for (seed, ds) in cfg.seeds.iter().zip(&sets) {
            let mut bytes = Vec::new();
            ds.write_csv(&mut bytes).map_err(|source| RunError::Io {
                path: art.root.join(&dir),
                source,
            })?;
            let rel = format!("{dir}/seed{seed}.csv");
            art.write(&rel, &bytes)?;
            art.results.push(rel);
            if let Ok(a) = empirical_alpha(ds) {
                alphas.push(a);
            }
        }
        if !alphas.is_empty() {
            record.summary.insert(format!("{}.empirical_alpha", spec.id), Summary::of(&alphas));
        }
    }
    Ok(())
}

/// Per-seed file written by `train` and `measure`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub method: String,
    pub result: ModelResult,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub log: Option<RunLog>,
}

fn train(cfg: &ExperimentConfig, art: &mut Artifacts<'_>, record: &mut RunRecord, save_models: bool) -> Result<(), RunError> {
    let method = cfg.method.method.name();
    let legs: Vec<(usize, u64)> = (0..cfg.specs.len()).flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s))).collect();
    let fitted = legs
        .par_iter()
        .map(|&(i, seed)| -> Result<_, biaslab::Error> {
            let spec = &cfg.specs[i];
            match &cfg.model {
                Some(model) => {
                    let (_, _, test) = equivalence::sample_splits(spec, seed, &cfg.protocol)?;
                    Ok((None, equivalence::measure(model, &test, seed, &cfg.protocol)?, None))
                }
                None => {
                    let fit = fit_and_measure(spec, &cfg.method, seed, &cfg.protocol)?;
                    Ok((Some(fit.outcome.model), fit.result, Some(fit.outcome.log)))
                }
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut metrics = format!("{CSV_HEADER}\n");
    let mut measures = String::from("spec_id,method,seed,worst_acc,bias,h_y_given_a,fano_bound,fano_holds\n");
    let label = if cfg.model.is_some() { "model" } else { method };
    let mut by_spec: Vec<Vec<ModelResult>> = vec![Vec::new(); cfg.specs.len()];
    for (&(i, seed), (model, result, log)) in legs.iter().zip(fitted) {
        let spec = &cfg.specs[i];
        let dir = format!("{}/{label}", slug(&spec.id));
        if save_models {
            if let Some(model) = &model {
                let rel = format!("models/{dir}/seed{seed}.json");
                art.write(&rel, &pretty(model))?;
                art.outputs.push(rel);
            }
        }
        metrics.push_str(&result.eval.csv_row(&spec.id, label, seed));
        metrics.push('\n');
        measures.push_str(&format!(
            "{},{label},{seed},{},{},{},{},{}\n",
            spec.id, result.worst_acc, result.bias.value, result.h_y_given_a, result.fano_bound, result.fano_holds
        ));
        by_spec[i].push(result.clone());
        art.result(
            format!("results/{dir}/seed{seed}.json"),
            &SeedResult {
                method: label.to_string(),
                result,
                log,
            },
        )?;
    }
    if save_models {
        art.output("metrics.csv", metrics.as_bytes())?;
    } else {
        art.output("measure.csv", measures.as_bytes())?;
    }
    summarize_results(cfg, &by_spec, record);
    Ok(())
}

fn summarize_results(cfg: &ExperimentConfig, by_spec: &[Vec<ModelResult>], record: &mut RunRecord) {
    for (spec, results) in cfg.specs.iter().zip(by_spec) {
        let col = |f: fn(&ModelResult) -> f64| Summary::of(&results.iter().map(f).collect::<Vec<_>>());
        record.summary.insert(format!("{}.worst_acc", spec.id), col(|r| r.worst_acc));
        record.summary.insert(format!("{}.avg_acc", spec.id), col(|r| r.eval.average_accuracy));
        record.summary.insert(format!("{}.bias", spec.id), col(|r| r.bias.value));
        record.summary.insert(format!("{}.fano_bound", spec.id), col(|r| r.fano_bound));
    }
}

const LEG_HEADER: &str = "pair_id,seed,spec1_id,spec2_id,worst_acc_1,worst_acc_2,delta,b1,b2";

fn leg_rows(pair_id: &str, report: &EquivalenceReport) -> String {
    report
        .legs
        .iter()
        .map(|l| {
            format!(
                "{pair_id},{},{},{},{},{},{},{},{}\n",
                l.seed, report.spec1_id, report.spec2_id, l.first.worst_acc, l.second.worst_acc, l.delta, l.first.bias.value, l.second.bias.value
            )
        })
        .collect()
}

fn pair_summary(prefix: &str, legs: &[PairLeg], record: &mut RunRecord) {
    let col = |f: fn(&PairLeg) -> f64| Summary::of(&legs.iter().map(f).collect::<Vec<_>>());
    record.summary.insert(format!("{prefix}delta"), col(|l| l.delta));
    record.summary.insert(format!("{prefix}worst_acc_1"), col(|l| l.first.worst_acc));
    record.summary.insert(format!("{prefix}worst_acc_2"), col(|l| l.second.worst_acc));
}

fn validate(cfg: &ExperimentConfig, art: &mut Artifacts<'_>, record: &mut RunRecord) -> Result<(), RunError> {
    let report = equivalence::validate_pair(&cfg.specs[0], &cfg.specs[1], &cfg.method, &cfg.seeds, &cfg.protocol)?;
    for leg in &report.legs {
        art.result(format!("results/seed{}.json", leg.seed), leg)?;
    }
    let pair_id = format!("{}|{}", report.spec1_id, report.spec2_id);
    art.output("legs.csv", format!("{LEG_HEADER}\n{}", leg_rows(&pair_id, &report)).as_bytes())?;
    art.output("equivalence.json", &pretty(&report))?;
    pair_summary("", &report.legs, record);
    Ok(())
}

fn transfer(cfg: &ExperimentConfig, art: &mut Artifacts<'_>, record: &mut RunRecord) -> Result<(), RunError> {
    let report = equivalence::transfer_experiment(&cfg.specs[0], &cfg.specs[1], &cfg.method, &cfg.seeds, &cfg.protocol)?;
    for leg in &report.legs {
        art.result(format!("results/seed{}.json", leg.seed), leg)?;
    }
    art.output("transfer.json", &pretty(&report))?;
    let col = |f: fn(&equivalence::TransferLeg) -> f64| Summary::of(&report.legs.iter().map(f).collect::<Vec<_>>());
    record.summary.insert("transfer_worst_acc".into(), col(|l| l.transfer_worst_acc));
    record.summary.insert("scratch_worst_acc".into(), col(|l| l.scratch_worst_acc));
    record.summary.insert("degradation".into(), col(|l| l.degradation));
    Ok(())
}

/// One evaluated pair of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub pair_id: String,
    /// `α` of the first spec, as configured when it is a spurious spec.
    pub alpha: f64,
    /// Ratio the α↔r mapping assigns to `alpha`; `None` outside its domain.
    pub corollary_ratio: Option<f64>,
    pub eta_target: Option<f64>,
    pub overlap_control: f64,
    pub report: EquivalenceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    /// Pearson correlation of ε with the observed gap across entries.
    pub correlation: Option<f64>,
}

pub const SWEEP_HEADER: &str =
    "pair_id,seed,spec1_id,spec2_id,alpha,corollary_ratio,worst_acc_1,worst_acc_2,delta,b1,b2,epsilon,eta,pred_delta";

fn sweep(cfg: &ExperimentConfig, art: &mut Artifacts<'_>, record: &mut RunRecord) -> Result<(), RunError> {
    let plan = cfg.sweep.as_ref().expect("validated sweep config");
    let targets: Vec<Option<f64>> = if plan.overlap_targets.is_empty() {
        vec![None]
    } else {
        plan.overlap_targets.iter().copied().map(Some).collect()
    };
    let jobs: Vec<(&crate::config::SweepPair, Option<f64>)> =
        plan.pairs.iter().flat_map(|p| targets.iter().map(move |t| (p, *t))).collect();
    if jobs.is_empty() {
        log::warn!("sweep has no pairs; writing empty tables");
    }

    let entries = jobs
        .par_iter()
        .map(|&(pair, target)| -> Result<SweepEntry, biaslab::Error> {
            let second: ProblemSpec = match target {
                Some(t) => {
                    let c = overlap_control_for(&pair.first, &pair.second, t, plan.overlap_search_samples, cfg.seeds[0])?;
                    pair.second.clone().with_overlap_control(c)
                }
                None => pair.second.clone(),
            };
            let report = equivalence::validate_pair(&pair.first, &second, &cfg.method, &cfg.seeds, &cfg.protocol)?;
            let mut pair_id = format!("{}|{}", pair.first.id, second.id);
            if let Some(t) = target {
                pair_id.push_str(&format!("@eta{t}"));
            }
            let alpha = match pair.first.mechanism {
                Mechanism::Spurious { alpha } => alpha,
                _ => pair.first.alpha(),
            };
            Ok(SweepEntry {
                pair_id,
                alpha,
                corollary_ratio: alpha_to_ratio(alpha, pair.first.class_marginal).ok(),
                eta_target: target,
                overlap_control: second.overlap_control,
                report,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut csv = format!("{SWEEP_HEADER}\n");
    for (k, e) in entries.iter().enumerate() {
        for leg in &e.report.legs {
            art.result(format!("results/pair{k:02}/seed{}.json", leg.seed), leg)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e.pair_id,
                leg.seed,
                e.report.spec1_id,
                e.report.spec2_id,
                e.alpha,
                fmt_opt(e.corollary_ratio),
                leg.first.worst_acc,
                leg.second.worst_acc,
                leg.delta,
                leg.first.bias.value,
                leg.second.bias.value,
                e.report.epsilon,
                e.report.eta.value,
                e.report.predicted_delta
            ));
        }
        pair_summary(&format!("{}.", e.pair_id), &e.report.legs, record);
    }
    let eps: Vec<f64> = entries.iter().map(|e| e.report.epsilon).collect();
    let obs: Vec<f64> = entries.iter().map(|e| e.report.observed_delta).collect();
    let correlation = equivalence::pearson(&eps, &obs).ok();
    if let Some(rho) = correlation {
        record.summary.insert("correlation".into(), Summary { mean: rho, std: 0.0, n: entries.len() });
    }
    art.output("sweep.csv", csv.as_bytes())?;
    art.output("sweep.json", &pretty(&SweepReport { entries, correlation }))?;
    Ok(())
}
