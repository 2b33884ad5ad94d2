//! Equivalence checks: the α↔r mapping, the `δ(ε, η)` prediction, the
//! pairwise validation harness and method transfer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{self, MethodConfig, MethodOutcome};
use crate::error::{Error, Result};
use crate::infotheory::{self, BiasMeasurement, BoundParams, OverlapEstimate, Unit};
use crate::learner::{self, ModelParams};
use crate::metrics::{self, EvalReport};
use crate::problems::{self, Dataset, ProblemSpec};

pub const DEFAULT_SEEDS: [u64; 3] = [42, 123, 456];
pub const DEFAULT_TOLERANCE: f64 = 0.03;

fn check_pi(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("class marginal {pi} is outside (0, 1)")))
    }
}

/// `r = (1 + α)/(1 - α) · π/(1 - π)`.
pub fn alpha_to_ratio(alpha: f64, pi: f64) -> Result<f64> {
    if !(alpha > -1.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} is outside (-1, 1)")));
    }
    check_pi(pi)?;
    Ok((1.0 + alpha) / (1.0 - alpha) * pi / (1.0 - pi))
}

/// Inverse of [`alpha_to_ratio`].
pub fn ratio_to_alpha(ratio: f64, pi: f64) -> Result<f64> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Domain(format!("ratio {ratio} must be finite and > 0")));
    }
    check_pi(pi)?;
    let k = ratio * (1.0 - pi) / pi;
    Ok((k - 1.0) / (k + 1.0))
}

/// `C · √ε / η`.
pub fn predict_delta(epsilon: f64, eta: f64, c: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("overlap {eta} must be > 0")));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon {epsilon} must be >= 0")));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!("constant {c} must be finite and > 0")));
    }
    Ok(c * epsilon.sqrt() / eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaObservation {
    pub epsilon: f64,
    pub eta: f64,
    pub observed_delta: f64,
}

/// Overlap ablation rows `(η, ε, δ)`: 0.65/0.15/3.2%, 0.45/0.15/4.6%, 0.25/0.15/8.3%.
pub const OVERLAP_ABLATION: [DeltaObservation; 3] = [
    DeltaObservation { epsilon: 0.15, eta: 0.65, observed_delta: 0.032 },
    DeltaObservation { epsilon: 0.15, eta: 0.45, observed_delta: 0.046 },
    DeltaObservation { epsilon: 0.15, eta: 0.25, observed_delta: 0.083 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c: f64,
    /// `observed - C √ε/η` per usable observation, in input order.
    pub residuals: Vec<f64>,
    pub used: usize,
}

/// Least squares of `observed_delta` on `√ε/η` through the origin.
/// Observations with `ε = 0` or `η <= 0` carry no information and are skipped.
pub fn calibrate_c(observations: &[DeltaObservation]) -> Result<Calibration> {
    let usable: Vec<(f64, f64)> = observations
        .iter()
        .filter(|o| o.epsilon > 0.0 && o.eta > 0.0 && o.observed_delta.is_finite())
        .map(|o| (o.epsilon.sqrt() / o.eta, o.observed_delta))
        .collect();
    if usable.is_empty() {
        return Err(Error::UndefinedEstimate("no observation with epsilon > 0 and eta > 0".into()));
    }
    let sxy: f64 = usable.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = usable.iter().map(|(x, _)| x * x).sum();
    let c = sxy / sxx;
    Ok(Calibration {
        c,
        residuals: usable.iter().map(|(x, y)| y - c * x).collect(),
        used: usable.len(),
    })
}

/// Where the constant of `δ(ε, η)` comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CSource {
    /// `constant · L · diam` from the bound parameters.
    RawBound(BoundParams),
    /// Fit on observations; an empty list means the built-in ablation fixture.
    Calibrated {
        #[serde(default)]
        observations: Vec<DeltaObservation>,
    },
    Fixed { value: f64 },
}

impl Default for CSource {
    fn default() -> Self {
        CSource::Calibrated { observations: Vec::new() }
    }
}

impl CSource {
    pub fn constant(&self) -> Result<f64> {
        match self {
            CSource::RawBound(bp) => {
                bp.validate()?;
                Ok(raw_constant(bp))
            }
            CSource::Calibrated { observations } if observations.is_empty() => Ok(calibrate_c(&OVERLAP_ABLATION)?.c),
            CSource::Calibrated { observations } => Ok(calibrate_c(observations)?.c),
            CSource::Fixed { value } => {
                if *value > 0.0 && value.is_finite() {
                    Ok(*value)
                } else {
                    Err(Error::validation("c_source.value", format!("{value} must be finite and > 0")))
                }
            }
        }
    }
}

fn raw_constant(bp: &BoundParams) -> f64 {
    bp.constant * bp.lipschitz * bp.diameter
}

fn default_n_samples() -> usize {
    50_000
}
fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}
fn default_overlap_samples() -> usize {
    infotheory::DEFAULT_OVERLAP_SAMPLES
}
fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

/// Sampling, measurement and agreement settings shared by the harnesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    /// Rows sampled per spec and seed before the train/val/test split.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_overlap_samples")]
    pub overlap_samples: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub c_source: CSource,
    #[serde(default)]
    pub bound: BoundParams,
    #[serde(default)]
    pub unit: Unit,
    #[serde(default)]
    pub smoothing: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            n_samples: default_n_samples(),
            split: default_split(),
            overlap_samples: default_overlap_samples(),
            tolerance: default_tolerance(),
            c_source: CSource::default(),
            bound: BoundParams::default(),
            unit: Unit::Bits,
            smoothing: 0.0,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 10 {
            return Err(Error::validation("n_samples", "must be at least 10"));
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::validation("split", "fractions must be positive and sum to 1"));
        }
        if self.overlap_samples == 0 {
            return Err(Error::validation("overlap_samples", "must be at least 1"));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::validation("tolerance", "must be finite and >= 0"));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::validation("smoothing", "must be finite and >= 0"));
        }
        self.bound.validate()?;
        self.c_source.constant()?;
        Ok(())
    }
}

/// One trained model, evaluated on its own test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub spec_id: String,
    pub seed: u64,
    pub eval: EvalReport,
    pub worst_acc: f64,
    pub bias: BiasMeasurement,
    pub h_y_given_a: f64,
    /// `(H(Y|A) + B) / log 2`.
    pub fano_bound: f64,
    pub fano_holds: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

/// A model trained on one spec and seed, with its held-out measurement.
#[derive(Debug, Clone)]
pub struct Fit {
    pub outcome: MethodOutcome,
    pub result: ModelResult,
    pub test: Dataset,
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "must not be empty"));
    }
    Ok(())
}

/// Evaluates `model` on `test`, including the bias functional and the Fano bound.
pub fn measure(model: &ModelParams, test: &Dataset, seed: u64, protocol: &Protocol) -> Result<ModelResult> {
    let eval = metrics::evaluate(model, test)?;
    let Some(worst_acc) = eval.worst_group_accuracy else {
        return Err(Error::MissingGroups {
            missing: eval.group_table.empty_groups(),
        });
    };
    let preds = learner::predict_dataset(model, test)?;
    let jc = infotheory::joint_counts(&preds, &test.attributes, &test.labels)?;
    let bias = infotheory::conditional_mutual_information(&jc, protocol.unit, protocol.smoothing);
    let h = infotheory::conditional_entropy_y_given_a(&test.group_counts(), protocol.unit)?;
    let fano_bound = infotheory::fano_worst_group_bound(&h, &bias)?;
    Ok(ModelResult {
        spec_id: test.spec_id.clone(),
        seed,
        worst_acc,
        fano_holds: 1.0 - worst_acc <= fano_bound,
        eval,
        bias,
        h_y_given_a: h.value,
        fano_bound,
        warnings: Vec::new(),
    })
}

/// Samples `protocol.n_samples` rows with `seed` and splits them into
/// train, validation and test parts.
pub fn sample_splits(spec: &ProblemSpec, seed: u64, protocol: &Protocol) -> Result<(Dataset, Dataset, Dataset)> {
    let ds = problems::sample(spec, protocol.n_samples, seed)?;
    let mut parts = ds.split(&protocol.split)?.into_iter();
    match (parts.next(), parts.next(), parts.next()) {
        (Some(tr), Some(va), Some(te)) => Ok((tr, va, te)),
        _ => Err(Error::validation("split", "expected three parts")),
    }
}

fn seeded(method: &MethodConfig, seed: u64) -> MethodConfig {
    let mut m = method.clone();
    m.base.seed = seed;
    m
}

/// Samples `spec` with `seed`, trains on the train split (the validation split
/// feeds early stopping) and measures on the test split. The seed also
/// replaces the method's training seed.
pub fn fit_and_measure(spec: &ProblemSpec, method: &MethodConfig, seed: u64, protocol: &Protocol) -> Result<Fit> {
    let (train, val, test) = sample_splits(spec, seed, protocol)?;
    let outcome = debias::train_method(&train, &seeded(method, seed), Some(&val))?;
    let mut result = measure(&outcome.model, &test, seed, protocol)?;
    result.warnings = outcome.log.warnings.clone();
    Ok(Fit { outcome, result, test })
}

/// Trains one model per seed on `spec` and measures it on held-out data.
pub fn run_spec(spec: &ProblemSpec, method: &MethodConfig, seeds: &[u64], protocol: &Protocol) -> Result<Vec<ModelResult>> {
    spec.validate()?;
    method.validate()?;
    protocol.validate()?;
    check_seeds(seeds)?;
    seeds
        .par_iter()
        .map(|&s| fit_and_measure(spec, method, s, protocol).map(|t| t.result))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLeg {
    pub seed: u64,
    pub first: ModelResult,
    pub second: ModelResult,
    /// `|worst_acc_1 - worst_acc_2|`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub spec1_id: String,
    pub spec2_id: String,
    pub method: String,
    /// Seed-averaged bias of each spec's models.
    pub b1: BiasMeasurement,
    pub b2: BiasMeasurement,
    pub epsilon: f64,
    pub eta: OverlapEstimate,
    pub c: f64,
    pub c_source: CSource,
    pub predicted_delta: f64,
    /// The same prediction with the raw constant `constant · L · diam`.
    pub raw_predicted_delta: f64,
    pub w1_bound: f64,
    /// Mean over seeds of the per-seed worst-group accuracy gap.
    pub observed_delta: f64,
    pub observed_delta_std: f64,
    pub agreement: bool,
    pub tolerance: f64,
    pub seeds: Vec<u64>,
    pub legs: Vec<PairLeg>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

impl EquivalenceReport {
    pub fn prediction_error(&self) -> f64 {
        (self.predicted_delta - self.observed_delta).abs()
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_bias(results: &[&ModelResult], unit: Unit, smoothing: f64) -> BiasMeasurement {
    let values: Vec<f64> = results.iter().map(|r| r.bias.value).collect();
    BiasMeasurement {
        value: mean_std(&values).0,
        unit,
        n: results.iter().map(|r| r.bias.n).sum(),
        smoothing,
    }
}

fn check_dims(a: &ProblemSpec, b: &ProblemSpec) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Trains identical learners on both specs for every seed and compares
/// worst-group accuracy against the `δ(ε, η)` prediction. The overlap is
/// estimated once, with the first seed.
pub fn validate_pair(
    spec1: &ProblemSpec,
    spec2: &ProblemSpec,
    method: &MethodConfig,
    seeds: &[u64],
    protocol: &Protocol,
) -> Result<EquivalenceReport> {
    spec1.validate()?;
    spec2.validate()?;
    check_dims(spec1, spec2)?;
    method.validate()?;
    protocol.validate()?;
    check_seeds(seeds)?;

    let legs: Vec<PairLeg> = seeds
        .par_iter()
        .map(|&seed| {
            let first = fit_and_measure(spec1, method, seed, protocol)?.result;
            let second = fit_and_measure(spec2, method, seed, protocol)?.result;
            Ok(PairLeg {
                seed,
                delta: (first.worst_acc - second.worst_acc).abs(),
                first,
                second,
            })
        })
        .collect::<Result<_>>()?;

    let b1 = mean_bias(&legs.iter().map(|l| &l.first).collect::<Vec<_>>(), protocol.unit, protocol.smoothing);
    let b2 = mean_bias(&legs.iter().map(|l| &l.second).collect::<Vec<_>>(), protocol.unit, protocol.smoothing);
    let epsilon = (b1.value - b2.value).abs();
    let eta = infotheory::feature_overlap(spec1, spec2, protocol.overlap_samples, seeds[0])?;

    let mut warnings = Vec::new();
    if eta.value < protocol.bound.tau {
        let msg = format!(
            "theorem precondition violated: overlap {:.4} is below tau {}",
            eta.value, protocol.bound.tau
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    for leg in &legs {
        warnings.extend(leg.first.warnings.iter().chain(&leg.second.warnings).cloned());
    }

    // a zero overlap leaves the prediction unbounded
    let eta_floor = eta.value.max(f64::MIN_POSITIVE);
    let c = protocol.c_source.constant()?;
    let predicted_delta = predict_delta(epsilon, eta_floor, c)?;
    let raw_predicted_delta = predict_delta(epsilon, eta_floor, raw_constant(&protocol.bound))?;
    let w1_bound = infotheory::w1_coupling_bound(&protocol.bound, eta_floor.min(1.0))?;

    let deltas: Vec<f64> = legs.iter().map(|l| l.delta).collect();
    let (observed_delta, observed_delta_std) = mean_std(&deltas);
    Ok(EquivalenceReport {
        spec1_id: spec1.id.clone(),
        spec2_id: spec2.id.clone(),
        method: method.method.name().into(),
        b1,
        b2,
        epsilon,
        eta,
        c,
        c_source: protocol.c_source.clone(),
        predicted_delta,
        raw_predicted_delta,
        w1_bound,
        observed_delta,
        observed_delta_std,
        agreement: observed_delta <= protocol.tolerance,
        tolerance: protocol.tolerance,
        seeds: seeds.to_vec(),
        legs,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferLeg {
    pub seed: u64,
    pub transfer_worst_acc: f64,
    pub scratch_worst_acc: f64,
    pub degradation: f64,
    /// Source-trained model measured on the target test split.
    pub transfer: ModelResult,
    pub scratch: ModelResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_id: String,
    pub target_id: String,
    pub method: String,
    pub transfer_worst_acc: f64,
    pub scratch_worst_acc: f64,
    /// `scratch - transfer`; negative when the transferred model is better.
    pub degradation: f64,
    pub degradation_std: f64,
    pub seeds: Vec<u64>,
    pub legs: Vec<TransferLeg>,
}

/// Trains on `source` and applies the frozen model to the target test split,
/// against a model trained on `target` from scratch with the same seed.
pub fn transfer_experiment(
    source: &ProblemSpec,
    target: &ProblemSpec,
    method: &MethodConfig,
    seeds: &[u64],
    protocol: &Protocol,
) -> Result<TransferReport> {
    source.validate()?;
    target.validate()?;
    check_dims(source, target)?;
    method.validate()?;
    protocol.validate()?;
    check_seeds(seeds)?;

    let legs: Vec<TransferLeg> = seeds
        .par_iter()
        .map(|&seed| {
            let (src_train, src_val, _) = sample_splits(source, seed, protocol)?;
            let transferred = debias::train_method(&src_train, &seeded(method, seed), Some(&src_val))?.model;
            let scratch = fit_and_measure(target, method, seed, protocol)?;
            let transfer = measure(&transferred, &scratch.test, seed, protocol)?;
            Ok(TransferLeg {
                seed,
                transfer_worst_acc: transfer.worst_acc,
                scratch_worst_acc: scratch.result.worst_acc,
                degradation: scratch.result.worst_acc - transfer.worst_acc,
                transfer,
                scratch: scratch.result,
            })
        })
        .collect::<Result<_>>()?;

    let mean_of = |f: fn(&TransferLeg) -> f64| mean_std(&legs.iter().map(f).collect::<Vec<_>>());
    let (degradation, degradation_std) = mean_of(|l| l.degradation);
    Ok(TransferReport {
        source_id: source.id.clone(),
        target_id: target.id.clone(),
        method: method.method.name().into(),
        transfer_worst_acc: mean_of(|l| l.transfer_worst_acc).0,
        scratch_worst_acc: mean_of(|l| l.scratch_worst_acc).0,
        degradation,
        degradation_std,
        seeds: seeds.to_vec(),
        legs,
    })
}

/// Sample Pearson correlation; undefined for fewer than two points or a
/// constant series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            what: format!("{} x values and {} y values", x.len(), y.len()),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedEstimate("correlation needs at least two points".into()));
    }
    let (mx, _) = mean_std(x);
    let (my, _) = mean_std(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedEstimate("correlation of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Finds the `overlap_control` of `spec2` whose estimated overlap with
/// `spec1` is closest to `target` by bisection on `[0, 40]`. The estimate
/// uses common random numbers, so it is a smooth decreasing function of the
/// control.
pub fn overlap_control_for(
    spec1: &ProblemSpec,
    spec2: &ProblemSpec,
    target: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain(format!("target overlap {target} is outside (0, 1)")));
    }
    let eta_at = |control: f64| -> Result<f64> {
        let shifted = spec2.clone().with_overlap_control(control);
        Ok(infotheory::feature_overlap(spec1, &shifted, mc_samples, seed)?.value)
    };
    let (mut lo, mut hi) = (0.0, 40.0);
    if eta_at(lo)? < target {
        return Err(Error::Domain(format!("overlap at zero shift is already below {target}")));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if eta_at(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
