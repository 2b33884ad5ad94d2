//! ERM, GroupDRO, JTT and DFR as training strategies over [`crate::learner`].

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{self, Architecture, BatchWeighting, ModelParams, TrainConfig};
use crate::problems::Dataset;
use crate::rng;

fn default_group_step() -> f64 {
    0.01
}
fn default_upweight() -> f64 {
    20.0
}
fn default_holdout_frac() -> f64 {
    0.2
}
fn default_head_l2() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    GroupDro {
        #[serde(default = "default_group_step")]
        group_step: f64,
    },
    Jtt {
        #[serde(default = "default_upweight")]
        upweight: f64,
        /// Defaults to a quarter of `max_epochs` (at least one).
        #[serde(default)]
        phase1_epochs: Option<usize>,
    },
    Dfr {
        #[serde(default = "default_holdout_frac")]
        holdout_frac: f64,
        #[serde(default = "default_head_l2")]
        l2: f64,
    },
}

impl Method {
    pub fn group_dro() -> Self {
        Method::GroupDro { group_step: default_group_step() }
    }

    pub fn jtt() -> Self {
        Method::Jtt {
            upweight: default_upweight(),
            phase1_epochs: None,
        }
    }

    pub fn dfr() -> Self {
        Method::Dfr {
            holdout_frac: default_holdout_frac(),
            l2: default_head_l2(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::GroupDro { .. } => "group_dro",
            Method::Jtt { .. } => "jtt",
            Method::Dfr { .. } => "dfr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub base: TrainConfig,
}

impl MethodConfig {
    pub fn new(method: Method, base: TrainConfig) -> Self {
        MethodConfig {
            method,
            architecture: Architecture::Linear,
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        match self.method {
            Method::Erm => {}
            Method::GroupDro { group_step } => {
                if !(group_step > 0.0 && group_step.is_finite()) {
                    return Err(Error::validation("group_step", "must be finite and > 0"));
                }
            }
            Method::Jtt { upweight, phase1_epochs } => {
                if !(upweight >= 1.0 && upweight.is_finite()) {
                    return Err(Error::validation("upweight", "must be finite and >= 1"));
                }
                if phase1_epochs == Some(0) {
                    return Err(Error::validation("phase1_epochs", "must be at least 1"));
                }
            }
            Method::Dfr { holdout_frac, l2 } => {
                if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
                    return Err(Error::validation("holdout_frac", "must lie in (0, 1)"));
                }
                if !(l2 >= 0.0 && l2.is_finite()) {
                    return Err(Error::validation("l2", "must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Per-run diagnostics appended to reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub method: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub group_weights_trajectory: Vec<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub jtt_error_set_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dfr_per_group: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub model: ModelParams,
    pub log: RunLog,
    /// JTT phase-1 misclassified training rows.
    pub error_set: Vec<usize>,
}

/// Adversarial group weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub q: [f64; 4],
    pub step: f64,
}

impl GroupWeights {
    pub fn uniform(step: f64) -> Self {
        GroupWeights { q: [0.25; 4], step }
    }

    /// `q_g <- q_g exp(step * loss_g)` for present groups, then renormalize.
    pub fn update(&mut self, losses: &[f64; 4], present: &[bool; 4]) {
        for g in 0..4 {
            if present[g] {
                self.q[g] *= (self.step * losses[g]).exp();
            }
        }
        let total: f64 = self.q.iter().sum();
        if total > 0.0 && total.is_finite() {
            self.q.iter_mut().for_each(|v| *v /= total);
        } else {
            self.q = [0.25; 4];
        }
    }
}

struct GroupDroWeighting<'a> {
    data: &'a Dataset,
    weights: GroupWeights,
    trajectory: Vec<[f64; 4]>,
}

impl BatchWeighting for GroupDroWeighting<'_> {
    fn coefficients(&mut self, batch: &[usize], losses: &[f64], out: &mut Vec<f64>) {
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        for (&i, &l) in batch.iter().zip(losses) {
            let g = self.data.group(i).index();
            sums[g] += l;
            counts[g] += 1;
        }
        let mut means = [0.0; 4];
        let mut present = [false; 4];
        for g in 0..4 {
            if counts[g] > 0 {
                means[g] = sums[g] / counts[g] as f64;
                present[g] = true;
            }
        }
        self.weights.update(&means, &present);
        // sum_g q_g mean_g = sum_i q_{g(i)} / n_{g(i)} loss_i
        out.clear();
        out.extend(batch.iter().map(|&i| {
            let g = self.data.group(i).index();
            self.weights.q[g] / counts[g] as f64
        }));
    }

    fn end_epoch(&mut self, _epoch: usize) {
        self.trajectory.push(self.weights.q);
    }
}

fn fresh_model(ds: &Dataset, cfg: &MethodConfig) -> Result<ModelParams> {
    learner::init_model(&cfg.architecture, ds.dim, cfg.base.seed)
}

fn require_groups(ds: &Dataset) -> Result<()> {
    let missing = ds.group_table().empty_groups();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingGroups { missing })
    }
}

pub fn train_erm(ds: &Dataset, cfg: &MethodConfig, val: Option<&Dataset>) -> Result<MethodOutcome> {
    cfg.validate()?;
    let model = learner::train(fresh_model(ds, cfg)?, ds, &vec![1.0; ds.len()], &cfg.base, val)?;
    Ok(MethodOutcome {
        model,
        log: RunLog {
            method: "erm".into(),
            ..RunLog::default()
        },
        error_set: Vec::new(),
    })
}

pub fn train_group_dro(ds: &Dataset, cfg: &MethodConfig, val: Option<&Dataset>) -> Result<MethodOutcome> {
    cfg.validate()?;
    let Method::GroupDro { group_step } = cfg.method else {
        return Err(Error::validation("method", "expected group_dro"));
    };
    require_groups(ds)?;
    let mut weighting = GroupDroWeighting {
        data: ds,
        weights: GroupWeights::uniform(group_step),
        trajectory: Vec::new(),
    };
    let outcome = learner::train_with(fresh_model(ds, cfg)?, ds, &cfg.base, val, &mut weighting, &mut |_, _| {})?;
    log::debug!("group_dro final weights {:?}", weighting.weights.q);
    Ok(MethodOutcome {
        model: outcome.model,
        log: RunLog {
            method: "group_dro".into(),
            group_weights_trajectory: weighting.trajectory,
            ..RunLog::default()
        },
        error_set: Vec::new(),
    })
}

/// Training rows the model misclassifies.
pub fn misclassified(model: &ModelParams, ds: &Dataset) -> Result<Vec<usize>> {
    let preds = learner::predict_dataset(model, ds)?;
    Ok(preds
        .iter()
        .zip(&ds.labels)
        .enumerate()
        .filter(|(_, (p, y))| p != y)
        .map(|(i, _)| i)
        .collect())
}

fn jtt_phase1_epochs(cfg: &MethodConfig) -> usize {
    match cfg.method {
        Method::Jtt { phase1_epochs: Some(e), .. } => e,
        _ => (cfg.base.max_epochs / 4).max(1),
    }
}

fn train_jtt_observed(
    ds: &Dataset,
    cfg: &MethodConfig,
    val: Option<&Dataset>,
    observer: &mut dyn FnMut(usize, &ModelParams),
) -> Result<MethodOutcome> {
    cfg.validate()?;
    let Method::Jtt { upweight, .. } = cfg.method else {
        return Err(Error::validation("method", "expected jtt"));
    };
    let phase1_cfg = TrainConfig {
        max_epochs: jtt_phase1_epochs(cfg),
        early_stop: learner::EarlyStop::None,
        ..cfg.base.clone()
    };
    let phase1 = learner::train(fresh_model(ds, cfg)?, ds, &vec![1.0; ds.len()], &phase1_cfg, None)?;
    let error_set = misclassified(&phase1, ds)?;

    if error_set.is_empty() {
        let msg = "jtt phase 1 fit the training set exactly; falling back to erm".to_string();
        log::warn!("{msg}");
        let mut out = train_erm(ds, &MethodConfig { method: Method::Erm, ..cfg.clone() }, val)?;
        out.log.method = "jtt".into();
        out.log.jtt_error_set_size = Some(0);
        out.log.warnings.push(msg);
        return Ok(out);
    }

    let mut weights = vec![1.0; ds.len()];
    for &i in &error_set {
        weights[i] = upweight;
    }
    let mut weighting = learner::SampleWeights(&weights);
    let outcome = learner::train_with(fresh_model(ds, cfg)?, ds, &cfg.base, val, &mut weighting, observer)?;
    Ok(MethodOutcome {
        model: outcome.model,
        log: RunLog {
            method: "jtt".into(),
            jtt_error_set_size: Some(error_set.len()),
            ..RunLog::default()
        },
        error_set,
    })
}

pub fn train_jtt(ds: &Dataset, cfg: &MethodConfig, val: Option<&Dataset>) -> Result<MethodOutcome> {
    train_jtt_observed(ds, cfg, val, &mut |_, _| {})
}

/// Equal-count subsample of `ds`: `min_g count_g` rows from every group,
/// chosen by a seeded shuffle, returned grouped in `Group::ALL` order.
pub fn balanced_subsample(ds: &Dataset, seed: u64) -> Result<Vec<usize>> {
    require_groups(ds)?;
    let mut rng = rng::stream("dfr-balance", &ds.spec_id, seed);
    let mut by_group: [Vec<usize>; 4] = Default::default();
    for i in 0..ds.len() {
        by_group[ds.group(i).index()].push(i);
    }
    let per_group = by_group.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(4 * per_group);
    for rows in &mut by_group {
        rows.shuffle(&mut rng);
        out.extend_from_slice(&rows[..per_group]);
    }
    Ok(out)
}

/// Minimizes `mean CE(sigmoid(w.h + b), y) + l2/2 |w|^2` by damped Newton
/// steps; the bias is not penalized. `features` is row-major `n x dim`.
pub fn fit_logistic_head(features: &[f64], dim: usize, labels: &[u8], l2: f64) -> Result<(Vec<f64>, f64)> {
    let n = labels.len();
    if n == 0 || features.len() != n * dim {
        return Err(Error::LengthMismatch {
            what: format!("{} feature values for {n} rows of dim {dim}", features.len()),
        });
    }
    let p = dim + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j < dim { features[i * dim + j] } else { 1.0 });
    let y = DVector::from_fn(n, |i, _| labels[i] as f64);
    let objective = |theta: &DVector<f64>| -> f64 {
        let z = &design * theta;
        let mut total = 0.0;
        for i in 0..n {
            let zi = z[i];
            let softplus = if zi > 0.0 { zi + (-zi).exp().ln_1p() } else { zi.exp().ln_1p() };
            total += softplus - y[i] * zi;
        }
        total / n as f64 + 0.5 * l2 * theta.rows(0, dim).norm_squared()
    };

    let mut theta = DVector::zeros(p);
    let mut current = objective(&theta);
    for _ in 0..100 {
        let z = &design * &theta;
        let probs = z.map(learner::sigmoid);
        let mut grad = design.transpose() * (&probs - &y) / n as f64;
        let curvature = probs.map(|q| q * (1.0 - q) / n as f64);
        let mut hess = design.transpose() * DMatrix::from_diagonal(&curvature) * &design;
        for j in 0..p {
            if j < dim {
                grad[j] += l2 * theta[j];
                hess[(j, j)] += l2;
            }
            hess[(j, j)] += 1e-12;
        }
        let Some(chol) = hess.cholesky() else {
            return Err(Error::Domain("head Hessian is not positive definite".into()));
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &theta - t * &step;
            let value = objective(&candidate);
            if value <= current - 1e-4 * t * grad.dot(&step) {
                theta = candidate;
                current = value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || t * step.norm() < 1e-12 {
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("head parameters".into()));
    }
    Ok((theta.rows(0, dim).iter().copied().collect(), theta[dim]))
}

pub fn train_dfr(ds: &Dataset, cfg: &MethodConfig, val: Option<&Dataset>) -> Result<MethodOutcome> {
    cfg.validate()?;
    let Method::Dfr { holdout_frac, l2 } = cfg.method else {
        return Err(Error::validation("method", "expected dfr"));
    };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream("dfr-split", &ds.spec_id, cfg.base.seed));
    let n_hold = ((holdout_frac * ds.len() as f64).round() as usize).clamp(1, ds.len().saturating_sub(1).max(1));
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let mut hold_idx = hold_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    hold_idx.sort_unstable();
    train_idx.sort_unstable();
    let holdout = ds.subset(&hold_idx);
    let body_data = ds.subset(&train_idx);
    require_groups(&holdout)?;

    let erm = train_erm(&body_data, &MethodConfig { method: Method::Erm, ..cfg.clone() }, val)?;
    let mut model = erm.model;

    let balanced = balanced_subsample(&holdout, cfg.base.seed)?;
    let per_group = balanced.len() / 4;
    let width = model.head().inputs;
    let mut feats = Vec::with_capacity(balanced.len() * width);
    let mut labels = Vec::with_capacity(balanced.len());
    for &i in &balanced {
        feats.extend(model.penultimate(holdout.row(i))?);
        labels.push(holdout.labels[i]);
    }
    let (w, b) = fit_logistic_head(&feats, width, &labels, l2)?;
    let head = model.head_mut();
    head.weights = w;
    head.bias = vec![b];

    Ok(MethodOutcome {
        model,
        log: RunLog {
            method: "dfr".into(),
            dfr_per_group: Some(per_group),
            ..RunLog::default()
        },
        error_set: Vec::new(),
    })
}

pub fn train_method(ds: &Dataset, cfg: &MethodConfig, val: Option<&Dataset>) -> Result<MethodOutcome> {
    match cfg.method {
        Method::Erm => train_erm(ds, cfg, val),
        Method::GroupDro { .. } => train_group_dro(ds, cfg, val),
        Method::Jtt { .. } => train_jtt(ds, cfg, val),
        Method::Dfr { .. } => train_dfr(ds, cfg, val),
    }
}
