//! Linear and MLP classifiers with a single sigmoid logit, trained by
//! minibatch SGD with momentum and L2 weight decay.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::problems::Dataset;
use crate::rng;

/// Probability clamp applied inside the loss only.
pub const PROB_CLAMP: f64 = 1e-12;
pub const DEFAULT_MLP_WIDTH: usize = 64;
pub const DEFAULT_MLP_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Linear,
    Mlp { hidden_sizes: Vec<usize> },
}

impl Architecture {
    pub fn default_mlp() -> Self {
        Architecture::Mlp {
            hidden_sizes: vec![DEFAULT_MLP_WIDTH; DEFAULT_MLP_DEPTH],
        }
    }

    fn hidden(&self) -> &[usize] {
        match self {
            Architecture::Linear => &[],
            Architecture::Mlp { hidden_sizes } => hidden_sizes,
        }
    }
}

/// Dense layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    pub seed: u64,
    pub provenance: Provenance,
}

/// Weights start uniform in `±1/sqrt(fan_in)`; biases start at zero.
pub fn init_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub fn init_model(architecture: &Architecture, input_dim: usize, seed: u64) -> Result<ModelParams> {
    if input_dim == 0 {
        return Err(Error::validation("input_dim", "must be at least 1"));
    }
    if architecture.hidden().contains(&0) {
        return Err(Error::validation("hidden_sizes", "every hidden layer needs at least one unit"));
    }
    let mut rng = rng::stream("init", "model", seed);
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(architecture.hidden());
    sizes.push(1);
    let layers = sizes
        .windows(2)
        .map(|w| {
            let mut layer = Layer::zeros(w[0], w[1]);
            let scale = init_scale(w[0]);
            for v in &mut layer.weights {
                *v = rng.random_range(-scale..=scale);
            }
            layer
        })
        .collect();
    Ok(ModelParams {
        architecture: architecture.clone(),
        input_dim,
        layers,
        seed,
        provenance: Provenance::default(),
    })
}

/// `1 / (1 + e^-z)` without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of a logit against a label, `softplus(z) - y z`.
fn logit_loss(z: f64, y: u8) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - if y == 1 { z } else { 0.0 }
}

/// Per-example cross-entropy on a probability, clamped at `PROB_CLAMP`.
pub fn cross_entropy(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `sum w_i CE(p_i, y_i) / sum w_i`.
pub fn weighted_cross_entropy(probs: &[f64], labels: &[u8], weights: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: format!(
                "{} probabilities, {} labels, {} weights",
                probs.len(),
                labels.len(),
                weights.len()
            ),
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::validation("weights", "must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::validation("weights", "must not all be zero"));
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((p, y), w)| w * cross_entropy(*p, *y))
        .sum();
    Ok(sum / total)
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Shape chain `input_dim -> hidden... -> 1`.
    pub fn shape_chain(&self) -> Vec<usize> {
        let mut chain = vec![self.input_dim];
        chain.extend(self.layers.iter().map(|l| l.outputs));
        chain
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: values.len(),
            });
        }
        for (slot, v) in self.layers.iter_mut().flat_map(|l| l.params_mut()).zip(values) {
            *slot = *v;
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Activations feeding the final layer (the input itself for `Linear`).
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut h = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            layer.forward_into(&h, &mut next);
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            std::mem::swap(&mut h, &mut next);
        }
        Ok(h)
    }

    pub fn head(&self) -> &Layer {
        self.layers.last().expect("model has an output layer")
    }

    pub fn head_mut(&mut self) -> &mut Layer {
        self.layers.last_mut().expect("model has an output layer")
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        let h = self.penultimate(x)?;
        let head = self.head();
        let z = head.bias[0] + head.weights.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("logit {z}")));
        }
        Ok(z)
    }

    /// Forward pass keeping every layer input; returns the logit.
    fn forward_cached(&self, x: &[f64], cache: &mut Vec<Vec<f64>>) -> f64 {
        cache.resize_with(self.layers.len(), Vec::new);
        cache[0].clear();
        cache[0].extend_from_slice(x);
        let mut out = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cache[k], &mut out);
            if k + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                std::mem::swap(&mut cache[k + 1], &mut out);
            }
        }
        out[0]
    }

    /// Accumulates `scale * d logit / d params` into `grad`.
    fn backward(&self, cache: &[Vec<f64>], scale: f64, grad: &mut [Layer]) {
        let mut delta = vec![scale];
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache[k];
            let g = &mut grad[k];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += d * xi;
                }
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU derivative; cache[k] holds post-activation values
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    fn zero_grad(&self) -> Vec<Layer> {
        self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect()
    }
}

pub fn predict_proba(model: &ModelParams, x: &[f64]) -> Result<f64> {
    Ok(sigmoid(model.logit(x)?))
}

pub fn predict(model: &ModelParams, x: &[f64]) -> Result<u8> {
    Ok(u8::from(predict_proba(model, x)? >= 0.5))
}

pub fn predict_dataset(model: &ModelParams, ds: &Dataset) -> Result<Vec<u8>> {
    (0..ds.len()).map(|i| predict(model, ds.row(i))).collect()
}

pub fn predict_proba_dataset(model: &ModelParams, ds: &Dataset) -> Result<Vec<f64>> {
    (0..ds.len()).map(|i| predict_proba(model, ds.row(i))).collect()
}

/// Weighted loss `sum c_i loss_i` over `rows` and its gradient, flattened in
/// `ModelParams::params` order. Coefficients are used as given.
pub fn loss_and_gradient(model: &ModelParams, ds: &Dataset, rows: &[usize], coefficients: &[f64]) -> Result<(f64, Vec<f64>)> {
    if rows.len() != coefficients.len() {
        return Err(Error::LengthMismatch {
            what: format!("{} rows, {} coefficients", rows.len(), coefficients.len()),
        });
    }
    let mut grad = model.zero_grad();
    let mut cache = Vec::new();
    let mut loss = 0.0;
    for (&i, &c) in rows.iter().zip(coefficients) {
        model.check_dim(ds.row(i))?;
        let z = model.forward_cached(ds.row(i), &mut cache);
        loss += c * logit_loss(z, ds.labels[i]);
        model.backward(&cache, c * (sigmoid(z) - ds.labels[i] as f64), &mut grad);
    }
    Ok((loss, grad.iter().flat_map(|l| l.params().copied()).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    #[default]
    None,
    ValWorstGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop: EarlyStop,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            batch_size: 128,
            max_epochs: 80,
            early_stop: EarlyStop::None,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Per-batch objective weighting. The batch objective is `sum c_i loss_i`
/// where the coefficients `c_i` come from here.
pub trait BatchWeighting {
    fn coefficients(&mut self, batch: &[usize], losses: &[f64], out: &mut Vec<f64>);

    fn end_epoch(&mut self, _epoch: usize) {}
}

/// Normalized sample weights: `c_i = w_i / sum_batch w`.
pub struct SampleWeights<'a>(pub &'a [f64]);

impl BatchWeighting for SampleWeights<'_> {
    fn coefficients(&mut self, batch: &[usize], _losses: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let total: f64 = batch.iter().map(|&i| self.0[i]).sum();
        if total > 0.0 {
            out.extend(batch.iter().map(|&i| self.0[i] / total));
        } else {
            out.resize(batch.len(), 0.0);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch objective per epoch.
    pub train_loss: Vec<f64>,
    pub val_worst_group: Vec<Option<f64>>,
    /// Epoch (1-based) of the returned checkpoint.
    pub selected_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub history: TrainHistory,
}

/// Standard weighted training: `sample_weights` are normalized per batch.
pub fn train(
    model: ModelParams,
    data: &Dataset,
    sample_weights: &[f64],
    cfg: &TrainConfig,
    val: Option<&Dataset>,
) -> Result<ModelParams> {
    if sample_weights.len() != data.len() {
        return Err(Error::LengthMismatch {
            what: format!("{} sample weights for {} rows", sample_weights.len(), data.len()),
        });
    }
    if sample_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::validation("sample_weights", "must be finite and non-negative"));
    }
    let mut weighting = SampleWeights(sample_weights);
    Ok(train_with(model, data, cfg, val, &mut weighting, &mut |_, _| {})?.model)
}

/// Training loop with a custom batch weighting and an end-of-epoch observer
/// `(epoch, model)`; epochs are 1-based.
pub fn train_with(
    mut model: ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    val: Option<&Dataset>,
    weighting: &mut dyn BatchWeighting,
    observer: &mut dyn FnMut(usize, &ModelParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data".into()));
    }
    if data.dim != model.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim,
            got: data.dim,
        });
    }
    let val = match (cfg.early_stop, val) {
        (EarlyStop::ValWorstGroup, None) => {
            return Err(Error::validation("early_stop", "val_worst_group needs validation data"))
        }
        (EarlyStop::ValWorstGroup, Some(v)) => Some(v),
        (EarlyStop::None, _) => None,
    };

    let config_hash = crate::canonical_hash(&(cfg, &model.architecture));
    let mut rng = rng::stream("shuffle", "train", cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = vec![0.0; model.param_count()];
    let mut params = model.params();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams, usize)> = None;

    let mut cache = Vec::new();
    let mut losses = Vec::new();
    let mut coeffs = Vec::new();
    let mut grad = model.zero_grad();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            losses.clear();
            for &i in batch {
                let z = model.forward_cached(data.row(i), &mut cache);
                losses.push(logit_loss(z, data.labels[i]));
            }
            weighting.coefficients(batch, &losses, &mut coeffs);
            let loss: f64 = coeffs.iter().zip(&losses).map(|(c, l)| c * l).sum();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            if coeffs.iter().all(|c| *c == 0.0) {
                continue;
            }
            epoch_loss += loss;
            batches += 1;

            for l in grad.iter_mut() {
                l.weights.iter_mut().for_each(|v| *v = 0.0);
                l.bias.iter_mut().for_each(|v| *v = 0.0);
            }
            for (&i, &c) in batch.iter().zip(&coeffs) {
                if c == 0.0 {
                    continue;
                }
                let z = model.forward_cached(data.row(i), &mut cache);
                model.backward(&cache, c * (sigmoid(z) - data.labels[i] as f64), &mut grad);
            }
            let flat = grad.iter().flat_map(|l| l.params().copied());
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(flat) {
                let g = g + cfg.weight_decay * *p;
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            model.set_params(&params)?;
        }
        weighting.end_epoch(epoch);
        history.train_loss.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
        model.provenance = Provenance {
            config_hash: config_hash.clone(),
            epochs_run: epoch,
        };
        observer(epoch, &model);

        if let Some(v) = val {
            let wga = metrics::evaluate(&model, v)?.worst_group_accuracy;
            history.val_worst_group.push(wga);
            let score = wga.ok_or_else(|| {
                Error::UndefinedEstimate("validation worst-group accuracy needs all four groups".into())
            })?;
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, model.clone(), epoch));
            }
        }
    }

    model.provenance = Provenance {
        config_hash,
        epochs_run: cfg.max_epochs,
    };
    let (model, selected) = match best {
        Some((_, m, e)) => (m, e),
        None => (model, cfg.max_epochs),
    };
    history.selected_epoch = selected;
    Ok(TrainOutcome { model, history })
}
