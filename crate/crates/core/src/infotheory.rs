//! Information-theoretic quantities over binary `(Ŷ, A, Y)` and the
//! worst-group bounds built on them.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{Group, ProblemSpec};
use crate::rng;

pub const DEFAULT_OVERLAP_SAMPLES: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    #[default]
    Bits,
    Nats,
}

impl Unit {
    /// Converts a value in nats to this unit.
    pub fn from_nats(self, nats: f64) -> f64 {
        match self {
            Unit::Bits => nats / std::f64::consts::LN_2,
            Unit::Nats => nats,
        }
    }

    /// `log 2` expressed in this unit.
    pub fn log_two(self) -> f64 {
        match self {
            Unit::Bits => 1.0,
            Unit::Nats => std::f64::consts::LN_2,
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Bits => "bits",
            Unit::Nats => "nats",
        })
    }
}

/// 2x2x2 contingency table over `(ŷ, a, y)`; cell index is `4ŷ + 2a + y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointCounts {
    pub counts: [u64; 8],
    pub n: u64,
}

impl JointCounts {
    pub fn from_cells(counts: [u64; 8]) -> Result<Self> {
        let n = counts.iter().sum();
        if n == 0 {
            return Err(Error::Empty("joint counts must total at least 1".into()));
        }
        Ok(JointCounts { counts, n })
    }

    pub fn index(pred: u8, attr: u8, label: u8) -> usize {
        4 * pred as usize + 2 * attr as usize + label as usize
    }

    pub fn get(&self, pred: u8, attr: u8, label: u8) -> u64 {
        self.counts[Self::index(pred, attr, label)]
    }

    /// The same table with the roles of `Ŷ` and `A` exchanged.
    pub fn swap_pred_attr(&self) -> JointCounts {
        let mut counts = [0u64; 8];
        for p in 0..2u8 {
            for a in 0..2u8 {
                for y in 0..2u8 {
                    counts[Self::index(a, p, y)] = self.get(p, a, y);
                }
            }
        }
        JointCounts { counts, n: self.n }
    }

    /// Marginal counts over `(y, a)` in `Group::ALL` order.
    pub fn label_attribute_counts(&self) -> [u64; 4] {
        let mut out = [0u64; 4];
        for g in Group::ALL {
            out[g.index()] = self.get(0, g.a, g.y) + self.get(1, g.a, g.y);
        }
        out
    }
}

pub fn joint_counts(preds: &[u8], attrs: &[u8], labels: &[u8]) -> Result<JointCounts> {
    if preds.len() != attrs.len() || preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: format!(
                "{} predictions, {} attributes, {} labels",
                preds.len(),
                attrs.len(),
                labels.len()
            ),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("joint_counts needs at least one triple".into()));
    }
    let mut counts = [0u64; 8];
    for ((&p, &a), &y) in preds.iter().zip(attrs).zip(labels) {
        if p > 1 || a > 1 || y > 1 {
            return Err(Error::validation("joint_counts", "values must be 0 or 1"));
        }
        counts[JointCounts::index(p, a, y)] += 1;
    }
    JointCounts::from_cells(counts)
}

/// Estimated `I(Ŷ; A | Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasMeasurement {
    pub value: f64,
    pub unit: Unit,
    pub n: u64,
    pub smoothing: f64,
}

/// Plug-in `I(Ŷ; A | Y)` with `0 log 0 = 0`. A positive `smoothing` is added
/// to every cell before normalizing.
pub fn conditional_mutual_information(jc: &JointCounts, unit: Unit, smoothing: f64) -> BiasMeasurement {
    let lambda = if smoothing.is_finite() && smoothing > 0.0 { smoothing } else { 0.0 };
    let cell = |p: u8, a: u8, y: u8| jc.get(p, a, y) as f64 + lambda;
    let total: f64 = jc.counts.iter().map(|&c| c as f64 + lambda).sum();

    let mut nats = 0.0;
    for y in 0..2u8 {
        let slice = cell(0, 0, y) + cell(0, 1, y) + cell(1, 0, y) + cell(1, 1, y);
        if slice <= 0.0 {
            continue;
        }
        for p in 0..2u8 {
            let pred_marg = cell(p, 0, y) + cell(p, 1, y);
            for a in 0..2u8 {
                let c = cell(p, a, y);
                if c <= 0.0 {
                    continue;
                }
                let attr_marg = cell(0, a, y) + cell(1, a, y);
                nats += c / total * (c * slice / (pred_marg * attr_marg)).ln();
            }
        }
    }
    BiasMeasurement {
        value: unit.from_nats(nats.max(0.0)),
        unit,
        n: jc.n,
        smoothing: lambda,
    }
}

/// An entropy-like quantity tagged with its unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Information {
    pub value: f64,
    pub unit: Unit,
}

fn entropy_nats(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / total) * (c / total).ln())
        .sum()
}

/// Plug-in `H(Y | A)` from counts over `(y, a)` in `Group::ALL` order.
pub fn conditional_entropy_y_given_a(counts: &[u64; 4], unit: Unit) -> Result<Information> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("H(Y|A) needs at least one sample".into()));
    }
    let mut nats = 0.0;
    for a in 0..2u8 {
        let c0 = counts[Group::new(0, a).index()] as f64;
        let c1 = counts[Group::new(1, a).index()] as f64;
        nats += (c0 + c1) / total as f64 * entropy_nats(&[c0, c1]);
    }
    Ok(Information {
        value: unit.from_nats(nats),
        unit,
    })
}

/// Worst-group error bound `(H(Y|A) + B) / log 2`, unclamped.
pub fn fano_worst_group_bound(h_y_given_a: &Information, bias: &BiasMeasurement) -> Result<f64> {
    if h_y_given_a.unit != bias.unit {
        return Err(Error::UnitMismatch {
            left: h_y_given_a.unit.to_string(),
            right: bias.unit.to_string(),
        });
    }
    Ok((h_y_given_a.value + bias.value) / bias.unit.log_two())
}

/// Monte-Carlo estimate of `min_y ∫ min(p1(x|y), p2(x|y)) dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Per-label overlaps `[y=0, y=1]`.
    pub per_label: [f64; 2],
    pub per_label_stderr: [f64; 2],
    /// Draws per label.
    pub n: u64,
}

/// Draws from the equal-weight mixture `(p1 + p2)/2` for each label and
/// averages `min(p1, p2) / mixture`.
pub fn feature_overlap(spec1: &ProblemSpec, spec2: &ProblemSpec, mc_samples: usize, seed: u64) -> Result<OverlapEstimate> {
    if spec1.dim() != spec2.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec1.dim(),
            got: spec2.dim(),
        });
    }
    if mc_samples == 0 {
        return Err(Error::validation("mc_samples", "must be at least 1"));
    }
    let mut rng = rng::stream("overlap", &format!("{}|{}", spec1.id, spec2.id), seed);
    let dim = spec1.dim();
    let mut x = vec![0.0; dim];
    let mut per_label = [0.0; 2];
    let mut per_label_stderr = [0.0; 2];

    for y in 0..2u8 {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..mc_samples {
            let spec = if rng.random_bool(0.5) { spec2 } else { spec1 };
            let a = u8::from(rng.random_bool(spec.attribute_given_label(y)));
            let sd = spec.feature_model.noise_sd;
            for (xi, m) in x.iter_mut().zip(spec.group_mean(Group::new(y, a))) {
                let z: f64 = rng.sample(StandardNormal);
                *xi = m + sd * z;
            }
            let l1 = spec1.log_conditional_density(&x, y)?;
            let l2 = spec2.log_conditional_density(&x, y)?;
            // min(p1,p2) / ((p1+p2)/2) = 2 / (1 + exp|l1 - l2|)
            let gap = (l1 - l2).abs();
            let ratio = if gap.is_finite() { 2.0 / (1.0 + gap.exp()) } else { 0.0 };
            sum += ratio;
            sum_sq += ratio * ratio;
        }
        let m = mc_samples as f64;
        let mean = sum / m;
        let var = if mc_samples > 1 {
            ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0)
        } else {
            0.0
        };
        per_label[y as usize] = mean;
        per_label_stderr[y as usize] = (var / m).sqrt();
    }
    let worst = if per_label[0] <= per_label[1] { 0 } else { 1 };
    Ok(OverlapEstimate {
        value: per_label[worst].clamp(0.0, 1.0),
        stderr: per_label_stderr[worst],
        per_label,
        per_label_stderr,
        n: mc_samples as u64,
    })
}

fn sorted_finite(values: &[f64], name: &str) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty(format!("{name} is empty")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} contains a non-finite value")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Wasserstein-1 distance between two empirical measures on the real line,
/// computed as the integral of the absolute quantile-function difference.
pub fn w1_empirical(losses1: &[f64], losses2: &[f64]) -> Result<f64> {
    let u = sorted_finite(losses1, "losses1")?;
    let v = sorted_finite(losses2, "losses2")?;
    let (n, m) = (u.len(), v.len());
    if n == m {
        let total: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        return Ok(total / n as f64);
    }
    // quantile levels are i/n and j/m; work on the common grid of 1/(n m)
    let (nn, mm) = (n as u128, m as u128);
    let scale = (nn * mm) as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut t: u128 = 0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_u = (i as u128 + 1) * mm;
        let next_v = (j as u128 + 1) * nn;
        let next = next_u.min(next_v);
        total += (next - t) as f64 * (u[i] - v[j]).abs();
        t = next;
        if next_u == next {
            i += 1;
        }
        if next_v == next {
            j += 1;
        }
    }
    Ok(total / scale)
}

/// Constants of the coupling bound and the overlap threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundParams {
    pub lipschitz: f64,
    pub diameter: f64,
    pub constant: f64,
    pub tau: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        BoundParams {
            lipschitz: 1.0,
            diameter: 1.0,
            constant: 1.0,
            tau: 0.2,
        }
    }
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lipschitz", self.lipschitz),
            ("diameter", self.diameter),
            ("constant", self.constant),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(field, format!("{v} must be finite and > 0")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::validation("tau", format!("{} is outside (0, 1)", self.tau)));
        }
        Ok(())
    }
}

/// `L · diam · (1 - η) / η`.
pub fn w1_coupling_bound(bp: &BoundParams, eta: f64) -> Result<f64> {
    bp.validate()?;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Domain(format!("overlap {eta} is outside (0, 1]")));
    }
    Ok(bp.lipschitz * bp.diameter * (1.0 - eta) / eta)
}
