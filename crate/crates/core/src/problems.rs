//! Synthetic biased binary-classification problems.
//!
//! A [`ProblemSpec`] fixes the label marginal `P(Y=1)`, the attribute channel
//! `P(A=1|Y)` and an axis-separated Gaussian feature model: the first
//! `core_dim` coordinates are centred at `±core_mean_scale` according to `Y`,
//! the remaining `spurious_dim` coordinates at `±spurious_mean_scale`
//! according to `A`. Label/attribute value 0 maps to `-1`, value 1 to `+1`.
//! `overlap_control` translates every group mean along the first core axis by
//! that many noise standard deviations, which moves a spec's class-conditional
//! distributions away from an untranslated reference.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const ALPHA_TOLERANCE: f64 = 1e-12;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// One of the four `(y, a)` subpopulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub y: u8,
    pub a: u8,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group { y: 0, a: 0 },
        Group { y: 0, a: 1 },
        Group { y: 1, a: 0 },
        Group { y: 1, a: 1 },
    ];

    pub fn new(y: u8, a: u8) -> Self {
        debug_assert!(y <= 1 && a <= 1);
        Group { y, a }
    }

    /// Position in `Group::ALL`, i.e. `2y + a`.
    pub fn index(self) -> usize {
        2 * self.y as usize + self.a as usize
    }

    pub fn from_index(i: usize) -> Self {
        Group::ALL[i]
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(y={},a={})", self.y, self.a)
    }
}

/// How `P(A|Y)` was parameterized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Spurious { alpha: f64 },
    Imbalance { ratio: f64 },
    /// `attribute_table = [P(A=1|Y=0), P(A=1|Y=1)]`.
    Custom { attribute_table: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureModel {
    pub core_dim: usize,
    pub spurious_dim: usize,
    pub core_mean_scale: f64,
    pub spurious_mean_scale: f64,
    pub noise_sd: f64,
}

impl Default for FeatureModel {
    fn default() -> Self {
        FeatureModel {
            core_dim: 1,
            spurious_dim: 1,
            core_mean_scale: 2.0,
            spurious_mean_scale: 2.0,
            noise_sd: 1.0,
        }
    }
}

impl FeatureModel {
    pub fn dim(&self) -> usize {
        self.core_dim + self.spurious_dim
    }

    fn validate(&self) -> Result<()> {
        if self.core_dim < 1 {
            return Err(Error::validation("feature_model.core_dim", "must be at least 1"));
        }
        if self.spurious_dim < 1 {
            return Err(Error::validation("feature_model.spurious_dim", "must be at least 1"));
        }
        if !(self.core_mean_scale >= 0.0 && self.core_mean_scale.is_finite()) {
            return Err(Error::validation("feature_model.core_mean_scale", "must be finite and >= 0"));
        }
        if !(self.spurious_mean_scale >= 0.0 && self.spurious_mean_scale.is_finite()) {
            return Err(Error::validation(
                "feature_model.spurious_mean_scale",
                "must be finite and >= 0",
            ));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::validation("feature_model.noise_sd", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Full generative description of a biased binary-classification problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub id: String,
    pub mechanism: Mechanism,
    /// `P(Y=1)`.
    pub class_marginal: f64,
    /// `[P(A=1|Y=0), P(A=1|Y=1)]`.
    pub attribute_conditionals: [f64; 2],
    pub feature_model: FeatureModel,
    #[serde(default)]
    pub overlap_control: f64,
}

fn check_probability(field: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::validation(field, format!("{p} is not a probability in [0, 1]")))
    }
}

fn sign(bit: u8) -> f64 {
    if bit == 0 {
        -1.0
    } else {
        1.0
    }
}

/// Six significant decimals without trailing zeros, for readable ids.
fn short(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Spec with `P(A=1|Y=1) = (1+alpha)/2` and `P(A=1|Y=0) = (1-alpha)/2`.
pub fn make_spurious_spec(alpha: f64, pi: f64, feature_model: FeatureModel) -> Result<ProblemSpec> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(Error::validation("alpha", format!("{alpha} is outside [-1, 1]")));
    }
    check_probability("pi", pi)?;
    let spec = ProblemSpec {
        id: format!("spurious-a{}-pi{}", short(alpha), short(pi)),
        mechanism: Mechanism::Spurious { alpha },
        class_marginal: pi,
        attribute_conditionals: [(1.0 - alpha) / 2.0, (1.0 + alpha) / 2.0],
        feature_model,
        overlap_control: 0.0,
    };
    spec.validate()?;
    Ok(spec)
}

/// Spec realizing `P(Y=1,A=1) / P(Y=0,A=1) = ratio` with `P(A=1) = 0.5`.
pub fn make_imbalance_spec(ratio: f64, pi: f64, feature_model: FeatureModel) -> Result<ProblemSpec> {
    make_imbalance_spec_with_marginal(ratio, pi, 0.5, feature_model)
}

pub fn make_imbalance_spec_with_marginal(
    ratio: f64,
    pi: f64,
    attribute_marginal: f64,
    feature_model: FeatureModel,
) -> Result<ProblemSpec> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::validation("ratio", format!("{ratio} must be finite and > 0")));
    }
    check_probability("pi", pi)?;
    check_probability("attribute_marginal", attribute_marginal)?;
    if pi <= 0.0 || pi >= 1.0 {
        return Err(Error::validation("pi", "imbalance specs need both labels present"));
    }
    let p11 = attribute_marginal * ratio / (1.0 + ratio);
    let p01 = attribute_marginal / (1.0 + ratio);
    let conditionals = [p01 / (1.0 - pi), p11 / pi];
    if conditionals.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::validation(
            "ratio",
            format!("ratio {ratio} with pi {pi} and P(A=1) {attribute_marginal} gives group masses outside [0, 1]"),
        ));
    }
    let spec = ProblemSpec {
        id: if attribute_marginal == 0.5 {
            format!("imbalance-r{}-pi{}", short(ratio), short(pi))
        } else {
            format!("imbalance-r{}-pi{}-m{}", short(ratio), short(pi), short(attribute_marginal))
        },
        mechanism: Mechanism::Imbalance { ratio },
        class_marginal: pi,
        attribute_conditionals: conditionals,
        feature_model,
        overlap_control: 0.0,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn make_custom_spec(attribute_table: [f64; 2], pi: f64, feature_model: FeatureModel) -> Result<ProblemSpec> {
    check_probability("attribute_table[0]", attribute_table[0])?;
    check_probability("attribute_table[1]", attribute_table[1])?;
    check_probability("pi", pi)?;
    let spec = ProblemSpec {
        id: format!("custom-{}-{}-pi{}", short(attribute_table[0]), short(attribute_table[1]), short(pi)),
        mechanism: Mechanism::Custom { attribute_table },
        class_marginal: pi,
        attribute_conditionals: attribute_table,
        feature_model,
        overlap_control: 0.0,
    };
    spec.validate()?;
    Ok(spec)
}

impl ProblemSpec {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_overlap_control(mut self, overlap_control: f64) -> Self {
        self.overlap_control = overlap_control;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("id", "must not be empty"));
        }
        check_probability("class_marginal", self.class_marginal)?;
        check_probability("attribute_conditionals[0]", self.attribute_conditionals[0])?;
        check_probability("attribute_conditionals[1]", self.attribute_conditionals[1])?;
        self.feature_model.validate()?;
        if !(self.overlap_control >= 0.0 && self.overlap_control.is_finite()) {
            return Err(Error::validation("overlap_control", "must be finite and >= 0"));
        }
        match &self.mechanism {
            Mechanism::Spurious { alpha } => {
                if !(-1.0..=1.0).contains(alpha) {
                    return Err(Error::validation("alpha", format!("{alpha} is outside [-1, 1]")));
                }
                if (self.alpha() - alpha).abs() > ALPHA_TOLERANCE {
                    return Err(Error::validation(
                        "attribute_conditionals",
                        format!("difference {} does not match alpha {alpha}", self.alpha()),
                    ));
                }
            }
            Mechanism::Imbalance { ratio } => {
                if !(*ratio > 0.0 && ratio.is_finite()) {
                    return Err(Error::validation("ratio", format!("{ratio} must be finite and > 0")));
                }
                if let Some(realized) = self.imbalance_ratio() {
                    if (realized - ratio).abs() > 1e-9 * ratio.max(1.0) {
                        return Err(Error::validation(
                            "attribute_conditionals",
                            format!("group masses realize ratio {realized}, not {ratio}"),
                        ));
                    }
                }
            }
            Mechanism::Custom { attribute_table } => {
                if *attribute_table != self.attribute_conditionals {
                    return Err(Error::validation(
                        "attribute_conditionals",
                        "must equal the custom attribute_table",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.feature_model.dim()
    }

    /// `P(A=1|Y=y)`.
    pub fn attribute_given_label(&self, y: u8) -> f64 {
        self.attribute_conditionals[y as usize]
    }

    /// `P(A=1|Y=1) - P(A=1|Y=0)` recomputed from the conditionals.
    pub fn alpha(&self) -> f64 {
        self.attribute_conditionals[1] - self.attribute_conditionals[0]
    }

    /// `P(Y=1,A=1) / P(Y=0,A=1)`, `None` when the denominator group is empty.
    pub fn imbalance_ratio(&self) -> Option<f64> {
        let p = self.group_probabilities();
        let den = p[Group::new(0, 1).index()];
        (den > 0.0).then(|| p[Group::new(1, 1).index()] / den)
    }

    /// Joint `P(Y=y, A=a)` in `Group::ALL` order.
    pub fn group_probabilities(&self) -> [f64; 4] {
        let pi = self.class_marginal;
        let mut out = [0.0; 4];
        for g in Group::ALL {
            let py = if g.y == 1 { pi } else { 1.0 - pi };
            let pa1 = self.attribute_given_label(g.y);
            let pa = if g.a == 1 { pa1 } else { 1.0 - pa1 };
            out[g.index()] = py * pa;
        }
        out
    }

    pub fn group_mean(&self, group: Group) -> Vec<f64> {
        let fm = &self.feature_model;
        let mut mean = Vec::with_capacity(fm.dim());
        mean.extend(std::iter::repeat_n(sign(group.y) * fm.core_mean_scale, fm.core_dim));
        mean.extend(std::iter::repeat_n(sign(group.a) * fm.spurious_mean_scale, fm.spurious_dim));
        mean[0] += self.overlap_control * fm.noise_sd;
        mean
    }

    /// `ln p(x | y)` of the attribute mixture.
    pub fn log_conditional_density(&self, x: &[f64], y: u8) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let pa1 = self.attribute_given_label(y);
        let mut terms = [f64::NEG_INFINITY; 2];
        for (a, weight) in [(0u8, 1.0 - pa1), (1u8, pa1)] {
            if weight > 0.0 {
                terms[a as usize] = weight.ln() + self.log_group_density(x, Group::new(y, a));
            }
        }
        Ok(log_sum_exp(terms[0], terms[1]))
    }

    fn log_group_density(&self, x: &[f64], group: Group) -> f64 {
        let sd = self.feature_model.noise_sd;
        let mean = self.group_mean(group);
        let sq: f64 = x.iter().zip(&mean).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum();
        let d = x.len() as f64;
        -0.5 * sq / (sd * sd) - d * (sd.ln() + LN_SQRT_2PI)
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Exact mixture density `sum_a P(A=a|Y=y) N(x; mean(y,a), sd^2 I)`.
pub fn conditional_density(spec: &ProblemSpec, x: &[f64], y: u8) -> Result<f64> {
    spec.log_conditional_density(x, y).map(f64::exp)
}

/// Per-group counts and, once a model has been evaluated, per-group accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub counts: [u64; 4],
    pub accuracies: [Option<f64>; 4],
}

impl GroupTable {
    pub fn from_counts(counts: [u64; 4]) -> Self {
        GroupTable {
            counts,
            accuracies: [None; 4],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, group: Group) -> u64 {
        self.counts[group.index()]
    }

    pub fn empty_groups(&self) -> Vec<Group> {
        Group::ALL.into_iter().filter(|g| self.count(*g) == 0).collect()
    }
}

/// Sampled `(x, y, a)` triples. Features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<u8>,
    pub attributes: Vec<u8>,
    pub spec_id: String,
    pub seed: u64,
    pub n: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<u8>,
        attributes: Vec<u8>,
        spec_id: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("dim", "must be at least 1"));
        }
        let n = labels.len();
        if attributes.len() != n || features.len() != n * dim {
            return Err(Error::LengthMismatch {
                what: format!(
                    "{} feature values for dim {dim}, {n} labels, {} attributes",
                    features.len(),
                    attributes.len()
                ),
            });
        }
        if labels.iter().chain(&attributes).any(|v| *v > 1) {
            return Err(Error::validation("labels/attributes", "values must be 0 or 1"));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            attributes,
            spec_id: spec_id.into(),
            seed,
            n,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn group(&self, i: usize) -> Group {
        Group::new(self.labels[i], self.attributes[i])
    }

    pub fn group_counts(&self) -> [u64; 4] {
        let mut counts = [0u64; 4];
        for i in 0..self.n {
            counts[self.group(i).index()] += 1;
        }
        counts
    }

    pub fn group_table(&self) -> GroupTable {
        GroupTable::from_counts(self.group_counts())
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            attributes: indices.iter().map(|&i| self.attributes[i]).collect(),
            spec_id: self.spec_id.clone(),
            seed: self.seed,
            n: indices.len(),
        }
    }

    /// Contiguous split by fractions; the last part takes the remainder.
    pub fn split(&self, fractions: &[f64]) -> Result<Vec<Dataset>> {
        let total: f64 = fractions.iter().sum();
        if fractions.is_empty() || fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation("fractions", "must be non-negative and sum to 1"));
        }
        let mut parts = Vec::with_capacity(fractions.len());
        let mut start = 0usize;
        let mut acc = 0.0;
        for (k, f) in fractions.iter().enumerate() {
            acc += f;
            let end = if k + 1 == fractions.len() {
                self.n
            } else {
                ((acc * self.n as f64).round() as usize).min(self.n)
            };
            let idx: Vec<usize> = (start..end).collect();
            parts.push(self.subset(&idx));
            start = end;
        }
        Ok(parts)
    }

    /// CSV with header `x0..x{d-1},y,a`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(out, "{},y,a", header.join(","))?;
        for i in 0..self.n {
            for v in self.row(i) {
                write!(out, "{v},")?;
            }
            writeln!(out, "{},{}", self.labels[i], self.attributes[i])?;
        }
        Ok(())
    }
}

/// Draw `n` rows: exact group counts from a multinomial over `P(Y,A)`, then a
/// shuffle, then Gaussian features per group. The stream is keyed by
/// `(spec.id, seed)`.
pub fn sample(spec: &ProblemSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::validation("n", "sample size must be at least 1"));
    }
    let mut rng = rng::stream("sample", &spec.id, seed);
    let probs = spec.group_probabilities();

    let mut counts = [0usize; 4];
    let mut remaining = n as u64;
    let mut mass_left = 1.0f64;
    for (k, p) in probs.iter().take(3).enumerate() {
        let q = if mass_left > 0.0 { (p / mass_left).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(remaining, q)
            .map_err(|e| Error::Domain(format!("binomial({remaining}, {q}): {e}")))?
            .sample(&mut rng);
        counts[k] = draw as usize;
        remaining -= draw;
        mass_left -= p;
    }
    counts[3] = remaining as usize;

    if n >= 1000 {
        for k in 0..4 {
            if probs[k] > 0.0 && counts[k] == 0 {
                let donor = (0..4).max_by_key(|&j| counts[j]).unwrap_or(0);
                counts[donor] -= 1;
                counts[k] = 1;
                log::warn!(
                    "spec {} seed {seed}: group {} drew no samples at n={n}; moved one from {}",
                    spec.id,
                    Group::from_index(k),
                    Group::from_index(donor)
                );
            }
        }
    }

    let mut assignment: Vec<u8> = Vec::with_capacity(n);
    for (k, c) in counts.iter().enumerate() {
        assignment.extend(std::iter::repeat_n(k as u8, *c));
    }
    assignment.shuffle(&mut rng);

    let dim = spec.dim();
    let sd = spec.feature_model.noise_sd;
    let means: Vec<Vec<f64>> = Group::ALL.iter().map(|g| spec.group_mean(*g)).collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    for k in assignment {
        let g = Group::from_index(k as usize);
        for m in &means[k as usize] {
            let z: f64 = rng.sample(StandardNormal);
            features.push(m + sd * z);
        }
        labels.push(g.y);
        attributes.push(g.a);
    }
    Dataset::new(features, dim, labels, attributes, spec.id.clone(), seed)
}

/// Plug-in `P(A=1|Y=1) - P(A=1|Y=0)`.
pub fn empirical_alpha(ds: &Dataset) -> Result<f64> {
    let c = ds.group_counts();
    let n0 = c[0] + c[1];
    let n1 = c[2] + c[3];
    if n0 == 0 || n1 == 0 {
        return Err(Error::UndefinedEstimate(format!(
            "alpha needs both labels present (Y=0: {n0}, Y=1: {n1})"
        )));
    }
    Ok(c[3] as f64 / n1 as f64 - c[1] as f64 / n0 as f64)
}

/// Plug-in `count(1,1) / count(0,1)`.
pub fn empirical_ratio(ds: &Dataset) -> Result<f64> {
    let c = ds.group_counts();
    let den = c[Group::new(0, 1).index()];
    if den == 0 {
        return Err(Error::UndefinedEstimate("ratio denominator group (y=0,a=1) is empty".into()));
    }
    Ok(c[Group::new(1, 1).index()] as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm() -> FeatureModel {
        FeatureModel::default()
    }

    #[test]
    fn alpha_zero_gives_uniform_groups() {
        let spec = make_spurious_spec(0.0, 0.5, fm()).unwrap();
        for p in spec.group_probabilities() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_split_at_095() {
        let spec = make_spurious_spec(0.95, 0.5, fm()).unwrap();
        assert!((spec.attribute_conditionals[1] - 0.975).abs() < 1e-15);
        assert!((spec.attribute_conditionals[0] - 0.025).abs() < 1e-15);
    }

    #[test]
    fn majority_mass_at_09() {
        let spec = make_spurious_spec(0.9, 0.5, fm()).unwrap();
        let p = spec.group_probabilities();
        let aligned = p[Group::new(0, 0).index()] + p[Group::new(1, 1).index()];
        assert!((aligned - 0.95).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_inputs_name_the_field() {
        assert_eq!(make_spurious_spec(1.2, 0.5, fm()).unwrap_err().field(), Some("alpha"));
        assert_eq!(make_spurious_spec(0.2, 1.5, fm()).unwrap_err().field(), Some("pi"));
        assert_eq!(make_imbalance_spec(0.0, 0.5, fm()).unwrap_err().field(), Some("ratio"));
        assert_eq!(make_imbalance_spec(-3.0, 0.5, fm()).unwrap_err().field(), Some("ratio"));
    }

    #[test]
    fn imbalance_ratio_one_is_uniform() {
        let spec = make_imbalance_spec(1.0, 0.5, fm()).unwrap();
        for p in spec.group_probabilities() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn imbalance_ratio_ten() {
        let spec = make_imbalance_spec(10.0, 0.5, fm()).unwrap();
        let p = spec.group_probabilities();
        assert!((p[3] - 10.0 * p[1]).abs() < 1e-12);
        assert!((spec.imbalance_ratio().unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_39_matches_alpha_095() {
        let imb = make_imbalance_spec(39.0, 0.5, fm()).unwrap();
        let spur = make_spurious_spec(0.95, 0.5, fm()).unwrap();
        for (a, b) in imb.group_probabilities().iter().zip(spur.group_probabilities()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_imbalance_is_rejected() {
        // P(Y=1,A=1) = 0.5 * 99/100 cannot fit inside P(Y=1) = 0.2
        assert_eq!(make_imbalance_spec(99.0, 0.2, fm()).unwrap_err().field(), Some("ratio"));
    }

    #[test]
    fn validate_catches_tampered_conditionals() {
        let mut spec = make_spurious_spec(0.5, 0.5, fm()).unwrap();
        spec.attribute_conditionals[1] += 1e-6;
        assert!(spec.validate().is_err());
        let mut spec = make_spurious_spec(0.5, 0.5, fm()).unwrap();
        spec.feature_model.noise_sd = 0.0;
        assert_eq!(spec.validate().unwrap_err().field(), Some("feature_model.noise_sd"));
    }

    #[test]
    fn zero_samples_rejected() {
        let spec = make_spurious_spec(0.5, 0.5, fm()).unwrap();
        assert!(sample(&spec, 0, 1).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = make_spurious_spec(0.7, 0.4, fm()).unwrap();
        let a = sample(&spec, 2000, 42).unwrap();
        let b = sample(&spec, 2000, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&spec, 2000, 43).unwrap());
    }

    #[test]
    fn empirical_alpha_converges() {
        let spec = make_spurious_spec(0.9, 0.5, fm()).unwrap();
        let ds = sample(&spec, 100_000, 42).unwrap();
        assert!((empirical_alpha(&ds).unwrap() - 0.9).abs() < 0.01);
    }

    #[test]
    fn empirical_alpha_extreme_and_independent() {
        let ds = Dataset::new(vec![0.0; 4], 1, vec![0, 1, 0, 1], vec![0, 1, 0, 1], "t", 0).unwrap();
        assert_eq!(empirical_alpha(&ds).unwrap(), 1.0);

        let spec = make_spurious_spec(0.0, 0.5, fm()).unwrap();
        let ds = sample(&spec, 100_000, 7).unwrap();
        assert!(empirical_alpha(&ds).unwrap().abs() < 0.02);
    }

    #[test]
    fn empirical_ratio_definition() {
        let mut labels = vec![1u8; 900];
        labels.extend(vec![0u8; 100]);
        let ds = Dataset::new(vec![0.0; 1000], 1, labels, vec![1u8; 1000], "t", 0).unwrap();
        assert_eq!(empirical_ratio(&ds).unwrap(), 9.0);
    }

    #[test]
    fn empty_conditioning_group_is_an_error() {
        let ds = Dataset::new(vec![0.0; 3], 1, vec![1, 1, 1], vec![0, 1, 1], "t", 0).unwrap();
        assert!(matches!(empirical_alpha(&ds), Err(Error::UndefinedEstimate(_))));
        assert!(matches!(empirical_ratio(&ds), Err(Error::UndefinedEstimate(_))));
    }

    #[test]
    fn rare_groups_present_at_moderate_n() {
        let spec = make_spurious_spec(0.999, 0.5, fm()).unwrap();
        let ds = sample(&spec, 1000, 3).unwrap();
        assert!(ds.group_table().empty_groups().is_empty());
    }

    #[test]
    fn density_at_group_mean_single_dim_pair() {
        // one core and one spurious coordinate, both at the (1,1) mean
        let spec = make_spurious_spec(0.5, 0.5, fm()).unwrap();
        let x = spec.group_mean(Group::new(1, 1));
        let peak = 1.0 / (2.0 * std::f64::consts::PI);
        let far = peak * (-0.5 * 16.0f64).exp(); // (1,0) component sits 4 sd away
        let expected = 0.75 * peak + 0.25 * far;
        let got = conditional_density(&spec, &x, 1).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn density_dimension_mismatch() {
        let spec = make_spurious_spec(0.5, 0.5, fm()).unwrap();
        assert!(matches!(
            conditional_density(&spec, &[0.0], 0),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn density_integrates_to_one() {
        // trapezoid over a 2-D grid; the spurious marginal is a two-component mixture
        let spec = make_spurious_spec(0.3, 0.5, fm()).unwrap();
        let h = 0.02;
        let steps = 1000;
        let mut total = 0.0;
        for i in 0..=steps {
            let x0 = -10.0 + h * i as f64;
            for j in 0..=steps {
                let x1 = -10.0 + h * j as f64;
                total += conditional_density(&spec, &[x0, x1], 1).unwrap();
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn csv_header_and_rows() {
        let ds = Dataset::new(vec![0.5, -1.0, 2.0, 3.0], 2, vec![1, 0], vec![0, 1], "t", 0).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x0,x1,y,a\n0.5,-1,1,0\n2,3,0,1\n");
    }

    #[test]
    fn spec_json_field_names_are_stable() {
        let spec = make_spurious_spec(0.9, 0.5, fm()).unwrap();
        let v = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["mechanism"]["spurious"]["alpha"], 0.9);
        assert_eq!(v["class_marginal"], 0.5);
        assert!(v["attribute_conditionals"].is_array());
        assert_eq!(v["feature_model"]["noise_sd"], 1.0);
        let back: ProblemSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
    }
}
