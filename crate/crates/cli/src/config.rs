//! Experiment configs: JSON on disk, resolved into validated core types.
//!
//! Every error carries the file, line and column of the offending value.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use biaslab::debias::{Method, MethodConfig};
use biaslab::equivalence::{CSource, DeltaObservation, Protocol, DEFAULT_SEEDS};
use biaslab::infotheory::BoundParams;
use biaslab::learner::ModelParams;
use biaslab::problems::{
    make_custom_spec, make_imbalance_spec_with_marginal, make_spurious_spec, FeatureModel, ProblemSpec,
};
use biaslab::Error as CoreError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::runner::slug;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Generate,
    Train,
    Measure,
    ValidatePair,
    Transfer,
    Sweep,
}

impl Kind {
    /// The command-line verb that runs this kind.
    pub fn verb(self) -> &'static str {
        match self {
            Kind::Generate => "gen",
            Kind::Train => "train",
            Kind::Measure => "measure",
            Kind::ValidatePair => "validate",
            Kind::Transfer => "transfer",
            Kind::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: usize,
    pub column: usize,
    pub field: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}: invalid `{}`: {}",
            self.path.display(),
            self.line,
            self.column,
            self.field,
            self.reason
        )
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// A loaded source file, used to turn byte offsets into positions.
struct Source<'a> {
    path: &'a Path,
    text: &'a str,
}

impl<'a> Source<'a> {
    fn position(&self, offset: usize) -> (usize, usize) {
        let before = &self.text[..offset.min(self.text.len())];
        let line = before.matches('\n').count() + 1;
        let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
        (line, column)
    }

    fn offset_of(&self, raw: &RawValue) -> usize {
        (raw.get().as_ptr() as usize).saturating_sub(self.text.as_ptr() as usize)
    }

    fn error_at(&self, offset: usize, field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
        let (line, column) = self.position(offset);
        ConfigError {
            path: self.path.to_path_buf(),
            line,
            column,
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn error_in(&self, raw: &RawValue, field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
        self.error_at(self.offset_of(raw), field, reason)
    }

    /// Positions an error on the key `name` inside `raw`, or on `raw` itself.
    fn error_on_key(&self, raw: &RawValue, name: &str, field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
        let start = self.offset_of(raw);
        let key = name.rsplit('.').next().unwrap_or(name);
        let key = key.split('[').next().unwrap_or(key);
        let offset = raw.get().find(&format!("\"{key}\"")).map_or(start, |i| start + i);
        self.error_at(offset, field, reason)
    }

    fn parse<T: DeserializeOwned>(&self, raw: &RawValue, field: &str) -> Result<T> {
        serde_json::from_str(raw.get()).map_err(|e| {
            // positions from serde are relative to the fragment
            let start = self.offset_of(raw);
            let frag = raw.get();
            let mut offset = start;
            let mut line = 1;
            for (i, ch) in frag.char_indices() {
                if line == e.line() {
                    offset = start + i + e.column().saturating_sub(1);
                    break;
                }
                if ch == '\n' {
                    line += 1;
                }
            }
            self.error_at(offset, field, strip_position(&e.to_string()))
        })
    }

    fn core_error(&self, raw: &RawValue, prefix: &str, err: CoreError) -> ConfigError {
        match err.field() {
            Some(name) => {
                let field = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
                let reason = match &err {
                    CoreError::Validation { reason, .. } => reason.clone(),
                    other => other.to_string(),
                };
                self.error_on_key(raw, name, field, reason)
            }
            None => self.error_in(raw, prefix, err.to_string()),
        }
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

fn read(path: &Path) -> std::result::Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn default_pi() -> f64 {
    0.5
}
fn default_marginal() -> f64 {
    0.5
}

/// Shorthand for the three spec constructors.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum Recipe {
    Spurious {
        alpha: f64,
        #[serde(default = "default_pi")]
        pi: f64,
        #[serde(default)]
        features: FeatureModel,
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        overlap_control: f64,
    },
    Imbalance {
        ratio: f64,
        #[serde(default = "default_pi")]
        pi: f64,
        #[serde(default = "default_marginal")]
        attribute_marginal: f64,
        #[serde(default)]
        features: FeatureModel,
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        overlap_control: f64,
    },
    Custom {
        attribute_table: [f64; 2],
        #[serde(default = "default_pi")]
        pi: f64,
        #[serde(default)]
        features: FeatureModel,
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        overlap_control: f64,
    },
}

impl Recipe {
    fn build(self) -> biaslab::Result<ProblemSpec> {
        let (spec, id, shift) = match self {
            Recipe::Spurious { alpha, pi, features, id, overlap_control } => {
                (make_spurious_spec(alpha, pi, features)?, id, overlap_control)
            }
            Recipe::Imbalance { ratio, pi, attribute_marginal, features, id, overlap_control } => {
                (make_imbalance_spec_with_marginal(ratio, pi, attribute_marginal, features)?, id, overlap_control)
            }
            Recipe::Custom { attribute_table, pi, features, id, overlap_control } => {
                (make_custom_spec(attribute_table, pi, features)?, id, overlap_control)
            }
        };
        let spec = match id {
            Some(id) => spec.with_id(id),
            None => spec,
        }
        .with_overlap_control(shift);
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum CSourceConfig {
    RawBound(BoundParams),
    Calibrated {
        #[serde(default)]
        fixture: Option<PathBuf>,
    },
    Fixed {
        value: f64,
    },
}

fn default_search_samples() -> usize {
    20_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepInput {
    #[serde(default)]
    alphas: Vec<f64>,
    #[serde(default = "default_pi")]
    pi: f64,
    #[serde(default)]
    features: FeatureModel,
    #[serde(default)]
    pairs: Vec<[usize; 2]>,
    #[serde(default)]
    overlap_targets: Vec<f64>,
    #[serde(default = "default_search_samples")]
    overlap_search_samples: usize,
}

/// One pair of a sweep, before any overlap adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPair {
    pub first: ProblemSpec,
    pub second: ProblemSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub pairs: Vec<SweepPair>,
    /// When non-empty every pair is repeated at each target overlap by
    /// shifting its second spec.
    pub overlap_targets: Vec<f64>,
    pub overlap_search_samples: usize,
}

/// A fully resolved, validated experiment. Serializes canonically for hashing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub specs: Vec<ProblemSpec>,
    pub method: MethodConfig,
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sweep: Option<SweepPlan>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub model: Option<ModelParams>,
    /// Excluded from the hash: where results go does not change them.
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn hash(&self) -> String {
        biaslab::canonical_hash(self)
    }
}

const KNOWN_FIELDS: [&str; 10] = [
    "kind", "specs", "method", "seeds", "output", "tolerance", "c_source", "protocol", "sweep", "model",
];

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = read(path).map_err(|reason| ConfigError {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        field: "config".into(),
        reason,
    })?;
    parse(&text, path)
}

/// Parses config text; `path` names the file in errors and anchors relative references.
pub fn parse(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let src = Source { path, text };
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let top: BTreeMap<String, &RawValue> = serde_json::from_str(text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        ConfigError {
            path: path.to_path_buf(),
            line,
            column,
            field: "config".into(),
            reason: strip_position(&e.to_string()),
        }
    })?;
    for (key, raw) in &top {
        if !KNOWN_FIELDS.contains(&key.as_str()) {
            return Err(src.error_in(raw, key.clone(), format!("unknown field; expected one of {}", KNOWN_FIELDS.join(", "))));
        }
    }
    let Some(kind_raw) = top.get("kind") else {
        return Err(src.error_at(0, "kind", "missing required field"));
    };
    let kind: Kind = src.parse(kind_raw, "kind")?;

    let mut specs = Vec::new();
    let mut spec_raws = Vec::new();
    if let Some(raw) = top.get("specs") {
        let items: Vec<&RawValue> = serde_json::from_str(raw.get()).map_err(|e| src.error_in(raw, "specs", strip_position(&e.to_string())))?;
        for (i, item) in items.into_iter().enumerate() {
            specs.push(resolve_spec(&src, item, &format!("specs[{i}]"), &base_dir)?);
            spec_raws.push(item);
        }
    }

    let method = match top.get("method") {
        Some(raw) => {
            let m: MethodConfig = src.parse(raw, "method")?;
            m.validate().map_err(|e| src.core_error(raw, "method", e))?;
            m
        }
        None => MethodConfig::new(Method::Erm, Default::default()),
    };

    let seeds: Vec<u64> = match top.get("seeds") {
        Some(raw) => {
            let s: Vec<u64> = src.parse(raw, "seeds")?;
            if s.is_empty() {
                return Err(src.error_in(raw, "seeds", "must not be empty"));
            }
            s
        }
        None => DEFAULT_SEEDS.to_vec(),
    };

    let mut protocol: Protocol = match top.get("protocol") {
        Some(raw) => src.parse(raw, "protocol")?,
        None => Protocol::default(),
    };
    if let Some(raw) = top.get("tolerance") {
        protocol.tolerance = src.parse(raw, "tolerance")?;
    }
    if let Some(raw) = top.get("c_source") {
        let cfg: CSourceConfig = src.parse(raw, "c_source")?;
        protocol.c_source = match cfg {
            CSourceConfig::RawBound(bp) => CSource::RawBound(bp),
            CSourceConfig::Fixed { value } => CSource::Fixed { value },
            CSourceConfig::Calibrated { fixture: None } => CSource::default(),
            CSourceConfig::Calibrated { fixture: Some(file) } => CSource::Calibrated {
                observations: load_fixture(&src, raw, &base_dir.join(file))?,
            },
        };
    }
    protocol.validate().map_err(|e| {
        let name = e.field().unwrap_or_default();
        let (raw, prefix) = if name.starts_with("c_source") {
            (top.get("c_source").or(top.get("protocol")), "")
        } else if name == "tolerance" {
            (top.get("tolerance").or(top.get("protocol")), "")
        } else {
            (top.get("protocol"), "protocol")
        };
        src.core_error(raw.copied().unwrap_or(kind_raw), prefix, e)
    })?;

    let output = match top.get("output") {
        Some(raw) => Some(src.parse::<PathBuf>(raw, "output")?),
        None => None,
    };

    let model = match top.get("model") {
        Some(raw) => {
            let file: PathBuf = src.parse(raw, "model")?;
            let full = base_dir.join(&file);
            let text = read(&full).map_err(|r| src.error_in(raw, "model", r))?;
            let model: ModelParams = serde_json::from_str(&text).map_err(|e| ConfigError {
                path: full.clone(),
                line: e.line(),
                column: e.column(),
                field: "model".into(),
                reason: strip_position(&e.to_string()),
            })?;
            Some(model)
        }
        None => None,
    };

    let sweep = match top.get("sweep") {
        Some(raw) => Some(resolve_sweep(&src, raw, &specs)?),
        None => None,
    };

    let anchor = |field: &str| top.get(field).copied().unwrap_or(kind_raw);
    match kind {
        Kind::Generate | Kind::Train | Kind::Measure if specs.is_empty() => {
            return Err(src.error_in(anchor("specs"), "specs", format!("{} needs at least one spec", kind.verb())));
        }
        Kind::ValidatePair | Kind::Transfer if specs.len() != 2 => {
            return Err(src.error_in(anchor("specs"), "specs", format!("{} needs exactly two specs, got {}", kind.verb(), specs.len())));
        }
        Kind::Sweep if sweep.is_none() => {
            return Err(src.error_in(kind_raw, "sweep", "sweep runs need a `sweep` section"));
        }
        _ => {}
    }
    if matches!(kind, Kind::ValidatePair | Kind::Transfer) && specs[0].dim() != specs[1].dim() {
        return Err(src.error_in(
            spec_raws[1],
            "specs[1].feature_model",
            format!("dimension {} differs from the first spec's {}", specs[1].dim(), specs[0].dim()),
        ));
    }
    if matches!(kind, Kind::Generate | Kind::Train | Kind::Measure) {
        for (j, s) in specs.iter().enumerate() {
            if let Some(i) = specs[..j].iter().position(|t| slug(&t.id) == slug(&s.id)) {
                return Err(src.error_in(spec_raws[j], format!("specs[{j}].id"), format!("id `{}` collides with specs[{i}]", s.id)));
            }
        }
    }
    if let (Some(m), Some(raw)) = (&model, top.get("model")) {
        if kind != Kind::Measure {
            return Err(src.error_in(raw, "model", "only measure runs take a model"));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.dim() != m.input_dim {
                return Err(src.error_in(raw, "model", format!("model input dimension {} differs from specs[{i}] dimension {}", m.input_dim, s.dim())));
            }
        }
    }

    Ok(ExperimentConfig {
        kind,
        specs,
        method,
        seeds,
        protocol,
        sweep,
        model,
        output,
    })
}

fn load_fixture(src: &Source<'_>, raw: &RawValue, file: &Path) -> Result<Vec<DeltaObservation>> {
    let text = read(file).map_err(|r| src.error_on_key(raw, "fixture", "c_source.fixture", r))?;
    serde_json::from_str(&text).map_err(|e| ConfigError {
        path: file.to_path_buf(),
        line: e.line(),
        column: e.column(),
        field: "c_source.fixture".into(),
        reason: strip_position(&e.to_string()),
    })
}

fn resolve_spec(src: &Source<'_>, raw: &RawValue, field: &str, base_dir: &Path) -> Result<ProblemSpec> {
    let value: serde_json::Value = src.parse(raw, field)?;
    let Some(obj) = value.as_object() else {
        return Err(src.error_in(raw, field, "expected an object"));
    };
    if obj.contains_key("file") {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct FileRef {
            file: PathBuf,
        }
        let r: FileRef = src.parse(raw, field)?;
        let full = base_dir.join(&r.file);
        let text = read(&full).map_err(|reason| src.error_on_key(raw, "file", format!("{field}.file"), reason))?;
        let inner = Source { path: &full, text: &text };
        let inner_raw: &RawValue = serde_json::from_str(&text).map_err(|e| ConfigError {
            path: full.clone(),
            line: e.line(),
            column: e.column(),
            field: field.into(),
            reason: strip_position(&e.to_string()),
        })?;
        let inner_value: serde_json::Value = inner.parse(inner_raw, field)?;
        if inner_value.get("file").is_some() {
            return Err(inner.error_in(inner_raw, field, "spec files cannot reference other files"));
        }
        return resolve_spec(&inner, inner_raw, field, base_dir);
    }
    let is_recipe = obj.len() == 1 && ["spurious", "imbalance", "custom"].iter().any(|k| obj.contains_key(*k));
    let spec = if is_recipe {
        let recipe: Recipe = src.parse(raw, field)?;
        recipe.build()
    } else {
        let spec: ProblemSpec = src.parse(raw, field)?;
        spec.validate().map(|_| spec)
    };
    spec.map_err(|e| src.core_error(raw, field, e))
}

fn resolve_sweep(src: &Source<'_>, raw: &RawValue, specs: &[ProblemSpec]) -> Result<SweepPlan> {
    let input: SweepInput = src.parse(raw, "sweep")?;
    let mut pairs = Vec::new();
    for (i, &alpha) in input.alphas.iter().enumerate() {
        let field = format!("sweep.alphas[{i}]");
        let first = make_spurious_spec(alpha, input.pi, input.features.clone()).map_err(|e| src.core_error(raw, &field, e))?;
        let ratio = biaslab::equivalence::alpha_to_ratio(alpha, input.pi)
            .map_err(|e| src.error_on_key(raw, "alphas", field.clone(), e.to_string()))?;
        let second = make_imbalance_spec_with_marginal(ratio, input.pi, 0.5, input.features.clone())
            .map_err(|e| src.core_error(raw, &field, e))?;
        pairs.push(SweepPair { first, second });
    }
    for (k, &[i, j]) in input.pairs.iter().enumerate() {
        let (Some(a), Some(b)) = (specs.get(i), specs.get(j)) else {
            return Err(src.error_on_key(raw, "pairs", format!("sweep.pairs[{k}]"), format!("spec index out of range; {} specs given", specs.len())));
        };
        if a.dim() != b.dim() {
            return Err(src.error_on_key(raw, "pairs", format!("sweep.pairs[{k}]"), "specs differ in feature dimension"));
        }
        pairs.push(SweepPair { first: a.clone(), second: b.clone() });
    }
    for (k, t) in input.overlap_targets.iter().enumerate() {
        if !(*t > 0.0 && *t < 1.0) {
            return Err(src.error_on_key(raw, "overlap_targets", format!("sweep.overlap_targets[{k}]"), format!("{t} is outside (0, 1)")));
        }
    }
    if input.overlap_search_samples == 0 {
        return Err(src.error_on_key(raw, "overlap_search_samples", "sweep.overlap_search_samples", "must be at least 1"));
    }
    Ok(SweepPlan {
        pairs,
        overlap_targets: input.overlap_targets,
        overlap_search_samples: input.overlap_search_samples,
    })
}
