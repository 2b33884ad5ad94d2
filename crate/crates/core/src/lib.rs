//! Bias-equivalence laboratory.
//!
//! Synthetic biased binary-classification problems ([`problems`]), the
//! conditional-mutual-information bias measure and its bounds
//! ([`infotheory`]), small trainable classifiers ([`learner`]), the ERM,
//! GroupDRO, JTT and DFR training strategies ([`debias`]), group-decomposed
//! evaluation ([`metrics`]) and end-to-end equivalence checks between pairs of
//! problems ([`equivalence`]).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod debias;
pub mod equivalence;
pub mod error;
pub mod infotheory;
pub mod learner;
pub mod metrics;
pub mod problems;
pub mod rng;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use error::{Error, Result};

/// JSON with object keys sorted at every level.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    fn sort(v: Value) -> Value {
        match v {
            Value::Object(map) => {
                let mut entries: Vec<(String, Value)> = map.into_iter().collect();
                entries.sort_by(|a, b| a.0.cmp(&b.0));
                Value::Object(entries.into_iter().map(|(k, v)| (k, sort(v))).collect())
            }
            Value::Array(items) => Value::Array(items.into_iter().map(sort).collect()),
            other => other,
        }
    }
    let value = serde_json::to_value(value).expect("serializable value");
    sort(value).to_string()
}

/// Hex SHA-256 of [`canonical_json`].
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let digest = Sha256::digest(canonical_json(value).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": [1, 2], "x": null}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": {"x": null, "y": [1, 2]}, "b": 1}"#).unwrap();
        assert_eq!(canonical_hash(&a), canonical_hash(&b));
        assert_eq!(canonical_json(&a), r#"{"a":{"x":null,"y":[1,2]},"b":1}"#);
    }
}
