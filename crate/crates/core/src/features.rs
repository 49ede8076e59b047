//! Feature schemas and canonical feature vectors.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub required: bool,
}

impl FeatureColumn {
    pub fn numeric(name: &str, required: bool) -> Self {
        Self { name: name.to_string(), kind: FeatureKind::Numeric, required }
    }

    pub fn categorical(name: &str, required: bool) -> Self {
        Self { name: name.to_string(), kind: FeatureKind::Categorical, required }
    }
}

/// Ordered list of typed columns. `version` increments whenever the column
/// list changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<FeatureColumn>,
    #[serde(default = "default_version")]
    pub version: u32,
}

fn default_version() -> u32 {
    1
}

impl FeatureSchema {
    pub fn new(columns: Vec<FeatureColumn>) -> Self {
        Self { columns, version: 1 }
    }

    pub fn column(&self, name: &str) -> Option<&FeatureColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Names that appear more than once.
    pub fn duplicate_names(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut dups = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                dups.insert(c.name.clone());
            }
        }
        dups.into_iter().collect()
    }

    /// Returns a new schema with `columns` replaced, bumping the version if
    /// anything changed.
    pub fn evolve(&self, columns: Vec<FeatureColumn>) -> Self {
        if columns == self.columns {
            self.clone()
        } else {
            Self { columns, version: self.version + 1 }
        }
    }
}

/// A single feature value. On the wire a number is numeric, a string is a
/// category token and `null` is the explicit missing marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Num(f64),
    Cat(String),
    Missing(Option<()>),
}

impl FeatureValue {
    pub const MISSING: FeatureValue = FeatureValue::Missing(None);

    pub fn is_missing(&self) -> bool {
        matches!(self, FeatureValue::Missing(_))
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            FeatureValue::Num(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            FeatureValue::Cat(s) => Some(s),
            _ => None,
        }
    }
}

impl From<f64> for FeatureValue {
    fn from(v: f64) -> Self {
        FeatureValue::Num(v)
    }
}

impl From<&str> for FeatureValue {
    fn from(v: &str) -> Self {
        FeatureValue::Cat(v.to_string())
    }
}

/// Feature values keyed by column name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub BTreeMap<String, FeatureValue>);

impl FeatureVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<FeatureValue>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&FeatureValue> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &FeatureValue)> {
        self.0.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("column `{column}` expects {expected:?}, got {got}")]
    TypeMismatch { column: String, expected: FeatureKind, got: String },
}

/// Result of projecting a raw feature map onto a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Canonicalized {
    pub vector: FeatureVector,
    /// Keys not present in the schema.
    pub dropped: usize,
}

/// Projects `raw` onto `schema`.
///
/// Unknown keys are dropped and counted. Every schema column is present in
/// the output; absent columns carry the missing marker. Typing is strict: a
/// numeric column never accepts a string, even one that parses as a number.
pub fn canonicalize(raw: &FeatureVector, schema: &FeatureSchema) -> Result<Canonicalized, FeatureError> {
    let mut out = BTreeMap::new();
    for col in &schema.columns {
        let value = match raw.get(&col.name) {
            None => FeatureValue::MISSING,
            Some(v) => match (col.kind, v) {
                (_, FeatureValue::Missing(_)) => FeatureValue::MISSING,
                (FeatureKind::Numeric, FeatureValue::Num(x)) if x.is_finite() => FeatureValue::Num(*x),
                (FeatureKind::Numeric, FeatureValue::Num(_)) => FeatureValue::MISSING,
                (FeatureKind::Categorical, FeatureValue::Cat(s)) => FeatureValue::Cat(s.clone()),
                (kind, other) => {
                    return Err(FeatureError::TypeMismatch {
                        column: col.name.clone(),
                        expected: kind,
                        got: describe(other),
                    })
                }
            },
        };
        out.insert(col.name.clone(), value);
    }
    let dropped = raw.0.keys().filter(|k| schema.column(k).is_none()).count();
    Ok(Canonicalized { vector: FeatureVector(out), dropped })
}

fn describe(v: &FeatureValue) -> String {
    match v {
        FeatureValue::Num(x) => format!("number {x}"),
        FeatureValue::Cat(s) => format!("category token {s:?}"),
        FeatureValue::Missing(_) => "missing".to_string(),
    }
}
