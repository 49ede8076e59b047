use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{quantile_sorted, sorted_copy};
use crate::eventlog::DatasetSnapshot;
use crate::features::{FeatureKind, FeatureSchema, FeatureValue, FeatureVector};

/// Lower and upper clipping quantiles for numeric columns.
pub const CLIP_QUANTILES: (f64, f64) = (0.005, 0.995);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnRecipe {
    Numeric { name: String, mean: f64, std: f64, median: f64, clip_lo: f64, clip_hi: f64 },
    /// One-of-K over `vocabulary` plus a trailing out-of-vocabulary slot,
    /// which also receives missing values.
    Categorical { name: String, vocabulary: Vec<String> },
}

impl ColumnRecipe {
    pub fn name(&self) -> &str {
        match self {
            ColumnRecipe::Numeric { name, .. } | ColumnRecipe::Categorical { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            ColumnRecipe::Numeric { .. } => 1,
            ColumnRecipe::Categorical { vocabulary, .. } => vocabulary.len() + 1,
        }
    }
}

/// Fitted per-column preprocessing. Immutable once fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessPlan {
    pub schema_version: u32,
    pub columns: Vec<ColumnRecipe>,
    /// Content hash of the data the plan was fitted on.
    pub fitted_on: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("need at least 2 rows to fit a plan, got {0}")]
    TooFewRows(usize),
    #[error("column `{0}` is missing in every row")]
    AllMissingColumn(String),
    #[error("plan fitted on schema v{plan}, input is v{input}")]
    SchemaVersionMismatch { plan: u32, input: u32 },
    #[error("column `{0}` has a value of the wrong type")]
    TypeMismatch(String),
}

pub fn fit_plan(snapshot: &DatasetSnapshot, schema: &FeatureSchema) -> Result<PreprocessPlan, PlanError> {
    let rows: Vec<&FeatureVector> = snapshot.rows.iter().map(|r| &r.features).collect();
    let mut plan = fit_plan_rows(&rows, schema, &snapshot.content_hash)?;
    plan.schema_version = snapshot.schema_version;
    Ok(plan)
}

/// Fits a plan on raw feature vectors.
pub fn fit_plan_rows(rows: &[&FeatureVector], schema: &FeatureSchema, fitted_on: &str) -> Result<PreprocessPlan, PlanError> {
    if rows.len() < 2 {
        return Err(PlanError::TooFewRows(rows.len()));
    }
    let mut columns = Vec::with_capacity(schema.columns.len());
    for col in &schema.columns {
        let values = rows.iter().filter_map(|r| r.get(&col.name));
        match col.kind {
            FeatureKind::Numeric => {
                let xs: Vec<f64> = values.filter_map(FeatureValue::as_num).collect();
                if xs.is_empty() {
                    return Err(PlanError::AllMissingColumn(col.name.clone()));
                }
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                let sorted = sorted_copy(&xs);
                columns.push(ColumnRecipe::Numeric {
                    name: col.name.clone(),
                    mean,
                    std,
                    median: quantile_sorted(&sorted, 0.5),
                    clip_lo: quantile_sorted(&sorted, CLIP_QUANTILES.0),
                    clip_hi: quantile_sorted(&sorted, CLIP_QUANTILES.1),
                });
            }
            FeatureKind::Categorical => {
                let vocab: BTreeSet<String> = values.filter_map(|v| v.as_cat().map(str::to_string)).collect();
                if vocab.is_empty() {
                    return Err(PlanError::AllMissingColumn(col.name.clone()));
                }
                columns.push(ColumnRecipe::Categorical { name: col.name.clone(), vocabulary: vocab.into_iter().collect() });
            }
        }
    }
    Ok(PreprocessPlan { schema_version: schema.version, columns, fitted_on: fitted_on.to_string() })
}

impl PreprocessPlan {
    /// Width of every encoded vector.
    pub fn dimension(&self) -> usize {
        self.columns.iter().map(ColumnRecipe::width).sum()
    }

    /// Encoded index range of each source column, in order.
    pub fn column_slices(&self) -> Vec<(String, Range<usize>)> {
        let mut start = 0;
        self.columns
            .iter()
            .map(|c| {
                let r = start..start + c.width();
                start = r.end;
                (c.name().to_string(), r)
            })
            .collect()
    }

    /// Encodes a canonical feature vector produced under `schema_version`.
    pub fn apply(&self, fv: &FeatureVector, schema_version: u32) -> Result<Vec<f64>, PlanError> {
        if schema_version != self.schema_version {
            return Err(PlanError::SchemaVersionMismatch { plan: self.schema_version, input: schema_version });
        }
        let mut out = Vec::with_capacity(self.dimension());
        for col in &self.columns {
            match col {
                ColumnRecipe::Numeric { name, mean, std, median, clip_lo, clip_hi } => {
                    let raw = match fv.get(name) {
                        None | Some(FeatureValue::Missing(_)) => *median,
                        Some(FeatureValue::Num(x)) => *x,
                        Some(FeatureValue::Cat(_)) => return Err(PlanError::TypeMismatch(name.clone())),
                    };
                    let clipped = raw.clamp(*clip_lo, *clip_hi);
                    out.push(if *std > 0.0 { (clipped - mean) / std } else { 0.0 });
                }
                ColumnRecipe::Categorical { name, vocabulary } => {
                    let start = out.len();
                    out.resize(start + vocabulary.len() + 1, 0.0);
                    let slot = match fv.get(name) {
                        Some(FeatureValue::Cat(tok)) => vocabulary.binary_search(tok).unwrap_or(vocabulary.len()),
                        Some(FeatureValue::Num(_)) => return Err(PlanError::TypeMismatch(name.clone())),
                        _ => vocabulary.len(),
                    };
                    out[start + slot] = 1.0;
                }
            }
        }
        Ok(out)
    }

    /// Encodes many rows at once.
    pub fn apply_all<'a>(&self, rows: impl IntoIterator<Item = &'a FeatureVector>, schema_version: u32) -> Result<Vec<Vec<f64>>, PlanError> {
        rows.into_iter().map(|fv| self.apply(fv, schema_version)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureColumn;

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![FeatureColumn::numeric("x", true), FeatureColumn::categorical("c", false)])
    }

    fn rows(xs: &[Option<f64>]) -> Vec<FeatureVector> {
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let fv = FeatureVector::new().with("c", if i % 2 == 0 { "a" } else { "b" });
                match x {
                    Some(v) => fv.with("x", *v),
                    None => fv.with("x", FeatureValue::MISSING),
                }
            })
            .collect()
    }

    fn fit(xs: &[Option<f64>]) -> Result<PreprocessPlan, PlanError> {
        let r = rows(xs);
        let refs: Vec<&FeatureVector> = r.iter().collect();
        fit_plan_rows(&refs, &schema(), "h")
    }

    #[test]
    fn fitted_statistics() {
        let plan = fit(&[Some(1.0), Some(2.0), Some(3.0)]).unwrap();
        match &plan.columns[0] {
            ColumnRecipe::Numeric { mean, median, std, .. } => {
                assert_eq!(*mean, 2.0);
                assert_eq!(*median, 2.0);
                assert!((std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
            }
            _ => panic!(),
        }
        assert_eq!(plan.dimension(), 1 + 3);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let plan = fit(&[Some(4.0), Some(4.0), Some(4.0)]).unwrap();
        let v = plan.apply(&FeatureVector::new().with("x", 4.0), 1).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn all_missing_numeric_is_an_error() {
        assert_eq!(fit(&[None, None]).unwrap_err(), PlanError::AllMissingColumn("x".into()));
    }

    #[test]
    fn mean_input_encodes_to_zero() {
        let plan = PreprocessPlan {
            schema_version: 1,
            columns: vec![ColumnRecipe::Numeric { name: "x".into(), mean: 2.0, std: 1.0, median: 5.0, clip_lo: -10.0, clip_hi: 10.0 }],
            fitted_on: String::new(),
        };
        assert_eq!(plan.apply(&FeatureVector::new().with("x", 2.0), 1).unwrap(), vec![0.0]);
        // missing -> median 5 -> (5-2)/1
        assert_eq!(plan.apply(&FeatureVector::new().with("x", FeatureValue::MISSING), 1).unwrap(), vec![3.0]);
        // above the upper bound clips before scaling
        assert_eq!(plan.apply(&FeatureVector::new().with("x", 99.0), 1).unwrap(), vec![8.0]);
    }

    #[test]
    fn categorical_one_hot_with_oov() {
        let plan = fit(&[Some(1.0), Some(2.0)]).unwrap();
        let a = plan.apply(&FeatureVector::new().with("x", 1.0).with("c", "a"), 1).unwrap();
        let z = plan.apply(&FeatureVector::new().with("x", 1.0).with("c", "zzz"), 1).unwrap();
        let m = plan.apply(&FeatureVector::new().with("x", 1.0), 1).unwrap();
        assert_eq!(&a[1..], &[1.0, 0.0, 0.0]);
        assert_eq!(&z[1..], &[0.0, 0.0, 1.0]);
        assert_eq!(&m[1..], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn schema_version_mismatch() {
        let plan = fit(&[Some(1.0), Some(2.0)]).unwrap();
        assert!(matches!(plan.apply(&FeatureVector::new(), 2), Err(PlanError::SchemaVersionMismatch { .. })));
    }

    #[test]
    fn too_few_rows() {
        assert_eq!(fit(&[Some(1.0)]).unwrap_err(), PlanError::TooFewRows(1));
    }

    #[test]
    fn output_has_fixed_dimension_and_no_gaps() {
        let plan = fit(&[Some(1.0), None, Some(7.0), Some(-3.0)]).unwrap();
        for fv in rows(&[None, Some(1e9), Some(-1e9), Some(0.5)]) {
            let v = plan.apply(&fv, 1).unwrap();
            assert_eq!(v.len(), plan.dimension());
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let slices = plan.column_slices();
        assert_eq!(slices[0].1, 0..1);
        assert_eq!(slices[1].1, 1..4);
    }
}
