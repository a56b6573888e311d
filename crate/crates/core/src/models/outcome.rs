use serde::{Deserialize, Serialize};

use super::features::{resolve_columns, Column, FeatureSetSpec};
use super::{fit_model, Design, FittedModel, ModelSpec};
use crate::allocation::AllocationRule;
use crate::dataset::{Dataset, FeatureMatrix};
use crate::error::{invalid, Error, Result};
use crate::sem::OracleOutcomeLaw;

/// Anything that predicts `E[Y_i | A = a, X = x]` (`i` zero-based).
pub trait OutcomeRegression: Send + Sync {
    fn predict(&self, x: &FeatureMatrix, a: &AllocationRule, i: usize) -> f64;

    /// Whether predictions can change with the allocation; the g-formula
    /// needs this.
    fn uses_allocation(&self) -> bool {
        true
    }
}

impl OutcomeRegression for OracleOutcomeLaw {
    fn predict(&self, x: &FeatureMatrix, a: &AllocationRule, i: usize) -> f64 {
        self.mean(x, a, i)
    }
}

/// Predicts the same value everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantOutcome(pub f64);

impl OutcomeRegression for ConstantOutcome {
    fn predict(&self, _: &FeatureMatrix, _: &AllocationRule, _: usize) -> f64 {
        self.0
    }
}

/// An outcome model for one position, trained on a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedOutcome {
    /// Zero-based target position.
    pub position: usize,
    pub m: usize,
    pub p: usize,
    pub spec: FeatureSetSpec,
    pub columns: Vec<Column>,
    pub model: FittedModel,
}

impl FittedOutcome {
    pub fn feature_row(&self, x: &FeatureMatrix, a: &AllocationRule, out: &mut Vec<f64>) {
        out.clear();
        let keep = self.spec.keep_self_in_d1;
        out.extend(self.columns.iter().map(|c| c.value(x, a, self.position, keep)));
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let out: FittedOutcome = serde_json::from_str(s)?;
        let names: Vec<String> = out.columns.iter().map(Column::name).collect();
        if names != out.model.schema {
            return Err(Error::Schema("outcome columns disagree with model schema".into()));
        }
        Ok(out)
    }
}

impl OutcomeRegression for FittedOutcome {
    fn predict(&self, x: &FeatureMatrix, a: &AllocationRule, i: usize) -> f64 {
        debug_assert_eq!(i, self.position);
        let mut row = Vec::with_capacity(self.columns.len());
        self.feature_row(x, a, &mut row);
        self.model.predict(&row)
    }

    fn uses_allocation(&self) -> bool {
        self.columns.iter().any(Column::depends_on_allocation)
    }
}

/// Outcome design for position `i` on the observed allocations.
pub(crate) fn outcome_design(d: &Dataset, columns: &[Column], i: usize, keep_self: bool) -> Result<Design> {
    let names: Vec<String> = columns.iter().map(Column::name).collect();
    let mut data = Vec::with_capacity(columns.len() * d.len());
    for pv in d.pageviews() {
        data.extend(columns.iter().map(|c| c.value(&pv.x, &pv.a, i, keep_self)));
    }
    let design = Design::new(names, data)?;
    design.with_keys(d.pageviews().iter().map(|pv| pv.id).collect())
}

/// Fit `Y_i` (zero-based `i`) on the conditioning set named by `spec`.
pub fn fit_outcome(d: &Dataset, i: usize, spec: &FeatureSetSpec, model: &ModelSpec) -> Result<FittedOutcome> {
    if d.is_empty() {
        return Err(invalid("cannot fit an outcome model on an empty dataset"));
    }
    let columns = resolve_columns(spec, d.m(), d.p(), i)?;
    let design = outcome_design(d, &columns, i, spec.keep_self_in_d1)?;
    let y: Vec<u8> = d.pageviews().iter().map(|pv| pv.y[i]).collect();
    let fitted = fit_model(&design, &y, model)?;
    Ok(FittedOutcome { position: i, m: d.m(), p: d.p(), spec: spec.clone(), columns, model: fitted })
}
