//! Nuisance models: the outcome regression `E[Y_i | A, X]` and the rule
//! propensity `p(A | X)`, fitted by ridge logistic regression or a
//! histogram random forest.

mod evaluate;
mod features;
mod forest;
mod logistic;
mod metrics;
mod outcome;
mod propensity;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use evaluate::{predict_eval, split_by_id, AucRow, AucTable, PredictEvalOptions};
pub use features::{resolve_columns, Column, FeatureSetSpec, FeatureVariant};
pub use forest::{fit_forest, Forest, ForestOptions, Tree, TreeNode};
pub use logistic::{fit_multinomial, LogisticModel, LogisticOptions, MultinomialModel};
pub use metrics::{auc, log_loss};
pub use outcome::{fit_outcome, ConstantOutcome, FittedOutcome, OutcomeRegression};
pub use propensity::{
    fit_propensity, FittedPropensity, FixedPropensity, PropensityMode, PropensityOptions, PropensityScore,
    UniformPropensity,
};

/// Predictions handed to downstream code are clipped to this margin.
pub const PREDICTION_CLIP: f64 = 1e-6;

/// Row-major numeric design matrix with named columns and a stable key
/// per row (used by the forest so resampling does not depend on row order).
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    names: Vec<String>,
    data: Vec<f64>,
    keys: Vec<u64>,
}

impl Design {
    /// Build from column names and row-major data; keys default to the row
    /// index.
    pub fn new(names: Vec<String>, data: Vec<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(invalid("design needs at least one column"));
        }
        if !data.len().is_multiple_of(names.len()) {
            return Err(invalid(format!("{} values do not fill rows of width {}", data.len(), names.len())));
        }
        let n = data.len() / names.len();
        Ok(Self { names, data, keys: (0..n as u64).collect() })
    }

    pub fn with_keys(mut self, keys: Vec<u64>) -> Result<Self> {
        if keys.len() != self.n_rows() {
            return Err(invalid("one key per row required"));
        }
        self.keys = keys;
        Ok(self)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.names.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.width();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }
}

/// Training summary attached to a fitted model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Mean training log-loss (unpenalized).
    pub log_loss: f64,
    /// Newton iterations, or trees for a forest.
    pub iterations: usize,
    /// Final gradient norm of the penalized objective (logistic only).
    pub gradient_norm: Option<f64>,
    pub warnings: Vec<String>,
}

/// Learner choice and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Logistic(LogisticOptions),
    Forest(ForestOptions),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Logistic(LogisticOptions::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Forest,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelParams {
    Logistic(LogisticModel),
    Forest(Forest),
    /// A fixed probability, used when the training labels are constant.
    Constant(f64),
}

/// A fitted binary classifier with the schema it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub kind: ModelKind,
    pub schema: Vec<String>,
    pub params: ModelParams,
    pub diagnostics: FitDiagnostics,
}

impl FittedModel {
    /// `P(label = 1)` for one row in training-schema order, clipped to
    /// `[1e-6, 1 - 1e-6]`.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let p = match &self.params {
            ModelParams::Logistic(m) => m.predict(row),
            ModelParams::Forest(f) => f.predict(row),
            ModelParams::Constant(p) => *p,
        };
        p.clamp(PREDICTION_CLIP, 1.0 - PREDICTION_CLIP)
    }

    /// Predict every row of a design whose columns must match the schema.
    pub fn predict_design(&self, design: &Design) -> Result<Vec<f64>> {
        if design.names() != self.schema.as_slice() {
            return Err(Error::Schema(format!("model trained on {:?}, got {:?}", self.schema, design.names())));
        }
        Ok((0..design.n_rows()).map(|r| self.predict(design.row(r))).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Fit a ridge logistic regression.
pub fn fit_logistic(design: &Design, y: &[u8], opts: &LogisticOptions) -> Result<FittedModel> {
    let (model, diagnostics) = logistic::fit_weights(design, y, opts)?;
    Ok(FittedModel {
        kind: ModelKind::Logistic,
        schema: design.names().to_vec(),
        params: ModelParams::Logistic(model),
        diagnostics,
    })
}

/// Fit either learner. Constant labels yield a constant model with a
/// warning instead of an error.
pub fn fit_model(design: &Design, y: &[u8], spec: &ModelSpec) -> Result<FittedModel> {
    let pos = y.iter().filter(|&&v| v == 1).count();
    if !y.is_empty() && (pos == 0 || pos == y.len()) {
        let rate = pos as f64 / y.len() as f64;
        return Ok(FittedModel {
            kind: ModelKind::Constant,
            schema: design.names().to_vec(),
            params: ModelParams::Constant(rate),
            diagnostics: FitDiagnostics {
                log_loss: 0.0,
                iterations: 0,
                gradient_norm: None,
                warnings: vec![format!("constant labels (all {})", u8::from(pos > 0))],
            },
        });
    }
    match spec {
        ModelSpec::Logistic(opts) => fit_logistic(design, y, opts),
        ModelSpec::Forest(opts) => fit_forest(design, y, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_shape_checks() {
        assert!(Design::new(vec![], vec![]).is_err());
        assert!(Design::new(vec!["a".into(), "b".into()], vec![1.0, 2.0, 3.0]).is_err());
        let d = Design::new(vec!["a".into(), "b".into()], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(d.n_rows(), 2);
        assert_eq!(d.row(1), &[3.0, 4.0]);
        assert!(d.clone().with_keys(vec![1]).is_err());
    }

    #[test]
    fn model_json_round_trip_and_schema_check() {
        let names = vec!["f".to_string()];
        let data: Vec<f64> = (0..40).map(|k| f64::from(k % 7)).collect();
        let y: Vec<u8> = (0..40).map(|k| u8::from(k % 7 > 3 || k % 5 == 0)).collect();
        let d = Design::new(names, data).unwrap();
        for spec in [ModelSpec::default(), ModelSpec::Forest(ForestOptions { n_trees: 5, ..Default::default() })] {
            let m = fit_model(&d, &y, &spec).unwrap();
            let back = FittedModel::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back.predict_design(&d).unwrap(), m.predict_design(&d).unwrap());
            let other = Design::new(vec!["g".into()], vec![1.0]).unwrap();
            assert!(matches!(m.predict_design(&other), Err(Error::Schema(_))));
        }
    }

    #[test]
    fn constant_labels_give_constant_model() {
        let d = Design::new(vec!["f".into()], vec![1.0, 2.0]).unwrap();
        let m = fit_model(&d, &[1, 1], &ModelSpec::default()).unwrap();
        assert_eq!(m.kind, ModelKind::Constant);
        assert_eq!(m.predict(&[0.0]), 1.0 - PREDICTION_CLIP);
    }
}
