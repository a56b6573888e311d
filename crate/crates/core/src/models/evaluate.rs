use serde::{Deserialize, Serialize};

use super::features::{FeatureSetSpec, FeatureVariant};
use super::metrics::auc;
use super::outcome::{fit_outcome, outcome_design};
use super::ModelSpec;
use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::rng::{domain, hash_words, unit_from_hash};

/// Split pageviews into train and test sets by a hash of their ids, so the
/// assignment of a pageview never depends on the rest of the data.
pub fn split_by_id(d: &Dataset, seed: u64, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(invalid(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let in_train = |id: u64| unit_from_hash(hash_words(&[seed, domain::SPLIT, id])) < train_fraction;
    Ok((d.filter(|pv| in_train(pv.id)), d.filter(|pv| !in_train(pv.id))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictEvalOptions {
    pub model: ModelSpec,
    /// Variants compared against the baseline, which is always included.
    pub variants: Vec<FeatureVariant>,
    /// Parent columns per position, used by the discovered variant.
    pub discovered: Vec<Vec<String>>,
    pub keep_self_in_d1: bool,
}

impl Default for PredictEvalOptions {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            variants: vec![FeatureVariant::Block, FeatureVariant::BlockCross, FeatureVariant::Full],
            discovered: Vec::new(),
            keep_self_in_d1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    /// One-based position.
    pub position: usize,
    pub variant: FeatureVariant,
    pub n_features: usize,
    pub auc: f64,
    /// `(auc - auc_baseline) / auc_baseline`.
    pub rel_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    pub n_train: usize,
    pub n_test: usize,
    pub rows: Vec<AucRow>,
    pub warnings: Vec<String>,
}

impl AucTable {
    pub fn get(&self, position: usize, variant: FeatureVariant) -> Option<&AucRow> {
        self.rows.iter().find(|r| r.position == position && r.variant == variant)
    }
}

/// Train each feature-set variant on `train` and report held-out AUC per
/// position, with the relative difference to the baseline variant.
pub fn predict_eval(train: &Dataset, test: &Dataset, opts: &PredictEvalOptions) -> Result<AucTable> {
    if train.m() != test.m() || train.p() != test.p() {
        return Err(invalid("train and test schemas differ"));
    }
    if opts.variants.contains(&FeatureVariant::Discovered) && opts.discovered.len() != train.m() {
        return Err(invalid(format!(
            "discovered variant needs one parent list per position, got {}",
            opts.discovered.len()
        )));
    }
    let mut variants = vec![FeatureVariant::Baseline];
    variants.extend(opts.variants.iter().filter(|v| **v != FeatureVariant::Baseline));
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for i in 0..train.m() {
        let labels: Vec<u8> = test.pageviews().iter().map(|pv| pv.y[i]).collect();
        let mut baseline = None;
        for &v in &variants {
            let mut spec = if v == FeatureVariant::Discovered {
                if opts.discovered[i].is_empty() {
                    warnings.push(format!("position {}: no discovered parents; variant skipped", i + 1));
                    continue;
                }
                FeatureSetSpec::discovered(opts.discovered[i].clone())
            } else {
                FeatureSetSpec::new(v)
            };
            spec.keep_self_in_d1 = opts.keep_self_in_d1;
            let fitted = fit_outcome(train, i, &spec, &opts.model)?;
            warnings.extend(
                fitted.model.diagnostics.warnings.iter().map(|w| format!("position {} {}: {w}", i + 1, v.name())),
            );
            let design = outcome_design(test, &fitted.columns, i, spec.keep_self_in_d1)?;
            let scores = fitted.model.predict_design(&design)?;
            let value = auc(&scores, &labels)?;
            let base = *baseline.get_or_insert(value);
            rows.push(AucRow {
                position: i + 1,
                variant: v,
                n_features: fitted.columns.len(),
                auc: value,
                rel_diff: (value - base) / base,
            });
        }
    }
    Ok(AucTable { n_train: train.len(), n_test: test.len(), rows, warnings })
}
