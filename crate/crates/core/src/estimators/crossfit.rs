use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap, BootstrapOptions};
use super::effects::CounterfactualMeans;
use super::{contribution, Estimator};
use crate::allocation::{enumerate_valid_rules, AllocationRule};
use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::models::{
    fit_outcome, fit_propensity, FeatureSetSpec, FeatureVariant, ForestOptions, ModelSpec, OutcomeRegression,
    PropensityOptions, PropensityScore,
};
use crate::rng::{domain, hash_words};

/// Fitted nuisance functions: one outcome regression per position and a
/// rule propensity.
#[derive(Clone)]
pub struct Nuisances {
    pub outcomes: Vec<Arc<dyn OutcomeRegression>>,
    pub propensity: Arc<dyn PropensityScore>,
    pub warnings: Vec<String>,
}

/// Produces nuisances from a training set.
pub trait NuisanceFitter: Send + Sync {
    fn fit(&self, train: &Dataset) -> Result<Nuisances>;
}

/// Learners and feature sets for both nuisances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceSpec {
    pub outcome_model: ModelSpec,
    /// One spec shared by every position, or one per position.
    pub outcome_features: Vec<FeatureSetSpec>,
    pub propensity: PropensityOptions,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        let forest = ModelSpec::Forest(ForestOptions::default());
        Self {
            outcome_model: forest,
            outcome_features: vec![FeatureSetSpec::new(FeatureVariant::Full)],
            propensity: PropensityOptions { model: forest, ..Default::default() },
        }
    }
}

impl NuisanceSpec {
    fn features_for(&self, i: usize) -> Result<&FeatureSetSpec> {
        match self.outcome_features.len() {
            1 => Ok(&self.outcome_features[0]),
            n if i < n => Ok(&self.outcome_features[i]),
            n => Err(invalid(format!("{n} outcome feature sets given; need 1 or one per position"))),
        }
    }
}

impl NuisanceFitter for NuisanceSpec {
    fn fit(&self, train: &Dataset) -> Result<Nuisances> {
        let mut warnings = Vec::new();
        let mut outcomes: Vec<Arc<dyn OutcomeRegression>> = Vec::with_capacity(train.m());
        for i in 0..train.m() {
            let f = fit_outcome(train, i, self.features_for(i)?, &self.outcome_model)?;
            warnings.extend(f.model.diagnostics.warnings.iter().map(|w| format!("outcome y{}: {w}", i + 1)));
            outcomes.push(Arc::new(f));
        }
        let prop = fit_propensity(train, &self.propensity)?;
        warnings.extend(prop.diagnostics.warnings.iter().map(|w| format!("propensity: {w}")));
        Ok(Nuisances { outcomes, propensity: Arc::new(prop), warnings })
    }
}

/// Nuisances known in advance; training data is ignored.
#[derive(Clone)]
pub struct FixedNuisances(pub Nuisances);

impl FixedNuisances {
    /// The same outcome regression for every position.
    pub fn new(m: usize, outcome: Arc<dyn OutcomeRegression>, propensity: Arc<dyn PropensityScore>) -> Self {
        FixedNuisances(Nuisances { outcomes: vec![outcome; m], propensity, warnings: Vec::new() })
    }
}

impl NuisanceFitter for FixedNuisances {
    fn fit(&self, _: &Dataset) -> Result<Nuisances> {
        Ok(self.0.clone())
    }
}

/// Outcome models from one fitter, the propensity from another.
pub struct Combined<A, B> {
    pub outcome: A,
    pub propensity: B,
}

impl<A: NuisanceFitter, B: NuisanceFitter> NuisanceFitter for Combined<A, B> {
    fn fit(&self, train: &Dataset) -> Result<Nuisances> {
        let mut o = self.outcome.fit(train)?;
        let p = self.propensity.fit(train)?;
        o.propensity = p.propensity;
        o.warnings.extend(p.warnings);
        Ok(o)
    }
}

/// Fold of a pageview for `k` folds, from a hash of its id.
pub fn fold_of(seed: u64, pv_id: u64, k: usize) -> usize {
    (hash_words(&[seed, domain::FOLDS, pv_id]) % k as u64) as usize
}

/// Out-of-fold nuisance predictions for every pageview.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitPredictions {
    pub m: usize,
    /// `mu[(n * (m + 1) + r) * m + i]`: outcome prediction for position `i`
    /// under rule `r`.
    pub mu: Vec<f64>,
    /// `pi[n * (m + 1) + r]`: propensity of rule `r`.
    pub pi: Vec<f64>,
    pub warnings: Vec<String>,
}

impl CrossFitPredictions {
    pub fn mu(&self, n: usize, r: usize, i: usize) -> f64 {
        self.mu[(n * (self.m + 1) + r) * self.m + i]
    }

    pub fn pi(&self, n: usize, r: usize) -> f64 {
        self.pi[n * (self.m + 1) + r]
    }
}

fn predict_rows(
    d: &Dataset,
    rows: &[usize],
    nu: &Nuisances,
    rules: &[AllocationRule],
) -> Vec<(usize, Vec<f64>, Vec<f64>)> {
    let m = d.m();
    rows.par_iter()
        .map(|&n| {
            let pv = &d.pageviews()[n];
            let mut mu = Vec::with_capacity(rules.len() * m);
            for a in rules {
                for (i, model) in nu.outcomes.iter().enumerate() {
                    mu.push(model.predict(&pv.x, a, i));
                }
            }
            (n, mu, nu.propensity.rule_probabilities(&pv.x))
        })
        .collect()
}

/// Fit nuisances on `k - 1` folds and predict the held-out fold, for each
/// fold. `k = 1` fits and predicts on the full data.
pub fn cross_fit(d: &Dataset, fitter: &dyn NuisanceFitter, k_folds: usize, seed: u64) -> Result<CrossFitPredictions> {
    if k_folds == 0 {
        return Err(invalid("k_folds must be at least 1"));
    }
    if d.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let m = d.m();
    let rules = enumerate_valid_rules(m)?;
    let n = d.len();
    let mut mu = vec![0.0; n * (m + 1) * m];
    let mut pi = vec![0.0; n * (m + 1)];
    let mut warnings = Vec::new();
    let folds: Vec<usize> =
        if k_folds == 1 { vec![0; n] } else { d.pageviews().iter().map(|pv| fold_of(seed, pv.id, k_folds)).collect() };
    for f in 0..k_folds {
        let held: Vec<usize> = (0..n).filter(|&r| folds[r] == f).collect();
        if held.is_empty() {
            continue;
        }
        let nu = if k_folds == 1 {
            fitter.fit(d)?
        } else {
            let train: Vec<usize> = (0..n).filter(|&r| folds[r] != f).collect();
            if train.is_empty() {
                return Err(invalid("a cross-fitting fold left no training rows"));
            }
            fitter.fit(&d.select(&train))?
        };
        if nu.outcomes.len() != m {
            return Err(invalid(format!("fitter returned {} outcome models for m={m}", nu.outcomes.len())));
        }
        let prefix = if k_folds == 1 { String::new() } else { format!("fold {}: ", f + 1) };
        warnings.extend(nu.warnings.iter().map(|w| format!("{prefix}{w}")));
        for (row, mu_row, pi_row) in predict_rows(d, &held, &nu, &rules) {
            if pi_row.len() != m + 1 {
                return Err(invalid("propensity returned the wrong number of rules"));
            }
            let base = row * (m + 1) * m;
            mu[base..base + (m + 1) * m].copy_from_slice(&mu_row);
            pi[row * (m + 1)..(row + 1) * (m + 1)].copy_from_slice(&pi_row);
        }
    }
    Ok(CrossFitPredictions { m, mu, pi, warnings })
}

/// Means for each fitted estimator from cross-fit predictions, with
/// influence-based covariance across all `(rule, position)` cells.
pub(crate) fn means_from_predictions(
    d: &Dataset,
    preds: &CrossFitPredictions,
    level: f64,
) -> Result<Vec<CounterfactualMeans>> {
    let m = d.m();
    let rules = enumerate_valid_rules(m)?;
    let cells = (m + 1) * m;
    let n = d.len();
    let mut out = Vec::with_capacity(3);
    for est in Estimator::FITTED {
        // contributions, cell-major
        let mut terms = vec![0.0; cells * n];
        for (row, pv) in d.pageviews().iter().enumerate() {
            let obs = pv.a.rule_index();
            for r in 0..=m {
                for i in 0..m {
                    terms[(r * m + i) * n + row] =
                        contribution(est, obs == r, f64::from(pv.y[i]), preds.mu(row, r, i), preds.pi(row, r));
                }
            }
        }
        let means: Vec<f64> = (0..cells).map(|c| terms[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let denom = (n.max(2) - 1) as f64 * n as f64;
        let mut cov = vec![vec![0.0; cells]; cells];
        for c1 in 0..cells {
            for c2 in c1..cells {
                let (t1, t2) = (&terms[c1 * n..(c1 + 1) * n], &terms[c2 * n..(c2 + 1) * n]);
                let s: f64 = t1.iter().zip(t2).map(|(a, b)| (a - means[c1]) * (b - means[c2])).sum();
                cov[c1][c2] = s / denom;
                cov[c2][c1] = cov[c1][c2];
            }
        }
        out.push(CounterfactualMeans::new(est, rules.clone(), means, cov, n, level)?);
    }
    Ok(out)
}

/// Options for [`estimate_table`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub k_folds: usize,
    /// Seeds fold assignment.
    pub seed: u64,
    pub level: f64,
    pub bootstrap: Option<BootstrapOptions>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { k_folds: 2, seed: 0, level: 0.95, bootstrap: None }
    }
}

/// Counterfactual means of every estimator over every valid rule and
/// position, with the observed click rates alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeansTable {
    pub m: usize,
    pub rules: Vec<AllocationRule>,
    pub n: usize,
    pub k_folds: usize,
    /// One entry per fitted estimator, in `Estimator::FITTED` order.
    pub estimates: Vec<CounterfactualMeans>,
    /// Observed `E[Y_i]`.
    pub observed: Vec<f64>,
    /// Bootstrap resamples dropped after estimator failures.
    pub dropped_resamples: usize,
    pub warnings: Vec<String>,
}

impl MeansTable {
    pub fn get(&self, est: Estimator) -> &CounterfactualMeans {
        self.estimates.iter().find(|e| e.estimator == est).expect("fitted estimators are always present")
    }
}

/// Cross-fit the nuisances and estimate every `(rule, position)` mean;
/// optionally refit everything on pageview bootstrap resamples.
pub fn estimate_table(d: &Dataset, fitter: &dyn NuisanceFitter, opts: &EstimateOptions) -> Result<MeansTable> {
    if !(0.0 < opts.level && opts.level < 1.0) {
        return Err(invalid("level must lie in (0, 1)"));
    }
    let preds = cross_fit(d, fitter, opts.k_folds, opts.seed)?;
    let mut estimates = means_from_predictions(d, &preds, opts.level)?;
    let m = d.m();
    let rules = enumerate_valid_rules(m)?;
    let mut warnings = preds.warnings;
    let mut counts = vec![0usize; m + 1];
    for pv in d.pageviews() {
        counts[pv.a.rule_index()] += 1;
    }
    for (r, rule) in rules.iter().enumerate() {
        if counts[r] == 0 {
            warnings.push(format!(
                "rule {rule} never observed: weighting terms vanish and ipw/aipw extrapolate from the outcome model"
            ));
        }
    }
    let mut dropped = 0;
    if let Some(bo) = opts.bootstrap {
        let cells = (m + 1) * m;
        let bo = BootstrapOptions { level: opts.level, ..bo };
        let res = bootstrap(
            d,
            |sample| {
                let p = cross_fit(sample, fitter, opts.k_folds, opts.seed)?;
                let ms = means_from_predictions(sample, &p, opts.level)?;
                Ok(ms.iter().flat_map(|cm| cm.flat_values()).collect())
            },
            &bo,
        )?;
        dropped = res.dropped;
        for (e, cm) in estimates.iter_mut().enumerate() {
            let reps: Vec<Vec<f64>> = res.replicates.iter().map(|r| r[e * cells..(e + 1) * cells].to_vec()).collect();
            cm.attach_replicates(reps)?;
        }
    }
    Ok(MeansTable {
        m,
        rules,
        n: d.len(),
        k_folds: opts.k_folds,
        estimates,
        observed: d.observed_means(),
        dropped_resamples: dropped,
        warnings,
    })
}
