use serde::{Deserialize, Serialize};

use super::logistic::{fit_multinomial, MultinomialModel};
use super::{fit_model, Design, FitDiagnostics, FittedModel, ModelSpec};
use crate::allocation::enumerate_valid_rules;
use crate::dataset::{feature_columns, Dataset, FeatureMatrix};
use crate::error::{invalid, Result};
use crate::sem::SemConfig;

/// Marginals in product mode are clipped to this margin before they are
/// multiplied.
pub const MARGINAL_CLIP: f64 = 1e-3;

/// Anything that yields `p(A = a | X)` for every valid rule, in
/// descending Top-count order.
pub trait PropensityScore: Send + Sync {
    fn rule_probabilities(&self, x: &FeatureMatrix) -> Vec<f64>;
}

impl PropensityScore for SemConfig {
    fn rule_probabilities(&self, x: &FeatureMatrix) -> Vec<f64> {
        SemConfig::rule_probabilities(self, x)
    }
}

/// Every rule equally likely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformPropensity {
    pub m: usize,
}

impl PropensityScore for UniformPropensity {
    fn rule_probabilities(&self, _: &FeatureMatrix) -> Vec<f64> {
        vec![1.0 / (self.m + 1) as f64; self.m + 1]
    }
}

/// The same rule distribution for every pageview.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPropensity {
    pub probs: Vec<f64>,
}

impl PropensityScore for FixedPropensity {
    fn rule_probabilities(&self, _: &FeatureMatrix) -> Vec<f64> {
        self.probs.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropensityMode {
    /// One model over the `m + 1` valid rules.
    Joint,
    /// Per-position models for `p(A_i = 1 | X)`, multiplied and
    /// renormalized over valid rules.
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityOptions {
    pub mode: PropensityMode,
    pub model: ModelSpec,
    /// Joint mode only: permits rules absent from the training data. Each
    /// absent rule receives this probability and the observed rules share
    /// the rest.
    #[serde(default)]
    pub smoothing: Option<f64>,
}

impl Default for PropensityOptions {
    fn default() -> Self {
        Self { mode: PropensityMode::Joint, model: ModelSpec::default(), smoothing: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityComponents {
    /// Multinomial logistic over the observed rules `classes`.
    Multinomial { classes: Vec<usize>, model: MultinomialModel },
    /// One binary model per rule; `None` for unobserved rules.
    OneVsRest(Vec<Option<FittedModel>>),
    /// One binary model per position.
    Product(Vec<FittedModel>),
    /// Only one rule was observed.
    Degenerate { class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPropensity {
    pub m: usize,
    pub p: usize,
    pub mode: PropensityMode,
    pub smoothing: Option<f64>,
    pub components: PropensityComponents,
    pub diagnostics: FitDiagnostics,
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    for p in v.iter_mut() {
        *p /= total;
    }
    v
}

impl FittedPropensity {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn observed_probabilities(&self, x: &FeatureMatrix) -> Vec<f64> {
        let k = self.m + 1;
        let row = x.as_slice();
        match &self.components {
            PropensityComponents::Degenerate { class } => {
                let mut v = vec![0.0; k];
                v[*class] = 1.0;
                v
            }
            PropensityComponents::Multinomial { classes, model } => {
                let mut v = vec![0.0; k];
                for (c, p) in classes.iter().zip(model.predict(row)) {
                    v[*c] = p;
                }
                v
            }
            PropensityComponents::OneVsRest(models) => {
                normalize(models.iter().map(|m| m.as_ref().map_or(0.0, |m| m.predict(row))).collect())
            }
            PropensityComponents::Product(models) => {
                let q: Vec<f64> =
                    models.iter().map(|m| m.predict(row).clamp(MARGINAL_CLIP, 1.0 - MARGINAL_CLIP)).collect();
                // rule r has Top count m - r
                normalize(
                    (0..k)
                        .map(|r| {
                            let top = self.m - r;
                            q.iter().enumerate().map(|(i, qi)| if i < top { *qi } else { 1.0 - qi }).product()
                        })
                        .collect(),
                )
            }
        }
    }
}

impl PropensityScore for FittedPropensity {
    fn rule_probabilities(&self, x: &FeatureMatrix) -> Vec<f64> {
        let mut v = self.observed_probabilities(x);
        if let (Some(eps), PropensityMode::Joint) = (self.smoothing, self.mode) {
            let missing = match &self.components {
                PropensityComponents::Multinomial { classes, .. } => self.m + 1 - classes.len(),
                PropensityComponents::OneVsRest(models) => models.iter().filter(|m| m.is_none()).count(),
                PropensityComponents::Degenerate { .. } => self.m,
                PropensityComponents::Product(_) => 0,
            };
            if missing > 0 {
                let scale = 1.0 - eps * missing as f64;
                for p in v.iter_mut() {
                    *p = if *p == 0.0 { eps } else { *p * scale };
                }
            }
        }
        v
    }
}

/// Propensity design: every ad's features, flattened row by row.
pub(crate) fn propensity_design(d: &Dataset) -> Result<Design> {
    let mut data = Vec::with_capacity(d.len() * d.m() * d.p());
    for pv in d.pageviews() {
        data.extend_from_slice(pv.x.as_slice());
    }
    Design::new(feature_columns(d.m(), d.p()), data)?.with_keys(d.pageviews().iter().map(|pv| pv.id).collect())
}

/// Fit `p(A | X)` on a dataset.
pub fn fit_propensity(d: &Dataset, opts: &PropensityOptions) -> Result<FittedPropensity> {
    if d.is_empty() {
        return Err(invalid("cannot fit a propensity model on an empty dataset"));
    }
    let m = d.m();
    let k = m + 1;
    if let Some(eps) = opts.smoothing {
        if !(0.0..1.0 / k as f64).contains(&eps) {
            return Err(invalid(format!("smoothing must lie in [0, 1/{k})")));
        }
    }
    let design = propensity_design(d)?;
    let classes: Vec<usize> = d.pageviews().iter().map(|pv| pv.a.rule_index()).collect();
    let mut counts = vec![0usize; k];
    for &c in &classes {
        counts[c] += 1;
    }
    let observed: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    let mut warnings = Vec::new();
    if observed.len() < k {
        let rules = enumerate_valid_rules(m)?;
        let missing: Vec<String> = (0..k).filter(|&c| counts[c] == 0).map(|c| rules[c].to_string()).collect();
        let msg = format!("rules never observed: {}", missing.join(", "));
        if opts.mode == PropensityMode::Joint && opts.smoothing.is_none() {
            return Err(invalid(format!("{msg}; supply smoothing to fit anyway")));
        }
        warnings.push(format!("positivity: {msg}"));
    }
    let (components, diagnostics) = match opts.mode {
        PropensityMode::Joint if observed.len() == 1 => {
            (PropensityComponents::Degenerate { class: observed[0] }, FitDiagnostics::default())
        }
        PropensityMode::Joint => match &opts.model {
            ModelSpec::Logistic(lo) => {
                let remap: Vec<usize> =
                    classes.iter().map(|c| observed.iter().position(|o| o == c).expect("observed")).collect();
                let (model, diag) = fit_multinomial(&design, &remap, observed.len(), lo)?;
                (PropensityComponents::Multinomial { classes: observed.clone(), model }, diag)
            }
            spec @ ModelSpec::Forest(_) => {
                let mut models = Vec::with_capacity(k);
                let mut diag = FitDiagnostics::default();
                for c in 0..k {
                    if counts[c] == 0 {
                        models.push(None);
                        continue;
                    }
                    let y: Vec<u8> = classes.iter().map(|&v| u8::from(v == c)).collect();
                    let fitted = fit_model(&design, &y, spec)?;
                    diag.iterations += fitted.diagnostics.iterations;
                    models.push(Some(fitted));
                }
                (PropensityComponents::OneVsRest(models), diag)
            }
        },
        PropensityMode::Product => {
            let mut models = Vec::with_capacity(m);
            let mut diag = FitDiagnostics::default();
            for i in 0..m {
                let y: Vec<u8> = d.pageviews().iter().map(|pv| pv.a.block(i)).collect();
                let fitted = fit_model(&design, &y, &opts.model)?;
                diag.iterations += fitted.diagnostics.iterations;
                diag.warnings.extend(fitted.diagnostics.warnings.iter().map(|w| format!("position {}: {w}", i + 1)));
                models.push(fitted);
            }
            (PropensityComponents::Product(models), diag)
        }
    };
    let mut fitted =
        FittedPropensity { m, p: d.p(), mode: opts.mode, smoothing: opts.smoothing, components, diagnostics };
    let nll: f64 = d
        .pageviews()
        .iter()
        .map(|pv| -fitted.rule_probabilities(&pv.x)[pv.a.rule_index()].max(1e-300).ln())
        .sum::<f64>()
        / d.len() as f64;
    fitted.diagnostics.log_loss = nll;
    fitted.diagnostics.warnings.extend(warnings);
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ForestOptions;
    use crate::sem::simulate;

    fn informative(seed: u64) -> SemConfig {
        let mut cfg = SemConfig::null(3, 2, seed);
        cfg.w_prop = vec![
            vec![0.8, 0.0, 0.4, 0.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, -0.4, 0.0, 0.6, 0.0],
            vec![-0.6, 0.0, 0.0, 0.0, 0.0, 0.3],
        ];
        cfg
    }

    fn true_log_loss(cfg: &SemConfig, d: &Dataset) -> f64 {
        d.pageviews().iter().map(|pv| -cfg.rule_probabilities(&pv.x)[pv.a.rule_index()].ln()).sum::<f64>()
            / d.len() as f64
    }

    #[test]
    fn uniform_rules_give_uniform_estimates() {
        let d = simulate(&SemConfig::null(3, 2, 1), 20_000).unwrap();
        let f = fit_propensity(&d, &PropensityOptions::default()).unwrap();
        let probs = f.rule_probabilities(&d.pageviews()[0].x);
        for p in probs {
            assert!((p - 0.25).abs() < 0.02, "{p}");
        }
    }

    #[test]
    fn joint_logistic_near_true_log_loss() {
        let cfg = informative(2);
        let d = simulate(&cfg, 30_000).unwrap();
        let f = fit_propensity(&d, &PropensityOptions::default()).unwrap();
        let truth = true_log_loss(&cfg, &d);
        assert!(f.diagnostics.log_loss <= truth * 1.02, "{} vs {truth}", f.diagnostics.log_loss);
        assert!(f.diagnostics.log_loss >= truth * 0.98);
    }

    #[test]
    fn every_mode_normalizes() {
        let cfg = informative(3);
        let d = simulate(&cfg, 3_000).unwrap();
        let forest = ModelSpec::Forest(ForestOptions { n_trees: 10, ..Default::default() });
        for (mode, model) in [
            (PropensityMode::Joint, ModelSpec::default()),
            (PropensityMode::Joint, forest),
            (PropensityMode::Product, ModelSpec::default()),
            (PropensityMode::Product, forest),
        ] {
            let f = fit_propensity(&d, &PropensityOptions { mode, model, smoothing: None }).unwrap();
            let back = FittedPropensity::from_json(&f.to_json().unwrap()).unwrap();
            for pv in d.pageviews().iter().take(200) {
                let probs = f.rule_probabilities(&pv.x);
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
                assert_eq!(probs, back.rule_probabilities(&pv.x));
            }
        }
    }

    #[test]
    fn missing_rule_needs_smoothing() {
        let cfg = SemConfig::null(2, 1, 4);
        let d = simulate(&cfg, 300).unwrap();
        let d = d.filter(|pv| pv.a.top_count() != 0);
        assert!(fit_propensity(&d, &PropensityOptions::default()).is_err());
        let opts = PropensityOptions { smoothing: Some(0.01), ..Default::default() };
        let f = fit_propensity(&d, &opts).unwrap();
        let probs = f.rule_probabilities(&d.pageviews()[0].x);
        assert_eq!(probs[2], 0.01);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(f.diagnostics.warnings.iter().any(|w| w.contains("(0,0)")));
    }

    #[test]
    fn single_rule_with_zero_smoothing_is_certain() {
        let d = simulate(&SemConfig::null(2, 1, 5), 200).unwrap();
        let d = d.filter(|pv| pv.a.top_count() == 1);
        let opts = PropensityOptions { smoothing: Some(0.0), ..Default::default() };
        let f = fit_propensity(&d, &opts).unwrap();
        assert_eq!(f.rule_probabilities(&d.pageviews()[0].x), vec![0.0, 1.0, 0.0]);
    }
}
