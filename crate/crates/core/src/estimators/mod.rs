//! Counterfactual click means `E[Y_i(a)]` by the g-formula, inverse
//! probability weighting and the augmented (doubly robust) combination,
//! plus effect contrasts and the pageview bootstrap.

mod bootstrap;
mod crossfit;
mod effects;

use serde::{Deserialize, Serialize};

use crate::allocation::AllocationRule;
use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::math::{mean, normal_quantile, variance};
use crate::models::{OutcomeRegression, PropensityScore};

pub use bootstrap::{bootstrap, BootstrapOptions, BootstrapResult};
pub use crossfit::{
    cross_fit, estimate_table, fold_of, Combined, CrossFitPredictions, EstimateOptions, FixedNuisances, MeansTable,
    NuisanceFitter, NuisanceSpec, Nuisances,
};
pub use effects::{
    average_overall_effect, enumerate_effects, ground_truth_effects, overall_effect, spillover_effect, unit_effect,
    CounterfactualMeans, EffectKind, EffectTarget,
};

/// Propensities entering a denominator are clipped below at this value.
pub const DENOMINATOR_CLIP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Gformula,
    Ipw,
    Aipw,
    /// Simulator ground truth.
    Oracle,
}

impl Estimator {
    pub const FITTED: [Estimator; 3] = [Estimator::Gformula, Estimator::Ipw, Estimator::Aipw];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Gformula => "gformula",
            Estimator::Ipw => "ipw",
            Estimator::Aipw => "aipw",
            Estimator::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        [Estimator::Gformula, Estimator::Ipw, Estimator::Aipw, Estimator::Oracle]
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| invalid(format!("unknown estimator {s:?}")))
    }
}

/// A point estimate with uncertainty and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub value: f64,
    pub stderr: f64,
    pub ci: (f64, f64),
    pub level: f64,
    pub estimator: Estimator,
    pub target: EffectTarget,
    pub n_used: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Clip a propensity for use in a denominator.
pub fn clip_denominator(p: f64) -> f64 {
    p.clamp(DENOMINATOR_CLIP, 1.0)
}

/// Per-pageview term whose average is the estimate. `matches` says whether
/// the observed rule is the target rule, `mu_a` is the outcome prediction
/// at the target rule and `pi` the propensity of the target rule.
pub(crate) fn contribution(est: Estimator, matches: bool, y: f64, mu_a: f64, pi: f64) -> f64 {
    let w = if matches { 1.0 / clip_denominator(pi) } else { 0.0 };
    match est {
        Estimator::Gformula => mu_a,
        Estimator::Ipw => w * y,
        // the observed rule equals `a` whenever the weight is nonzero
        Estimator::Aipw => w * (y - mu_a) + mu_a,
        Estimator::Oracle => unreachable!("oracle has no sample contributions"),
    }
}

fn summarize(est: Estimator, terms: &[f64], target: EffectTarget, level: f64, warnings: Vec<String>) -> EffectEstimate {
    let n = terms.len();
    let value = mean(terms);
    let stderr = if n > 1 { (variance(terms) / n as f64).sqrt() } else { 0.0 };
    let z = normal_quantile(0.5 + level / 2.0);
    EffectEstimate {
        value,
        stderr,
        ci: (value - z * stderr, value + z * stderr),
        level,
        estimator: est,
        target,
        n_used: n,
        warnings,
    }
}

fn check_target(d: &Dataset, a: &AllocationRule, i: usize) -> Result<()> {
    if d.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    if a.len() != d.m() {
        return Err(invalid(format!("rule {a} has {} positions, dataset has m={}", a.len(), d.m())));
    }
    if i >= d.m() {
        return Err(invalid(format!("position {} out of range", i + 1)));
    }
    Ok(())
}

const LEVEL: f64 = 0.95;

/// `(1/N) sum_n E[Y_i | A = a, X_n]`.
pub fn gformula_mean(
    d: &Dataset,
    outcome: &dyn OutcomeRegression,
    a: &AllocationRule,
    i: usize,
) -> Result<EffectEstimate> {
    check_target(d, a, i)?;
    if !outcome.uses_allocation() {
        return Err(invalid("outcome model has no allocation inputs; the g-formula cannot vary the rule"));
    }
    let terms: Vec<f64> = d.pageviews().iter().map(|pv| outcome.predict(&pv.x, a, i)).collect();
    Ok(summarize(Estimator::Gformula, &terms, EffectTarget::mean(a, i), LEVEL, Vec::new()))
}

fn no_match_warning(d: &Dataset, a: &AllocationRule) -> Vec<String> {
    if d.pageviews().iter().any(|pv| &pv.a == a) {
        Vec::new()
    } else {
        vec![format!("rule {a} never observed; weighting terms are all zero")]
    }
}

/// `(1/N) sum_n 1(A_n = a) Y_in / p(a | X_n)`.
pub fn ipw_mean(d: &Dataset, propensity: &dyn PropensityScore, a: &AllocationRule, i: usize) -> Result<EffectEstimate> {
    check_target(d, a, i)?;
    let r = a.rule_index();
    let terms: Vec<f64> = d
        .pageviews()
        .iter()
        .map(|pv| {
            let matches = &pv.a == a;
            let pi = if matches { propensity.rule_probabilities(&pv.x)[r] } else { 1.0 };
            contribution(Estimator::Ipw, matches, f64::from(pv.y[i]), 0.0, pi)
        })
        .collect();
    Ok(summarize(Estimator::Ipw, &terms, EffectTarget::mean(a, i), LEVEL, no_match_warning(d, a)))
}

/// Augmented IPW with fixed (already fitted) nuisances:
/// `(1/N) sum_n [1(A_n = a)(Y_in - mu(a, X_n)) / p(a | X_n) + mu(a, X_n)]`.
/// See [`estimate_table`] for cross-fitting.
pub fn aipw_mean(
    d: &Dataset,
    outcome: &dyn OutcomeRegression,
    propensity: &dyn PropensityScore,
    a: &AllocationRule,
    i: usize,
) -> Result<EffectEstimate> {
    check_target(d, a, i)?;
    let r = a.rule_index();
    let terms: Vec<f64> = d
        .pageviews()
        .iter()
        .map(|pv| {
            let matches = &pv.a == a;
            let pi = if matches { propensity.rule_probabilities(&pv.x)[r] } else { 1.0 };
            contribution(Estimator::Aipw, matches, f64::from(pv.y[i]), outcome.predict(&pv.x, a, i), pi)
        })
        .collect();
    Ok(summarize(Estimator::Aipw, &terms, EffectTarget::mean(a, i), LEVEL, no_match_warning(d, a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::enumerate_valid_rules;
    use crate::models::{ConstantOutcome, FixedPropensity, UniformPropensity};
    use crate::sem::{simulate, SemConfig};

    fn data(seed: u64, n: usize) -> Dataset {
        let mut cfg = SemConfig::null(3, 2, seed);
        cfg.gamma = vec![0.5, 0.0];
        cfg.eta = vec![0.0, -0.7];
        cfg.w_prop[0] = vec![0.5, 0.0, 0.3, 0.0, 0.0, 0.0];
        simulate(&cfg, n).unwrap()
    }

    #[test]
    fn constant_outcome_gives_constant() {
        let d = data(1, 500);
        let rules = enumerate_valid_rules(3).unwrap();
        let e = gformula_mean(&d, &ConstantOutcome(0.37), &rules[1], 2).unwrap();
        assert!((e.value - 0.37).abs() < 1e-12);
        assert!(e.stderr.abs() < 1e-12);
    }

    #[test]
    fn aipw_with_zero_outcome_is_ipw() {
        let d = data(2, 2_000);
        let cfg = SemConfig::null(3, 2, 0);
        for a in enumerate_valid_rules(3).unwrap() {
            for i in 0..3 {
                let ipw = ipw_mean(&d, &cfg, &a, i).unwrap();
                let aipw = aipw_mean(&d, &ConstantOutcome(0.0), &cfg, &a, i).unwrap();
                assert_eq!(ipw.value, aipw.value);
            }
        }
    }

    #[test]
    fn uniform_ipw_is_scaled_stratified_mean() {
        let d = data(3, 4_000);
        let m = d.m();
        for a in enumerate_valid_rules(m).unwrap() {
            let e = ipw_mean(&d, &UniformPropensity { m }, &a, 0).unwrap();
            let clicks: f64 = d.pageviews().iter().filter(|pv| pv.a == a).map(|pv| f64::from(pv.y[0])).sum();
            let direct = (m + 1) as f64 * clicks / d.len() as f64;
            assert!((e.value - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn single_rule_design_reduces_to_sample_mean() {
        let d = data(4, 3_000);
        let rules = enumerate_valid_rules(3).unwrap();
        let one = d.filter(|pv| pv.a == rules[2]);
        let certain = FixedPropensity { probs: vec![0.0, 0.0, 1.0, 0.0] };
        let sample_mean =
            |i: usize| one.pageviews().iter().map(|pv| f64::from(pv.y[i])).sum::<f64>() / one.len() as f64;
        for i in 0..3 {
            let ipw = ipw_mean(&one, &certain, &rules[2], i).unwrap();
            let aipw = aipw_mean(&one, &ConstantOutcome(0.9), &certain, &rules[2], i).unwrap();
            assert!((ipw.value - sample_mean(i)).abs() < 1e-12);
            assert!((aipw.value - sample_mean(i)).abs() < 1e-12);
        }
        let missing = ipw_mean(&one, &certain, &rules[0], 0).unwrap();
        assert_eq!(missing.value, 0.0);
        assert_eq!(missing.warnings.len(), 1);
    }

    #[test]
    fn gformula_rejects_allocation_free_models() {
        struct NoA;
        impl OutcomeRegression for NoA {
            fn predict(&self, _: &crate::dataset::FeatureMatrix, _: &AllocationRule, _: usize) -> f64 {
                0.5
            }
            fn uses_allocation(&self) -> bool {
                false
            }
        }
        let d = data(5, 10);
        let a = enumerate_valid_rules(3).unwrap()[0].clone();
        assert!(gformula_mean(&d, &NoA, &a, 0).is_err());
        let short: AllocationRule = "10".parse().unwrap();
        assert!(gformula_mean(&d, &ConstantOutcome(0.1), &short, 0).is_err());
    }

    #[test]
    fn order_invariant() {
        let d = data(6, 1_000);
        let rev = Dataset::new(d.m(), d.p(), d.pageviews().iter().rev().cloned().collect(), "x".into()).unwrap();
        let cfg = SemConfig::null(3, 2, 0);
        let a = enumerate_valid_rules(3).unwrap()[1].clone();
        let x = aipw_mean(&d, &ConstantOutcome(0.3), &cfg, &a, 1).unwrap();
        let y = aipw_mean(&rev, &ConstantOutcome(0.3), &cfg, &a, 1).unwrap();
        assert!((x.value - y.value).abs() < 1e-12);
    }
}
