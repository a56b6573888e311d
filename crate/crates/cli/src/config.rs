use std::path::{Path, PathBuf};

use interference_core::discovery::DiscoveryOptions;
use interference_core::estimators::{BootstrapOptions, NuisanceSpec};
use interference_core::models::{FeatureVariant, ModelSpec};
use interference_core::{AllocationRule, SemConfig};
use serde::{Deserialize, Serialize};

use crate::error::{config_error, CliError, Result};

/// Simulator parameters, inline or as a path to a JSON file (relative
/// paths resolve against the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SemSource {
    Inline(Box<SemConfig>),
    Path(PathBuf),
}

impl Default for SemSource {
    fn default() -> Self {
        SemSource::Inline(Box::new(SemConfig::reference()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Pageviews to simulate.
    pub n: usize,
    /// Monte Carlo draws for the oracle table.
    pub oracle_draws: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { n: 50_000, oracle_draws: 1_000_000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// Extra edges added to the ad DAG, e.g. `["U", "A1"]`.
    pub extra_edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    pub k_folds: usize,
    pub level: f64,
    /// Pageview bootstrap; `null` falls back to influence-function intervals.
    pub bootstrap: Option<BootstrapOptions>,
    pub nuisance: NuisanceSpec,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            k_folds: 2,
            level: 0.95,
            bootstrap: Some(BootstrapOptions::default()),
            nuisance: NuisanceSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoverSection {
    #[serde(flatten)]
    pub options: DiscoveryOptions,
    pub keep_self_in_d1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictEvalSection {
    pub train_fraction: f64,
    pub model: ModelSpec,
    /// Variants compared with the baseline. The discovered variant runs
    /// discovery (with the `discover` options) on the training split.
    pub variants: Vec<FeatureVariant>,
    pub keep_self_in_d1: bool,
}

impl Default for PredictEvalSection {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            model: ModelSpec::default(),
            variants: vec![
                FeatureVariant::Block,
                FeatureVariant::BlockCross,
                FeatureVariant::Full,
                FeatureVariant::Discovered,
            ],
            keep_self_in_d1: false,
        }
    }
}

/// Every parameter of every subcommand. After [`RunConfig::resolve`] the
/// seed is set, the simulator is inline and all nested seeds derive from
/// the master seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; falls back to the simulator seed.
    pub seed: Option<u64>,
    pub sem: SemSource,
    /// Rules to report as codes like `"110"`; all valid rules when absent.
    pub rules: Option<Vec<String>>,
    /// Keep only pageviews with at least one click.
    pub positive_only: bool,
    pub simulate: SimulateSection,
    pub graph: GraphSection,
    pub estimate: EstimateSection,
    pub discover: DiscoverSection,
    pub predict_eval: PredictEvalSection,
}

/// A config with every default and seed filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub sem: SemConfig,
    pub seed: u64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| CliError::Input { path: path.to_path_buf(), source: e.into() })
}

fn set_model_seed(model: &mut ModelSpec, seed: u64) {
    if let ModelSpec::Forest(f) = model {
        f.seed = seed;
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let mut cfg: RunConfig = read_json(path)?;
        if let SemSource::Path(p) = &cfg.sem {
            let full = match path.parent() {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.clone(),
            };
            cfg.sem = SemSource::Inline(Box::new(read_json(&full)?));
        }
        Ok(cfg)
    }

    /// Fill in the seed (`flag`, then `seed`, then the simulator seed) and
    /// propagate it to the simulator, forests, folds, bootstrap, kernel
    /// test and split.
    pub fn resolve(mut self, flag: Option<u64>) -> Result<Resolved> {
        let mut sem = match &self.sem {
            SemSource::Inline(s) => (**s).clone(),
            SemSource::Path(p) => read_json(p)?,
        };
        let seed = flag.or(self.seed).unwrap_or(sem.seed);
        sem.seed = seed;
        sem.validate()?;
        self.seed = Some(seed);
        self.sem = SemSource::Inline(Box::new(sem.clone()));
        set_model_seed(&mut self.estimate.nuisance.outcome_model, seed);
        set_model_seed(&mut self.estimate.nuisance.propensity.model, seed);
        if let Some(b) = &mut self.estimate.bootstrap {
            b.seed = seed;
            b.level = self.estimate.level;
        }
        self.discover.options.kernel.seed = seed;
        set_model_seed(&mut self.predict_eval.model, seed);
        self.discover.options.validate()?;
        if self.estimate.k_folds == 0 {
            return Err(config_error("estimate.k_folds must be at least 1"));
        }
        if let Some(b) = &self.estimate.bootstrap {
            if b.b < 50 {
                return Err(config_error(format!("estimate.bootstrap.b must be at least 50, got {}", b.b)));
            }
        }
        if !(0.0 < self.estimate.level && self.estimate.level < 1.0) {
            return Err(config_error("estimate.level must lie in (0, 1)"));
        }
        if !(0.0 < self.predict_eval.train_fraction && self.predict_eval.train_fraction < 1.0) {
            return Err(config_error("predict_eval.train_fraction must lie in (0, 1)"));
        }
        let resolved = Resolved { config: self, sem, seed };
        resolved.rules(resolved.sem.m)?;
        Ok(resolved)
    }
}

impl Resolved {
    /// Requested rules for pages of `m` ads, in valid-rule order; all
    /// valid rules when none were requested.
    pub fn rules(&self, m: usize) -> Result<Vec<AllocationRule>> {
        let all = interference_core::enumerate_valid_rules(m)?;
        let Some(codes) = &self.config.rules else {
            return Ok(all);
        };
        let mut picked = Vec::with_capacity(codes.len());
        for code in codes {
            let rule: AllocationRule = code.parse()?;
            if rule.len() != m {
                return Err(config_error(format!("rule {rule} has {} positions but pages have m={m} ads", rule.len())));
            }
            picked.push(rule);
        }
        Ok(all.into_iter().filter(|r| picked.contains(r)).collect())
    }
}
