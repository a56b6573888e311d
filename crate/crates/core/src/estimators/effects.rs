use serde::{Deserialize, Serialize};

use super::{EffectEstimate, Estimator};
use crate::allocation::{enumerate_valid_rules, AllocationRule};
use crate::error::{invalid, Error, Result};
use crate::math::{normal_quantile, quantile_sorted};
use crate::sem::{oracle_table, OracleTable, SemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    /// A single counterfactual mean `E[Y_i(a)]`.
    Mean,
    /// Change the target's own block, everything else fixed.
    Unit,
    /// Change the other ads' blocks, the target's own block fixed.
    Spillover,
    /// One whole rule against another.
    Overall,
    /// The overall effect averaged over positions.
    AverageOverall,
}

/// What an estimate refers to. `position` is zero-based; `rules` lists the
/// rules in the order of the contrast (first minus second).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTarget {
    pub kind: EffectKind,
    pub position: Option<usize>,
    pub rules: Vec<AllocationRule>,
}

impl EffectTarget {
    pub fn mean(a: &AllocationRule, i: usize) -> Self {
        Self { kind: EffectKind::Mean, position: Some(i), rules: vec![a.clone()] }
    }

    /// Human-readable label with one-based positions, e.g.
    /// `UE_2[(1,1,0) - (1,0,0)]`.
    pub fn label(&self) -> String {
        let pos = self.position.map(|i| format!("_{}", i + 1)).unwrap_or_default();
        let rules: Vec<String> = self.rules.iter().map(|r| r.to_string()).collect();
        let name = match self.kind {
            EffectKind::Mean => return format!("E[Y{}{}]", pos.trim_start_matches('_'), rules[0]),
            EffectKind::Unit => "UE",
            EffectKind::Spillover => "SE",
            EffectKind::Overall => "OE",
            EffectKind::AverageOverall => "AOE",
        };
        format!("{name}{pos}[{}]", rules.join(" - "))
    }
}

/// Counterfactual means `E[Y_i(a)]` over every valid rule and position,
/// with their joint uncertainty. Cells are indexed `r * m + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualMeans {
    pub estimator: Estimator,
    pub m: usize,
    pub rules: Vec<AllocationRule>,
    /// `values[r][i]`.
    pub values: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    /// Covariance across cells.
    pub covariance: Vec<Vec<f64>>,
    /// Bootstrap replicates, one flat cell vector each (may be empty).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replicates: Vec<Vec<f64>>,
    pub level: f64,
    pub n_used: usize,
}

impl CounterfactualMeans {
    /// From flat cell means and their covariance.
    pub fn new(
        estimator: Estimator,
        rules: Vec<AllocationRule>,
        flat: Vec<f64>,
        covariance: Vec<Vec<f64>>,
        n_used: usize,
        level: f64,
    ) -> Result<Self> {
        let m = rules.first().map(AllocationRule::len).ok_or_else(|| invalid("no rules"))?;
        let cells = rules.len() * m;
        if flat.len() != cells || covariance.len() != cells || covariance.iter().any(|r| r.len() != cells) {
            return Err(invalid("means and covariance do not match the rule grid"));
        }
        let values = flat.chunks(m).map(<[f64]>::to_vec).collect();
        let stderr = (0..rules.len())
            .map(|r| (0..m).map(|i| covariance[r * m + i][r * m + i].max(0.0).sqrt()).collect())
            .collect();
        Ok(Self { estimator, m, rules, values, stderr, covariance, replicates: Vec::new(), level, n_used })
    }

    /// Means given as a `[rule][position]` table over all valid rules of
    /// `m`, with no uncertainty.
    pub fn from_values(estimator: Estimator, values: Vec<Vec<f64>>) -> Result<Self> {
        let m = values.first().map(Vec::len).ok_or_else(|| invalid("empty table"))?;
        let rules = enumerate_valid_rules(m)?;
        if values.len() != rules.len() || values.iter().any(|v| v.len() != m) {
            return Err(invalid(format!("table must be {} rules x {m} positions", rules.len())));
        }
        let cells = rules.len() * m;
        Self::new(estimator, rules, values.concat(), vec![vec![0.0; cells]; cells], 0, 0.95)
    }

    /// Oracle means with Monte Carlo errors treated as independent.
    pub fn from_oracle(table: &OracleTable) -> Result<Self> {
        let values: Vec<Vec<f64>> = table.means.iter().map(|row| row.iter().map(|o| o.mean).collect()).collect();
        let mut out = Self::from_values(Estimator::Oracle, values)?;
        let m = out.m;
        for (r, row) in table.means.iter().enumerate() {
            for (i, o) in row.iter().enumerate() {
                out.covariance[r * m + i][r * m + i] = o.stderr * o.stderr;
                out.stderr[r][i] = o.stderr;
            }
        }
        out.n_used = table.n_draws;
        Ok(out)
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.values.concat()
    }

    pub fn rule_index(&self, a: &AllocationRule) -> Result<usize> {
        self.rules.iter().position(|r| r == a).ok_or_else(|| invalid(format!("rule {a} is not in the table")))
    }

    pub fn value(&self, a: &AllocationRule, i: usize) -> Result<f64> {
        Ok(self.values[self.rule_index(a)?][self.check_position(i)?])
    }

    fn check_position(&self, i: usize) -> Result<usize> {
        if i < self.m {
            Ok(i)
        } else {
            Err(invalid(format!("position {} out of range", i + 1)))
        }
    }

    /// Replace the uncertainty by that of bootstrap replicates.
    pub fn attach_replicates(&mut self, replicates: Vec<Vec<f64>>) -> Result<()> {
        let cells = self.rules.len() * self.m;
        if replicates.iter().any(|r| r.len() != cells) {
            return Err(invalid("replicate length does not match the rule grid"));
        }
        self.covariance = covariance(&replicates, cells);
        for r in 0..self.rules.len() {
            for i in 0..self.m {
                let c = r * self.m + i;
                self.stderr[r][i] = self.covariance[c][c].max(0.0).sqrt();
            }
        }
        self.replicates = replicates;
        Ok(())
    }

    /// Interval for a single mean.
    pub fn mean_estimate(&self, a: &AllocationRule, i: usize) -> Result<EffectEstimate> {
        let r = self.rule_index(a)?;
        let i = self.check_position(i)?;
        Ok(self.contrast(&[(r * self.m + i, 1.0)], EffectTarget::mean(a, i)))
    }

    /// Linear combination of cells with its standard error and interval.
    fn contrast(&self, terms: &[(usize, f64)], target: EffectTarget) -> EffectEstimate {
        let flat = self.flat_values();
        let value: f64 = terms.iter().map(|&(c, w)| w * flat[c]).sum();
        let var: f64 = terms
            .iter()
            .flat_map(|&(c1, w1)| terms.iter().map(move |&(c2, w2)| w1 * w2 * self.covariance[c1][c2]))
            .sum();
        let stderr = var.max(0.0).sqrt();
        let ci = if self.replicates.is_empty() {
            let z = normal_quantile(0.5 + self.level / 2.0);
            (value - z * stderr, value + z * stderr)
        } else {
            let mut reps: Vec<f64> =
                self.replicates.iter().map(|rep| terms.iter().map(|&(c, w)| w * rep[c]).sum()).collect();
            reps.sort_by(|a, b| a.total_cmp(b));
            percentile_interval(&reps, self.level, value)
        };
        EffectEstimate {
            value,
            stderr,
            ci,
            level: self.level,
            estimator: self.estimator,
            target,
            n_used: self.n_used,
            warnings: Vec::new(),
        }
    }
}

/// Percentile interval of sorted replicates, widened to contain `point`.
pub(crate) fn percentile_interval(sorted: &[f64], level: f64, point: f64) -> (f64, f64) {
    let alpha = 1.0 - level;
    let lo = quantile_sorted(sorted, alpha / 2.0);
    let hi = quantile_sorted(sorted, 1.0 - alpha / 2.0);
    (lo.min(point), hi.max(point))
}

/// Sample covariance across replicates (columns are targets), computed on
/// deviations from the first replicate so constant columns give exact zeros.
pub(crate) fn covariance(reps: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let b = reps.len();
    let mut cov = vec![vec![0.0; k]; k];
    if b < 2 {
        return cov;
    }
    let dev: Vec<Vec<f64>> = reps.iter().map(|r| (0..k).map(|c| r[c] - reps[0][c]).collect()).collect();
    let sums: Vec<f64> = (0..k).map(|c| dev.iter().map(|r| r[c]).sum()).collect();
    for c1 in 0..k {
        for c2 in c1..k {
            let s: f64 = dev.iter().map(|r| r[c1] * r[c2]).sum();
            cov[c1][c2] = (s - sums[c1] * sums[c2] / b as f64) / (b - 1) as f64;
            cov[c2][c1] = cov[c1][c2];
        }
    }
    cov
}

fn compose(rest: &AllocationRule, i: usize, block: u8) -> Result<AllocationRule> {
    rest.with_block(i, block).map_err(|e| match e {
        Error::InvalidRule { rule, reason } => Error::InvalidRule {
            rule,
            reason: format!("setting position {} to block {block} of {rest}: {reason}", i + 1),
        },
        other => other,
    })
}

fn check_block(b: u8) -> Result<()> {
    if b > 1 {
        return Err(invalid(format!("block must be 0 or 1, got {b}")));
    }
    Ok(())
}

/// `E[Y_i(a1, rest_-i)] - E[Y_i(a2, rest_-i)]`.
pub fn unit_effect(
    means: &CounterfactualMeans,
    i: usize,
    a1: u8,
    a2: u8,
    rest: &AllocationRule,
) -> Result<EffectEstimate> {
    check_block(a1)?;
    check_block(a2)?;
    let i = means.check_position(i)?;
    let r1 = compose(rest, i, a1)?;
    let r2 = compose(rest, i, a2)?;
    let (c1, c2) = (means.rule_index(&r1)? * means.m + i, means.rule_index(&r2)? * means.m + i);
    Ok(means.contrast(
        &[(c1, 1.0), (c2, -1.0)],
        EffectTarget { kind: EffectKind::Unit, position: Some(i), rules: vec![r1, r2] },
    ))
}

/// `E[Y_i(a, rest1_-i)] - E[Y_i(a, rest2_-i)]`.
pub fn spillover_effect(
    means: &CounterfactualMeans,
    i: usize,
    a: u8,
    rest1: &AllocationRule,
    rest2: &AllocationRule,
) -> Result<EffectEstimate> {
    check_block(a)?;
    let i = means.check_position(i)?;
    let r1 = compose(rest1, i, a)?;
    let r2 = compose(rest2, i, a)?;
    let (c1, c2) = (means.rule_index(&r1)? * means.m + i, means.rule_index(&r2)? * means.m + i);
    Ok(means.contrast(
        &[(c1, 1.0), (c2, -1.0)],
        EffectTarget { kind: EffectKind::Spillover, position: Some(i), rules: vec![r1, r2] },
    ))
}

/// `E[Y_i(a)] - E[Y_i(a2)]`.
pub fn overall_effect(
    means: &CounterfactualMeans,
    i: usize,
    a: &AllocationRule,
    a2: &AllocationRule,
) -> Result<EffectEstimate> {
    let i = means.check_position(i)?;
    let (c1, c2) = (means.rule_index(a)? * means.m + i, means.rule_index(a2)? * means.m + i);
    Ok(means.contrast(
        &[(c1, 1.0), (c2, -1.0)],
        EffectTarget { kind: EffectKind::Overall, position: Some(i), rules: vec![a.clone(), a2.clone()] },
    ))
}

/// `(1/m) sum_i [E[Y_i(a)] - E[Y_i(a2)]]`.
pub fn average_overall_effect(
    means: &CounterfactualMeans,
    a: &AllocationRule,
    a2: &AllocationRule,
) -> Result<EffectEstimate> {
    let (r1, r2) = (means.rule_index(a)?, means.rule_index(a2)?);
    let w = 1.0 / means.m as f64;
    let terms: Vec<(usize, f64)> = (0..means.m).flat_map(|i| [(r1 * means.m + i, w), (r2 * means.m + i, -w)]).collect();
    Ok(means.contrast(
        &terms,
        EffectTarget { kind: EffectKind::AverageOverall, position: None, rules: vec![a.clone(), a2.clone()] },
    ))
}

/// Every distinct unit, spillover, overall and average overall contrast
/// reachable within the valid rules. Rule pairs are listed once, the rule
/// with more Top ads first.
pub fn enumerate_effects(means: &CounterfactualMeans) -> Result<Vec<EffectEstimate>> {
    let rules = &means.rules;
    let m = means.m;
    let mut out = Vec::new();
    for i in 0..m {
        // unit: flip position i from Top to Bottom where both rules are valid
        for rest in rules {
            if rest.block(i) == 1 && compose(rest, i, 0).is_ok() {
                out.push(unit_effect(means, i, 1, 0, rest)?);
            }
        }
        for b in [1u8, 0] {
            let same: Vec<&AllocationRule> = rules.iter().filter(|r| r.block(i) == b).collect();
            for (x, r1) in same.iter().enumerate() {
                for r2 in &same[x + 1..] {
                    out.push(spillover_effect(means, i, b, r1, r2)?);
                }
            }
        }
        for (x, r1) in rules.iter().enumerate() {
            for r2 in &rules[x + 1..] {
                out.push(overall_effect(means, i, r1, r2)?);
            }
        }
    }
    for (x, r1) in rules.iter().enumerate() {
        for r2 in &rules[x + 1..] {
            out.push(average_overall_effect(means, r1, r2)?);
        }
    }
    Ok(out)
}

/// Ground-truth contrasts for position `i` from the Monte Carlo oracle.
pub fn ground_truth_effects(cfg: &SemConfig, i: usize, n_draws: usize) -> Result<Vec<EffectEstimate>> {
    if i >= cfg.m {
        return Err(invalid(format!("position {} out of range", i + 1)));
    }
    let table = oracle_table(cfg, n_draws)?;
    let means = CounterfactualMeans::from_oracle(&table)?;
    Ok(enumerate_effects(&means)?.into_iter().filter(|e| e.target.position == Some(i)).collect())
}
