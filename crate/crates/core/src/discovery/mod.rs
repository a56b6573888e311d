//! Conditional independence tests and target-local parent discovery on the
//! augmented table built by [`crate::allocation::fci_preprocess`].
//!
//! Every feature and allocation column precedes the outcome in time, so any
//! candidate still adjacent to the outcome after the search is a parent.

mod fisher;
mod kernel;

use serde::{Deserialize, Serialize};

use crate::allocation::AugmentedTable;
use crate::error::{invalid, Result};
use crate::models::Column;
use crate::sem::SemConfig;

pub use fisher::{fisher_z_test, CovarianceCache};
pub use kernel::{kernel_ci_test, KernelOptions};

/// Named numeric columns, column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Columns {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
}

impl Columns {
    pub fn new(names: Vec<String>, cols: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != cols.len() {
            return Err(invalid(format!("{} names for {} columns", names.len(), cols.len())));
        }
        let n = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|c| c.len() != n) {
            return Err(invalid("columns differ in length"));
        }
        if cols.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("columns must be finite"));
        }
        let mut sorted = names.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate column names"));
        }
        Ok(Self { names, cols })
    }

    pub fn from_table(t: &AugmentedTable) -> Self {
        let cols = (0..t.columns.len()).map(|c| t.column(c)).collect();
        Self { names: t.columns.clone(), cols }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.cols.first().map_or(0, Vec::len)
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.cols[c]
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|c| c == name).ok_or_else(|| invalid(format!("unknown column {name:?}")))
    }

    /// The named columns, in the given order.
    pub fn subset(&self, names: &[String]) -> Result<Self> {
        let cols = names.iter().map(|n| self.index(n).map(|c| self.cols[c].clone())).collect::<Result<_>>()?;
        Ok(Self { names: names.to_vec(), cols })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiTestResult {
    pub x: String,
    pub y: String,
    pub conditioning: Vec<String>,
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    /// `p_value > alpha`.
    pub independent: bool,
}

impl CiTestResult {
    pub(crate) fn new(x: &str, y: &str, z: &[String], statistic: f64, p_value: f64, alpha: f64) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        Self {
            x: x.into(),
            y: y.into(),
            conditioning: z.to_vec(),
            statistic,
            p_value,
            alpha,
            independent: p_value > alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiTestKind {
    FisherZ,
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryOptions {
    pub alpha: f64,
    pub test: CiTestKind,
    /// Largest conditioning-set size; must be non-negative.
    pub max_cond: i64,
    pub kernel: KernelOptions,
}

impl Default for DiscoveryOptions {
    fn default() -> Self {
        Self { alpha: 0.01, test: CiTestKind::FisherZ, max_cond: 3, kernel: KernelOptions::default() }
    }
}

impl DiscoveryOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_cond < 0 {
            return Err(invalid(format!("max_cond must be non-negative, got {}", self.max_cond)));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let floor = 1.0 / (1 + self.kernel.n_perm) as f64;
        if self.test == CiTestKind::Kernel && floor > self.alpha {
            return Err(invalid(format!(
                "{} permutations cannot give a p-value below alpha={}",
                self.kernel.n_perm, self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParentCategory {
    SelfAd,
    SameBlock,
    CrossBlock,
    Allocation,
    /// A column outside the augmented-table naming scheme.
    Other,
}

impl ParentCategory {
    /// Category of an augmented-table column for target position `i`
    /// (zero-based).
    pub fn of(column: &str, i: usize) -> Self {
        match Column::parse(column, usize::MAX, usize::MAX) {
            Some(Column::D1 { j, .. }) | Some(Column::D2 { j, .. }) if j == i => ParentCategory::SelfAd,
            Some(Column::D2 { .. }) => ParentCategory::SameBlock,
            Some(Column::D1 { .. }) => ParentCategory::CrossBlock,
            Some(Column::Allocation { .. }) => ParentCategory::Allocation,
            _ => ParentCategory::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parent {
    pub column: String,
    pub category: ParentCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentSet {
    pub target: String,
    /// Sorted by column name.
    pub parents: Vec<Parent>,
}

impl ParentSet {
    pub fn columns(&self) -> Vec<String> {
        self.parents.iter().map(|p| p.column.clone()).collect()
    }
}

/// One test run by the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub candidate: String,
    pub conditioning: Vec<String>,
    pub statistic: f64,
    pub p_value: f64,
    pub independent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discovery {
    pub parents: ParentSet,
    /// Candidates after dropping constant columns, sorted.
    pub candidates: Vec<String>,
    pub dropped_constant: Vec<String>,
    pub trace: Vec<TraceEntry>,
    pub options: DiscoveryOptions,
}

impl Discovery {
    /// Candidates with no recorded test above `alpha`: the search result
    /// re-read at another level on the same trace.
    pub fn replay(&self, alpha: f64) -> Vec<String> {
        self.candidates
            .iter()
            .filter(|c| !self.trace.iter().any(|t| &t.candidate == *c && t.p_value > alpha))
            .cloned()
            .collect()
    }

    pub fn write_trace_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "test",
            "target",
            "level",
            "candidate",
            "conditioning",
            "statistic",
            "p_value",
            "independent",
        ])?;
        for (k, t) in self.trace.iter().enumerate() {
            out.write_record([
                (k + 1).to_string(),
                self.parents.target.clone(),
                t.level.to_string(),
                t.candidate.clone(),
                t.conditioning.join(";"),
                crate::dataset::fmt_f64(t.statistic),
                crate::dataset::fmt_f64(t.p_value),
                t.independent.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn outcome_position(name: &str) -> Option<usize> {
    let j: usize = name.strip_prefix('y')?.parse().ok()?;
    j.checked_sub(1)
}

/// Advance `idx` to the next `k`-combination of `0..n` in lexicographic
/// order; false when exhausted.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for pos in (0..k).rev() {
        if idx[pos] < n - k + pos {
            idx[pos] += 1;
            for q in pos + 1..k {
                idx[q] = idx[q - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Target-local PC-stable adjacency search for the parents of `target`.
///
/// Candidates are every non-outcome column that is not constant, visited
/// in lexicographic name order. At level `l` each candidate is tested
/// against the target given every size-`l` subset of the other candidates
/// adjacent at the start of the level, and removed at the first accepted
/// independence. Conditioning sets come from the start-of-level snapshot,
/// so the result does not depend on column order.
pub fn discover_parents(data: &Columns, target: &str, opts: &DiscoveryOptions) -> Result<Discovery> {
    opts.validate()?;
    let t = data.index(target)?;
    let position = outcome_position(target).unwrap_or(0);
    if data.n_rows() < 5 {
        return Err(invalid("too few rows for discovery"));
    }
    if data.column(t).iter().all(|v| *v == data.column(t)[0]) {
        return Err(invalid(format!("target {target} is constant")));
    }
    let mut candidates = Vec::new();
    let mut dropped_constant = Vec::new();
    for (c, name) in data.names().iter().enumerate() {
        if c == t || outcome_position(name).is_some() {
            continue;
        }
        let col = data.column(c);
        if col.iter().all(|v| *v == col[0]) {
            dropped_constant.push(name.clone());
        } else {
            candidates.push(name.clone());
        }
    }
    candidates.sort();
    dropped_constant.sort();

    let mut keep = candidates.clone();
    keep.push(target.to_string());
    let sub = data.subset(&keep)?;
    let cache = match opts.test {
        CiTestKind::FisherZ => Some(CovarianceCache::new(&sub)),
        CiTestKind::Kernel => None,
    };
    let test = |c: &str, z: &[String]| -> Result<CiTestResult> {
        match &cache {
            Some(cache) => cache.test(c, target, z, opts.alpha),
            None => kernel_ci_test(&sub, c, target, z, opts.alpha, &opts.kernel),
        }
    };

    let mut adjacent = candidates.clone();
    let mut trace = Vec::new();
    for level in 0..=opts.max_cond as usize {
        if adjacent.len() < level + 1 {
            break;
        }
        let snapshot = adjacent.clone();
        for c in &snapshot {
            let others: Vec<&String> = snapshot.iter().filter(|o| *o != c).collect();
            if others.len() < level {
                continue;
            }
            let mut idx: Vec<usize> = (0..level).collect();
            loop {
                let z: Vec<String> = idx.iter().map(|&k| others[k].clone()).collect();
                let r = test(c, &z)?;
                trace.push(TraceEntry {
                    level,
                    candidate: c.clone(),
                    conditioning: z,
                    statistic: r.statistic,
                    p_value: r.p_value,
                    independent: r.independent,
                });
                if r.independent {
                    adjacent.retain(|a| a != c);
                    break;
                }
                if !next_combination(&mut idx, others.len()) {
                    break;
                }
            }
        }
    }
    let parents =
        adjacent.into_iter().map(|column| Parent { category: ParentCategory::of(&column, position), column }).collect();
    Ok(Discovery {
        parents: ParentSet { target: target.to_string(), parents },
        candidates,
        dropped_constant,
        trace,
        options: *opts,
    })
}

/// Structural parents of `Y_i` (zero-based `i`) among the augmented-table
/// columns under `cfg`: same-block columns whose coefficient (plus the
/// own-ad weight for the target) is nonzero and cross-block columns of
/// other ads with a nonzero cross-block coefficient. Sorted by name.
pub fn true_parents(cfg: &SemConfig, i: usize) -> Vec<String> {
    let mut out = Vec::new();
    for j in 0..cfg.m {
        for k in 0..cfg.p {
            let own = if j == i { cfg.self_weight.get(k).copied().unwrap_or(0.0) } else { 0.0 };
            if cfg.gamma[k] + own != 0.0 {
                out.push(Column::D2 { j, k }.name());
            }
            if j != i && cfg.eta[k] != 0.0 {
                out.push(Column::D1 { j, k }.name());
            }
        }
    }
    out.sort();
    out
}

/// [`discover_parents`] on an augmented table.
pub fn discover_table_parents(table: &AugmentedTable, opts: &DiscoveryOptions) -> Result<Discovery> {
    let target = table
        .columns
        .iter()
        .rev()
        .find(|c| outcome_position(c).is_some())
        .ok_or_else(|| invalid("table has no outcome column"))?
        .clone();
    discover_parents(&Columns::from_table(table), &target, opts)
}
