//! Conditioning sets for the outcome regression of position `i`.
//!
//! Column names use one-based positions:
//!
//! | name            | value                                            |
//! |-----------------|--------------------------------------------------|
//! | `ctx_top`       | number of ads in the Top block                   |
//! | `ctx_self_block`| the target's own block indicator `A_i`           |
//! | `x{j}_{k}`      | raw feature `k` of ad `j`                         |
//! | `b_x{j}_{k}`    | `X_jk` if ad `j != i` shares the target's block  |
//! | `c_x{j}_{k}`    | `X_jk` if ad `j` sits in the other block         |
//! | `a{j}`          | block indicator of ad `j`                        |
//! | `d1_x{j}_{k}`   | cross-block half of the discovery table          |
//! | `d2_x{j}_{k}`   | same-block half of the discovery table           |

use serde::{Deserialize, Serialize};

use crate::allocation::AllocationRule;
use crate::dataset::FeatureMatrix;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureVariant {
    /// Page context and the ad's own features.
    Baseline,
    /// Baseline plus same-block features of the other ads.
    Block,
    /// Block plus cross-block features of the other ads.
    BlockCross,
    /// Page context, every ad's features and every allocation.
    Full,
    /// Exactly the listed columns.
    Discovered,
}

impl FeatureVariant {
    pub const ALL: [FeatureVariant; 5] = [
        FeatureVariant::Baseline,
        FeatureVariant::Block,
        FeatureVariant::BlockCross,
        FeatureVariant::Full,
        FeatureVariant::Discovered,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FeatureVariant::Baseline => "baseline",
            FeatureVariant::Block => "block",
            FeatureVariant::BlockCross => "block-cross",
            FeatureVariant::Full => "full",
            FeatureVariant::Discovered => "discovered",
        }
    }
}

impl std::str::FromStr for FeatureVariant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown feature variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSetSpec {
    pub variant: FeatureVariant,
    /// Column names for the discovered variant.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discovered_parents: Vec<String>,
    /// How `d1_` columns treat the target ad (see the discovery table).
    #[serde(default)]
    pub keep_self_in_d1: bool,
}

impl FeatureSetSpec {
    pub fn new(variant: FeatureVariant) -> Self {
        Self { variant, discovered_parents: Vec::new(), keep_self_in_d1: false }
    }

    pub fn discovered(parents: Vec<String>) -> Self {
        Self { variant: FeatureVariant::Discovered, discovered_parents: parents, keep_self_in_d1: false }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant, self.discovered_parents.is_empty()) {
            (FeatureVariant::Discovered, true) => Err(invalid("discovered variant needs a nonempty parent list")),
            (FeatureVariant::Discovered, false) | (_, true) => Ok(()),
            (v, false) => Err(invalid(format!("parent list given for variant {}", v.name()))),
        }
    }
}

/// One outcome-model input, evaluated from `(X, A)` for a fixed target.
/// Positions are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    ContextTop,
    ContextSelfBlock,
    Raw { j: usize, k: usize },
    SameBlock { j: usize, k: usize },
    CrossBlock { j: usize, k: usize },
    Allocation { j: usize },
    D1 { j: usize, k: usize },
    D2 { j: usize, k: usize },
}

impl Column {
    pub fn name(&self) -> String {
        match *self {
            Column::ContextTop => "ctx_top".into(),
            Column::ContextSelfBlock => "ctx_self_block".into(),
            Column::Raw { j, k } => format!("x{}_{}", j + 1, k + 1),
            Column::SameBlock { j, k } => format!("b_x{}_{}", j + 1, k + 1),
            Column::CrossBlock { j, k } => format!("c_x{}_{}", j + 1, k + 1),
            Column::Allocation { j } => format!("a{}", j + 1),
            Column::D1 { j, k } => format!("d1_x{}_{}", j + 1, k + 1),
            Column::D2 { j, k } => format!("d2_x{}_{}", j + 1, k + 1),
        }
    }

    /// Parse a column name for a table with `m` ads and `p` features.
    pub fn parse(name: &str, m: usize, p: usize) -> Option<Column> {
        match name {
            "ctx_top" => return Some(Column::ContextTop),
            "ctx_self_block" => return Some(Column::ContextSelfBlock),
            _ => {}
        }
        let pair = |rest: &str| -> Option<(usize, usize)> {
            let (j, k) = rest.split_once('_')?;
            let (j, k): (usize, usize) = (j.parse().ok()?, k.parse().ok()?);
            (1..=m).contains(&j).then_some(())?;
            (1..=p).contains(&k).then(|| (j - 1, k - 1))
        };
        if let Some(rest) = name.strip_prefix("d1_x") {
            return pair(rest).map(|(j, k)| Column::D1 { j, k });
        }
        if let Some(rest) = name.strip_prefix("d2_x") {
            return pair(rest).map(|(j, k)| Column::D2 { j, k });
        }
        if let Some(rest) = name.strip_prefix("b_x") {
            return pair(rest).map(|(j, k)| Column::SameBlock { j, k });
        }
        if let Some(rest) = name.strip_prefix("c_x") {
            return pair(rest).map(|(j, k)| Column::CrossBlock { j, k });
        }
        if let Some(rest) = name.strip_prefix('x') {
            return pair(rest).map(|(j, k)| Column::Raw { j, k });
        }
        if let Some(rest) = name.strip_prefix('a') {
            let j: usize = rest.parse().ok()?;
            return (1..=m).contains(&j).then(|| Column::Allocation { j: j - 1 });
        }
        None
    }

    /// Whether the value changes with the allocation.
    pub fn depends_on_allocation(&self) -> bool {
        !matches!(self, Column::Raw { .. })
    }

    pub fn value(&self, x: &FeatureMatrix, a: &AllocationRule, i: usize, keep_self_in_d1: bool) -> f64 {
        let masked = |keep: bool, j: usize, k: usize| if keep { x.get(j, k) } else { 0.0 };
        match *self {
            Column::ContextTop => a.top_count() as f64,
            Column::ContextSelfBlock => f64::from(a.block(i)),
            Column::Raw { j, k } => x.get(j, k),
            Column::SameBlock { j, k } => masked(j != i && a.same_block(i, j), j, k),
            Column::CrossBlock { j, k } => masked(!a.same_block(i, j), j, k),
            Column::Allocation { j } => f64::from(a.block(j)),
            Column::D1 { j, k } => masked(!a.same_block(i, j) || (keep_self_in_d1 && j == i), j, k),
            Column::D2 { j, k } => masked(j == i || a.same_block(i, j), j, k),
        }
    }
}

/// The ordered input columns of the outcome model for target `i`.
pub fn resolve_columns(spec: &FeatureSetSpec, m: usize, p: usize, i: usize) -> Result<Vec<Column>> {
    spec.validate()?;
    if i >= m {
        return Err(invalid(format!("position {} out of range", i + 1)));
    }
    let context = [Column::ContextTop, Column::ContextSelfBlock];
    let own = (0..p).map(|k| Column::Raw { j: i, k });
    let others = || (0..m).filter(move |&j| j != i).flat_map(move |j| (0..p).map(move |k| (j, k)));
    let mut cols: Vec<Column> = context.to_vec();
    match spec.variant {
        FeatureVariant::Baseline => cols.extend(own),
        FeatureVariant::Block => {
            cols.extend(own);
            cols.extend(others().map(|(j, k)| Column::SameBlock { j, k }));
        }
        FeatureVariant::BlockCross => {
            cols.extend(own);
            cols.extend(others().map(|(j, k)| Column::SameBlock { j, k }));
            cols.extend(others().map(|(j, k)| Column::CrossBlock { j, k }));
        }
        FeatureVariant::Full => {
            cols.extend((0..m).flat_map(|j| (0..p).map(move |k| Column::Raw { j, k })));
            cols.extend((0..m).map(|j| Column::Allocation { j }));
        }
        FeatureVariant::Discovered => {
            cols.clear();
            for name in &spec.discovered_parents {
                let c = Column::parse(name, m, p)
                    .ok_or_else(|| invalid(format!("unknown column {name:?} for m={m}, p={p}")))?;
                if cols.contains(&c) {
                    return Err(invalid(format!("column {name:?} listed twice")));
                }
                cols.push(c);
            }
        }
    }
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{augmented_columns, augmented_row, PreprocessOptions};

    fn names(spec: &FeatureSetSpec, m: usize, p: usize, i: usize) -> Vec<String> {
        resolve_columns(spec, m, p, i).unwrap().iter().map(Column::name).collect()
    }

    #[test]
    fn variant_sizes() {
        let (m, p) = (3, 4);
        let size = |v| names(&FeatureSetSpec::new(v), m, p, 1).len();
        assert_eq!(size(FeatureVariant::Baseline), 2 + p);
        assert_eq!(size(FeatureVariant::Block), 2 + p + (m - 1) * p);
        assert_eq!(size(FeatureVariant::BlockCross), 2 + p + 2 * (m - 1) * p);
        assert_eq!(size(FeatureVariant::Full), 2 + m * p + m);
        assert_eq!(names(&FeatureSetSpec::new(FeatureVariant::Baseline), m, p, 1)[2], "x2_1");
    }

    #[test]
    fn names_round_trip() {
        let (m, p) = (3, 2);
        for v in [FeatureVariant::BlockCross, FeatureVariant::Full] {
            for c in resolve_columns(&FeatureSetSpec::new(v), m, p, 0).unwrap() {
                assert_eq!(Column::parse(&c.name(), m, p), Some(c));
            }
        }
        for c in augmented_columns(m, p, 0).iter().filter(|c| !c.starts_with('y')) {
            assert_eq!(Column::parse(c, m, p).unwrap().name(), *c);
        }
        assert_eq!(Column::parse("x4_1", m, p), None);
        assert_eq!(Column::parse("a0", m, p), None);
        assert_eq!(Column::parse("y1", m, p), None);
    }

    #[test]
    fn discovered_validation() {
        assert!(resolve_columns(&FeatureSetSpec::discovered(vec![]), 3, 2, 0).is_err());
        assert!(resolve_columns(&FeatureSetSpec::discovered(vec!["bogus".into()]), 3, 2, 0).is_err());
        let cols = resolve_columns(&FeatureSetSpec::discovered(vec!["d2_x1_2".into(), "a3".into()]), 3, 2, 0).unwrap();
        assert_eq!(cols, vec![Column::D2 { j: 0, k: 1 }, Column::Allocation { j: 2 }]);
        let mut bad = FeatureSetSpec::new(FeatureVariant::Full);
        bad.discovered_parents.push("a1".into());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn masks_match_block_and_discovery_views() {
        let (m, p) = (3, 2);
        let x = FeatureMatrix::new(m, p, (1..=6).map(f64::from).collect()).unwrap();
        let rules = crate::allocation::enumerate_valid_rules(m).unwrap();
        for a in &rules {
            for i in 0..m {
                for keep in [false, true] {
                    let mut row = Vec::new();
                    augmented_row(&x, a, i, PreprocessOptions { keep_self_in_d1: keep }, &mut row);
                    for (c, name) in augmented_columns(m, p, i).iter().take(row.len()).enumerate() {
                        let col = Column::parse(name, m, p).unwrap();
                        assert_eq!(col.value(&x, a, i, keep), row[c], "{name} {a} i={i}");
                    }
                }
                let bf = crate::allocation::block_features(&x, a, i).unwrap();
                for j in 0..m {
                    for k in 0..p {
                        let b = Column::SameBlock { j, k }.value(&x, a, i, false);
                        let c = Column::CrossBlock { j, k }.value(&x, a, i, false);
                        let own = if j == i { x.get(j, k) } else { 0.0 };
                        assert_eq!(b + own, bf.xb.get(j, k));
                        assert_eq!(c, bf.xc.get(j, k));
                    }
                }
            }
        }
    }
}
