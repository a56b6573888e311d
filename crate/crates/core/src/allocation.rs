//! Allocation rules, block/cross-block feature masks and the augmented
//! table used for outcome-parent discovery.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureMatrix};
use crate::error::{invalid, Error, Result};

/// Top/Bottom assignment of the `m` ads on a pageview, `1` = Top.
///
/// Valid rules are position-monotone: once an ad is placed in the Bottom
/// block every later ad is in the Bottom block too, so a rule is fully
/// described by its Top count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct AllocationRule {
    bits: Vec<u8>,
}

/// True iff `bits` is a non-empty, non-increasing 0/1 vector.
pub fn is_valid(bits: &[u8]) -> bool {
    !bits.is_empty() && bits.iter().all(|&b| b <= 1) && bits.windows(2).all(|w| w[0] >= w[1])
}

fn describe_violation(bits: &[u8]) -> String {
    if bits.is_empty() {
        return "rule is empty".into();
    }
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return format!("entry {b} is not a block indicator (0 or 1)");
    }
    match bits.windows(2).position(|w| w[0] < w[1]) {
        Some(j) => {
            format!("position {} is Top after position {} is Bottom; rules must be non-increasing", j + 2, j + 1)
        }
        None => "ok".into(),
    }
}

impl AllocationRule {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if is_valid(&bits) {
            Ok(Self { bits })
        } else {
            Err(Error::InvalidRule { rule: fmt_bits(&bits), reason: describe_violation(&bits) })
        }
    }

    /// The rule with the first `top` ads in the Top block.
    pub fn from_top_count(m: usize, top: usize) -> Result<Self> {
        if m == 0 || top > m {
            return Err(invalid(format!("top count {top} out of range for m={m}")));
        }
        Ok(Self { bits: (0..m).map(|j| u8::from(j < top)).collect() })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn top_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Block of the zero-based position `j`.
    pub fn block(&self, j: usize) -> u8 {
        self.bits[j]
    }

    pub fn same_block(&self, i: usize, j: usize) -> bool {
        self.bits[i] == self.bits[j]
    }

    /// Index of this rule in [`enumerate_valid_rules`] order.
    pub fn rule_index(&self) -> usize {
        self.len() - self.top_count()
    }

    /// Replace the block of position `i`, failing if the result breaks
    /// monotonicity.
    pub fn with_block(&self, i: usize, block: u8) -> Result<Self> {
        if i >= self.len() {
            return Err(invalid(format!("position {} out of range", i + 1)));
        }
        let mut bits = self.bits.clone();
        bits[i] = block;
        Self::new(bits)
    }

    /// Compact form without separators, e.g. `110`.
    pub fn code(&self) -> String {
        self.bits.iter().map(|b| char::from(b'0' + b)).collect()
    }
}

fn fmt_bits(bits: &[u8]) -> String {
    let inner: Vec<String> = bits.iter().map(|b| b.to_string()).collect();
    format!("({})", inner.join(","))
}

impl fmt::Display for AllocationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&fmt_bits(&self.bits))
    }
}

impl FromStr for AllocationRule {
    type Err = Error;

    /// Accepts `110`, `1,1,0` and `(1,1,0)`.
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        let bits: Option<Vec<u8>> = if trimmed.contains(',') {
            trimmed.split(',').map(|t| t.trim().parse::<u8>().ok()).collect()
        } else {
            trimmed.chars().map(|c| c.to_digit(10).map(|d| d as u8)).collect()
        };
        match bits {
            Some(bits) => Self::new(bits),
            None => Err(invalid(format!("cannot parse allocation rule {s:?}"))),
        }
    }
}

impl TryFrom<Vec<u8>> for AllocationRule {
    type Error = Error;
    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<AllocationRule> for Vec<u8> {
    fn from(rule: AllocationRule) -> Self {
        rule.bits
    }
}

/// All valid rules for `m` ads, sorted by descending Top count.
pub fn enumerate_valid_rules(m: usize) -> Result<Vec<AllocationRule>> {
    if m == 0 {
        return Err(invalid("m must be at least 1"));
    }
    (0..=m).rev().map(|top| AllocationRule::from_top_count(m, top)).collect()
}

/// Same-block and cross-block views of a feature matrix relative to one ad.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFeatures {
    /// Rows `j` with `A_j = A_i`; other rows zeroed.
    pub xb: FeatureMatrix,
    /// Rows `j` with `A_j != A_i`; other rows zeroed.
    pub xc: FeatureMatrix,
}

pub fn block_features(x: &FeatureMatrix, a: &AllocationRule, i: usize) -> Result<BlockFeatures> {
    if x.rows() != a.len() {
        return Err(invalid(format!("feature matrix has {} rows but rule has {} positions", x.rows(), a.len())));
    }
    if i >= a.len() {
        return Err(invalid(format!("position {} out of range", i + 1)));
    }
    let mut xb = FeatureMatrix::zeros(x.rows(), x.cols());
    let mut xc = FeatureMatrix::zeros(x.rows(), x.cols());
    for j in 0..x.rows() {
        let dst = if a.same_block(i, j) { &mut xb } else { &mut xc };
        dst.row_mut(j).copy_from_slice(x.row(j));
    }
    Ok(BlockFeatures { xb, xc })
}

/// Options for [`fci_preprocess`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PreprocessOptions {
    /// Keep the target ad's own features in the cross-block half instead of
    /// zeroing them (the target is always in its own block, so by default
    /// that half never carries them).
    pub keep_self_in_d1: bool,
}

/// Flat numeric table with named columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTable {
    pub columns: Vec<String>,
    pub n_rows: usize,
    pub data: Vec<f64>,
}

impl AugmentedTable {
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.columns.len();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let w = self.columns.len();
        (0..self.n_rows).map(|r| self.data[r * w + c]).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.columns)?;
        for r in 0..self.n_rows {
            out.write_record(self.row(r).iter().map(|v| crate::dataset::fmt_f64(*v)))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Column names of the augmented table for target `i` (zero-based).
pub fn augmented_columns(m: usize, p: usize, i: usize) -> Vec<String> {
    let mut cols = Vec::with_capacity(2 * m * p + m + 1);
    for half in ["d1", "d2"] {
        for j in 1..=m {
            for k in 1..=p {
                cols.push(format!("{half}_x{j}_{k}"));
            }
        }
    }
    cols.extend((1..=m).map(|j| format!("a{j}")));
    cols.push(format!("y{}", i + 1));
    cols
}

/// Write one augmented row (without the outcome) for a feature matrix and
/// rule into `out`: the cross-block half, the same-block half, then the
/// allocation indicators.
pub(crate) fn augmented_row(
    x: &FeatureMatrix,
    a: &AllocationRule,
    i: usize,
    opts: PreprocessOptions,
    out: &mut Vec<f64>,
) {
    let (m, p) = (x.rows(), x.cols());
    for j in 0..m {
        let keep = !a.same_block(i, j) || (opts.keep_self_in_d1 && j == i);
        if keep {
            out.extend_from_slice(x.row(j));
        } else {
            out.extend(std::iter::repeat_n(0.0, p));
        }
    }
    for j in 0..m {
        let keep = j == i || a.same_block(i, j);
        if keep {
            out.extend_from_slice(x.row(j));
        } else {
            out.extend(std::iter::repeat_n(0.0, p));
        }
    }
    out.extend(a.bits().iter().map(|&b| f64::from(b)));
}

/// Build the discovery table for target position `i` (zero-based).
///
/// The first half zeroes every ad in the target's block (the target
/// included), the second half zeroes every ad outside it (the target
/// excluded), followed by the allocation columns and the target outcome.
pub fn fci_preprocess(d: &Dataset, i: usize, opts: PreprocessOptions) -> Result<AugmentedTable> {
    if d.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    if i >= d.m() {
        return Err(invalid(format!("target position {} out of range", i + 1)));
    }
    let columns = augmented_columns(d.m(), d.p(), i);
    let mut data = Vec::with_capacity(columns.len() * d.len());
    for pv in d.pageviews() {
        augmented_row(&pv.x, &pv.a, i, opts, &mut data);
        data.push(f64::from(pv.y[i]));
    }
    Ok(AugmentedTable { columns, n_rows: d.len(), data })
}
