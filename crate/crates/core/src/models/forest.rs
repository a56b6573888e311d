//! Bagged classification trees on quantile-binned features.
//!
//! Each tree sees Poisson(1) bootstrap weights hashed from the row key, so
//! a fixed seed gives the same forest whatever order the rows arrive in.
//! Splits maximize the weighted Gini reduction over `sqrt(d)` randomly
//! chosen features per node.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Design, FitDiagnostics, FittedModel, ModelKind, ModelParams};
use crate::error::{invalid, Result};
use crate::models::metrics::log_loss;
use crate::rng::{domain, hash_words, stream, unit_from_hash};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestOptions {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Minimum bootstrap weight on each side of a split.
    pub min_leaf: usize,
    /// Histogram bins per feature (at most 256).
    pub n_bins: usize,
    /// Features tried per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestOptions {
    fn default() -> Self {
        Self { n_trees: 200, max_depth: 6, min_leaf: 5, n_bins: 32, max_features: None, seed: 0 }
    }
}

/// One node; leaves have `feature == None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: Option<u32>,
    /// Rows with `x[feature] <= threshold` go left.
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    /// Weighted positive rate of the training rows reaching the node.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            let n = &self.nodes[at];
            match n.feature {
                None => return n.value,
                Some(f) => {
                    at = if row[f as usize] <= n.threshold { n.left as usize } else { n.right as usize };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl Forest {
    /// Mean leaf rate across trees (unclipped).
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Bin thresholds for one feature: distinct quantiles of its values.
fn thresholds(values: &mut [f64], n_bins: usize) -> Vec<f64> {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    let mut out: Vec<f64> = Vec::with_capacity(n_bins);
    for b in 1..n_bins {
        let idx = (b * n / n_bins).min(n - 1);
        let t = values[idx];
        if out.last().is_none_or(|&last| t > last) && t < values[n - 1] {
            out.push(t);
        }
    }
    out
}

fn poisson1(u: f64) -> u32 {
    let mut k = 0u32;
    let mut p = (-1f64).exp();
    let mut cdf = p;
    while u >= cdf && k < 20 {
        k += 1;
        p /= f64::from(k);
        cdf += p;
    }
    k
}

struct Binned<'a> {
    n: usize,
    bins: Vec<u8>,
    cuts: &'a [Vec<f64>],
    y: &'a [u8],
}

impl Binned<'_> {
    fn bin(&self, f: usize, r: usize) -> usize {
        self.bins[f * self.n + r] as usize
    }
}

struct Grower<'a> {
    data: &'a Binned<'a>,
    weights: Vec<f64>,
    opts: &'a ForestOptions,
    n_try: usize,
    tree: u64,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<u32>, depth: usize, node_key: u64) -> u32 {
        let (w, s) = rows.iter().fold((0.0, 0.0), |(w, s), &r| {
            let wt = self.weights[r as usize];
            (w + wt, s + wt * f64::from(self.data.y[r as usize]))
        });
        let value = if w > 0.0 { s / w } else { 0.5 };
        let id = self.nodes.len() as u32;
        self.nodes.push(TreeNode { feature: None, threshold: 0.0, left: 0, right: 0, value });
        let min_leaf = self.opts.min_leaf.max(1) as f64;
        if depth >= self.opts.max_depth || w < 2.0 * min_leaf || s <= 0.0 || s >= w {
            return id;
        }
        let d = self.data.cuts.len();
        let mut rng = stream(hash_words(&[self.opts.seed, self.tree, node_key]), domain::FOREST, 1);
        let mut feats = sample(&mut rng, d, self.n_try).into_vec();
        feats.sort_unstable();
        let parent = s * s / w;
        let mut best: Option<(f64, usize, usize)> = None;
        let mut hw = vec![0.0; 256];
        let mut hs = vec![0.0; 256];
        for &f in &feats {
            let nb = self.data.cuts[f].len() + 1;
            if nb < 2 {
                continue;
            }
            hw[..nb].fill(0.0);
            hs[..nb].fill(0.0);
            for &r in &rows {
                let r = r as usize;
                let b = self.data.bin(f, r);
                let wt = self.weights[r];
                hw[b] += wt;
                hs[b] += wt * f64::from(self.data.y[r]);
            }
            let (mut wl, mut sl) = (0.0, 0.0);
            for b in 0..nb - 1 {
                wl += hw[b];
                sl += hs[b];
                let (wr, sr) = (w - wl, s - sl);
                if wl < min_leaf || wr < min_leaf {
                    continue;
                }
                let score = sl * sl / wl + sr * sr / wr;
                if score > parent + 1e-12 && best.is_none_or(|(bs, _, _)| score > bs) {
                    best = Some((score, f, b));
                }
            }
        }
        let Some((_, f, b)) = best else {
            return id;
        };
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
            rows.into_iter().partition(|&r| self.data.bin(f, r as usize) <= b);
        let left = self.grow(left_rows, depth + 1, 2 * node_key + 1);
        let right = self.grow(right_rows, depth + 1, 2 * node_key + 2);
        let node = &mut self.nodes[id as usize];
        node.feature = Some(f as u32);
        node.threshold = self.data.cuts[f][b];
        node.left = left;
        node.right = right;
        id
    }
}

/// Fit a bagged forest; deterministic given `opts.seed` and the row keys.
pub fn fit_forest(design: &Design, y: &[u8], opts: &ForestOptions) -> Result<FittedModel> {
    let n = design.n_rows();
    let d = design.width();
    if y.len() != n {
        return Err(invalid("labels and design differ in length"));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(invalid("labels must be 0 or 1"));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == n {
        return Err(invalid("fitting needs both labels present"));
    }
    if opts.n_trees == 0 {
        return Err(invalid("forest needs at least one tree"));
    }
    if !(2..=256).contains(&opts.n_bins) {
        return Err(invalid("n_bins must lie in 2..=256"));
    }
    let cuts: Vec<Vec<f64>> = (0..d)
        .map(|f| {
            let mut col: Vec<f64> = (0..n).map(|r| design.row(r)[f]).collect();
            thresholds(&mut col, opts.n_bins)
        })
        .collect();
    let mut bins = vec![0u8; n * d];
    for f in 0..d {
        for r in 0..n {
            let v = design.row(r)[f];
            bins[f * n + r] = cuts[f].partition_point(|&t| t < v) as u8;
        }
    }
    let data = Binned { n, bins, cuts: &cuts, y };
    let n_try = opts.max_features.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d);
    let trees: Vec<Tree> = (0..opts.n_trees as u64)
        .into_par_iter()
        .map(|t| {
            let weights: Vec<f64> = design
                .keys()
                .iter()
                .map(|&k| f64::from(poisson1(unit_from_hash(hash_words(&[opts.seed, domain::FOREST, t, k])))))
                .collect();
            let rows: Vec<u32> = (0..n as u32).filter(|&r| weights[r as usize] > 0.0).collect();
            let mut g = Grower { data: &data, weights, opts, n_try, tree: t, nodes: Vec::new() };
            g.grow(rows, 0, 0);
            Tree { nodes: g.nodes }
        })
        .collect();
    let forest = Forest { n_features: d, trees };
    let train: Vec<f64> = (0..n).map(|r| forest.predict(design.row(r))).collect();
    Ok(FittedModel {
        kind: ModelKind::Forest,
        schema: design.names().to_vec(),
        params: ModelParams::Forest(forest),
        diagnostics: FitDiagnostics {
            log_loss: log_loss(&train, y),
            iterations: opts.n_trees,
            gradient_norm: None,
            warnings: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::auc;
    use crate::rng::stream;
    use rand::Rng;

    fn xor_data(n: usize, seed: u64) -> (Design, Vec<u8>) {
        let mut rng = stream(seed, 99, 3);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a = rng.random_range(0..2u8);
            let b = rng.random_range(0..2u8);
            let noise: f64 = rng.random();
            data.extend([f64::from(a), f64::from(b), noise]);
            let flip = rng.random::<f64>() < 0.05;
            y.push((a ^ b) ^ u8::from(flip));
        }
        let names = vec!["a".into(), "b".into(), "noise".into()];
        (Design::new(names, data).unwrap(), y)
    }

    #[test]
    fn poisson_weights_have_unit_mean() {
        let draws: Vec<u32> = (0..200_000u64).map(|k| poisson1(unit_from_hash(hash_words(&[k])))).collect();
        let mean = draws.iter().map(|&v| f64::from(v)).sum::<f64>() / draws.len() as f64;
        let zeros = draws.iter().filter(|&&v| v == 0).count() as f64 / draws.len() as f64;
        assert!((mean - 1.0).abs() < 0.01);
        assert!((zeros - (-1f64).exp()).abs() < 0.005);
    }

    #[test]
    fn learns_xor() {
        let (d, y) = xor_data(10_000, 1);
        let opts = ForestOptions { n_trees: 50, max_depth: 3, max_features: Some(2), ..Default::default() };
        let m = fit_forest(&d, &y, &opts).unwrap();
        let scores = m.predict_design(&d).unwrap();
        assert!(auc(&scores, &y).unwrap() > 0.95);
    }

    #[test]
    fn depth_zero_predicts_base_rate() {
        let (d, y) = xor_data(5_000, 2);
        let opts = ForestOptions { n_trees: 100, max_depth: 0, ..Default::default() };
        let m = fit_forest(&d, &y, &opts).unwrap();
        let rate = y.iter().map(|&v| f64::from(v)).sum::<f64>() / y.len() as f64;
        let p = m.predict(&[0.0, 1.0, 0.3]);
        assert!((p - rate).abs() < 0.01, "{p} vs {rate}");
        assert_eq!(p, m.predict(&[1.0, 1.0, 0.9]));
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let (d, y) = xor_data(2_000, 3);
        let opts = ForestOptions { n_trees: 20, ..Default::default() };
        let a = fit_forest(&d, &y, &opts).unwrap();
        let b = fit_forest(&d, &y, &opts).unwrap();
        assert_eq!(a, b);
        // reverse the rows but keep each row's key
        let n = d.n_rows();
        let rev: Vec<f64> = (0..n).rev().flat_map(|r| d.row(r).to_vec()).collect();
        let keys: Vec<u64> = (0..n as u64).rev().collect();
        let yr: Vec<u8> = y.iter().rev().copied().collect();
        let dr = Design::new(d.names().to_vec(), rev).unwrap().with_keys(keys).unwrap();
        let c = fit_forest(&dr, &yr, &opts).unwrap();
        assert_eq!(a.params, c.params);
        let other = fit_forest(&d, &y, &ForestOptions { seed: 9, ..opts }).unwrap();
        assert_ne!(a.params, other.params);
    }

    #[test]
    fn predictions_stay_inside_unit_interval() {
        let (d, y) = xor_data(1_000, 4);
        let opts = ForestOptions { n_trees: 10, max_depth: 10, min_leaf: 1, ..Default::default() };
        let m = fit_forest(&d, &y, &opts).unwrap();
        for p in m.predict_design(&d).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }
}
