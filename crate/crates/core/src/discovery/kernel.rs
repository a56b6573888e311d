use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CiTestResult, Columns};
use crate::error::{invalid, Result};
use crate::math::quantile_sorted;
use crate::rng::{domain, stream};

/// Residual variance (relative) below which a variable counts as a
/// function of the conditioning set.
const DETERMINED: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelOptions {
    pub n_perm: usize,
    /// Largest number of rows used; larger inputs are subsampled or rejected.
    pub cap: usize,
    pub subsample: bool,
    /// Random Fourier frequencies per variable for the dependence statistic.
    pub n_freq: usize,
    /// Random Fourier frequencies for the conditioning-set regression.
    pub n_freq_cond: usize,
    pub seed: u64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { n_perm: 200, cap: 5_000, subsample: true, n_freq: 5, n_freq_cond: 10, seed: 0 }
    }
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * scale);
}

/// Median pairwise Euclidean distance over at most 500 rows.
fn median_distance(rows: &[Vec<f64>]) -> f64 {
    let k = rows.len().min(500);
    let mut d = Vec::with_capacity(k * (k - 1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let s: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| (x - y).powi(2)).sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let med = if d.is_empty() { 0.0 } else { quantile_sorted(&d, 0.5) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Random Fourier features of a Gaussian kernel with bandwidth `h`:
/// `cos(w.z / h)` and `sin(w.z / h)` for each frequency `w`.
fn fourier_features(rows: &[Vec<f64>], freqs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::with_capacity(rows.len()); 2 * freqs.len()];
    for r in rows {
        for (f, w) in freqs.iter().enumerate() {
            let t = w.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / h;
            cols[2 * f].push(t.cos());
            cols[2 * f + 1].push(t.sin());
        }
    }
    cols
}

fn center(cols: &mut [Vec<f64>]) {
    for c in cols {
        let m = c.iter().sum::<f64>() / c.len() as f64;
        c.iter_mut().for_each(|v| *v -= m);
    }
}

/// Residuals of each target on `[1, Z, RFF(Z)]` by ridge least squares.
fn residualize(targets: &[&[f64]], basis: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = targets[0].len();
    let k = basis.len() + 1;
    let b = DMatrix::from_fn(n, k, |r, c| if c == 0 { 1.0 } else { basis[c - 1][r] });
    let mut gram = b.transpose() * &b;
    for c in 1..k {
        gram[(c, c)] += 1e-6 * n as f64;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| crate::error::Error::Numerical("conditioning basis is not positive definite".into()))?;
    Ok(targets
        .iter()
        .map(|t| {
            let v = DVector::from_column_slice(t);
            let beta = chol.solve(&(b.transpose() * &v));
            (v - &b * beta).iter().copied().collect()
        })
        .collect())
}

/// Row-major feature matrix: `n` rows of `width` values.
struct RowMajor {
    width: usize,
    data: Vec<f64>,
}

impl RowMajor {
    fn from_columns(cols: &[Vec<f64>]) -> Self {
        let n = cols[0].len();
        let width = cols.len();
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend(cols.iter().map(|c| c[r]));
        }
        Self { width, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }
}

/// `n * ||Phi^T Psi / n||_F^2` with `Psi` rows taken in `order`.
fn statistic(phi: &RowMajor, psi: &RowMajor, order: &[usize]) -> f64 {
    let w = psi.width;
    let mut acc = vec![0.0; phi.width * w];
    for (r, &o) in order.iter().enumerate() {
        let b = psi.row(o);
        for (a, &pa) in phi.row(r).iter().enumerate() {
            for (cell, &pb) in acc[a * w..(a + 1) * w].iter_mut().zip(b) {
                *cell += pa * pb;
            }
        }
    }
    acc.iter().map(|v| v * v).sum::<f64>() / order.len() as f64
}

/// Kernel conditional independence test of `x _||_ y | z`.
///
/// Both variables are residualized on the conditioning set (ridge
/// regression on `z` and Gaussian-kernel random features of `z`), then the
/// Hilbert-Schmidt norm of the cross-covariance of Gaussian-kernel random
/// features of the residuals is compared against its permutation
/// distribution. Bandwidths follow the median heuristic.
pub fn kernel_ci_test(
    data: &Columns,
    x: &str,
    y: &str,
    z: &[String],
    alpha: f64,
    opts: &KernelOptions,
) -> Result<CiTestResult> {
    if opts.n_perm == 0 || opts.n_freq == 0 {
        return Err(invalid("kernel test needs at least one permutation and one frequency"));
    }
    // order the pair so the test is exactly symmetric in (x, y)
    let (first, second) = if x <= y { (x, y) } else { (y, x) };
    let xc = data.index(first)?;
    let yc = data.index(second)?;
    let zc: Vec<usize> = z.iter().map(|c| data.index(c)).collect::<Result<_>>()?;
    let n_all = data.n_rows();
    let rows: Vec<usize> = if n_all > opts.cap {
        if !opts.subsample {
            return Err(invalid(format!(
                "kernel test on {n_all} rows exceeds the cap of {} and subsampling is off",
                opts.cap
            )));
        }
        let mut rng = stream(opts.seed, domain::KERNEL, 0);
        let mut idx = index::sample(&mut rng, n_all, opts.cap).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n_all).collect()
    };
    let n = rows.len();
    if n < z.len() + 5 {
        return Err(invalid(format!("{n} rows are too few for a conditioning set of size {}", z.len())));
    }
    let pick = |c: usize| -> Vec<f64> {
        let col = data.column(c);
        rows.iter().map(|&r| col[r]).collect()
    };
    let mut xv = pick(xc);
    let mut yv = pick(yc);
    standardize(&mut xv);
    standardize(&mut yv);
    let mut zcols: Vec<Vec<f64>> = zc.iter().map(|&c| pick(c)).collect();
    zcols.iter_mut().for_each(|c| standardize(c));

    let (rx, ry) = if zcols.is_empty() {
        (xv.clone(), yv.clone())
    } else {
        let zrows: Vec<Vec<f64>> = (0..n).map(|r| zcols.iter().map(|c| c[r]).collect()).collect();
        let mut rng = stream(opts.seed, domain::KERNEL, 1);
        let freqs: Vec<Vec<f64>> =
            (0..opts.n_freq_cond).map(|_| (0..zcols.len()).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let mut basis = zcols.clone();
        basis.extend(fourier_features(&zrows, &freqs, median_distance(&zrows)));
        let mut res = residualize(&[&xv, &yv], &basis)?;
        let ry = res.pop().expect("two residuals");
        let rx = res.pop().expect("two residuals");
        (rx, ry)
    };
    let var = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>() / n as f64;
    if var(&rx) <= DETERMINED || var(&ry) <= DETERMINED {
        return Ok(CiTestResult::new(x, y, z, 0.0, 1.0, alpha));
    }

    let mut rng = stream(opts.seed, domain::KERNEL, 2);
    let freqs: Vec<Vec<f64>> = (0..opts.n_freq).map(|_| vec![rng.sample(StandardNormal)]).collect();
    let features = |r: &[f64]| {
        let rows: Vec<Vec<f64>> = r.iter().map(|&v| vec![v]).collect();
        let mut f = fourier_features(&rows, &freqs, median_distance(&rows));
        center(&mut f);
        RowMajor::from_columns(&f)
    };
    let phi = features(&rx);
    let psi = features(&ry);
    let identity: Vec<usize> = (0..n).collect();
    let observed = statistic(&phi, &psi, &identity);
    let mut rng = stream(opts.seed, domain::KERNEL, 3);
    let mut order = identity;
    let mut exceed = 0usize;
    for _ in 0..opts.n_perm {
        order.shuffle(&mut rng);
        if statistic(&phi, &psi, &order) >= observed {
            exceed += 1;
        }
    }
    let p_value = (1 + exceed) as f64 / (1 + opts.n_perm) as f64;
    Ok(CiTestResult::new(x, y, z, observed, p_value, alpha))
}
