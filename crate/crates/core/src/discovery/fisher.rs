use nalgebra::{DMatrix, DVector};

use super::{CiTestResult, Columns};
use crate::error::{invalid, Error, Result};
use crate::math::two_sided_normal_p;

/// Relative residual variance below which a column counts as determined
/// by the conditioning set.
const DEGENERATE: f64 = 1e-10;

/// Covariance matrix of every column, computed once so partial
/// correlations for many conditioning sets are cheap.
#[derive(Debug, Clone)]
pub struct CovarianceCache {
    names: Vec<String>,
    n: usize,
    cov: DMatrix<f64>,
}

impl CovarianceCache {
    pub fn new(data: &Columns) -> Self {
        let k = data.names().len();
        let n = data.n_rows();
        let means: Vec<f64> = (0..k).map(|c| data.column(c).iter().sum::<f64>() / n.max(1) as f64).collect();
        let mut cov = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            let ca = data.column(a);
            for b in a..k {
                let cb = data.column(b);
                let s: f64 = ca.iter().zip(cb).map(|(x, y)| (x - means[a]) * (y - means[b])).sum();
                cov[(a, b)] = s / (n.max(2) - 1) as f64;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        Self { names: data.names().to_vec(), n, cov }
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|c| c == name).ok_or_else(|| invalid(format!("unknown column {name:?}")))
    }

    pub fn variance(&self, c: usize) -> f64 {
        self.cov[(c, c)]
    }

    /// Partial correlation of `x` and `y` given `z`, or `None` when either
    /// is (numerically) determined by `z`.
    pub fn partial_correlation(&self, x: usize, y: usize, z: &[usize]) -> Result<Option<f64>> {
        let (vx, vy) = (self.cov[(x, x)], self.cov[(y, y)]);
        if vx <= 0.0 || vy <= 0.0 {
            return Ok(None);
        }
        let (mut sxx, mut syy, mut sxy) = (vx, vy, self.cov[(x, y)]);
        if !z.is_empty() {
            let l = z.len();
            let szz = DMatrix::from_fn(l, l, |a, b| self.cov[(z[a], z[b])]);
            let chol = szz.clone().cholesky().filter(|ch| {
                let diag = ch.l().diagonal();
                (0..l).all(|k| diag[k] * diag[k] > DEGENERATE * szz[(k, k)].max(f64::MIN_POSITIVE))
            });
            let Some(chol) = chol else {
                return Err(Error::Singular(self.collinear(z)));
            };
            let bx = chol.solve(&DVector::from_fn(l, |a, _| self.cov[(z[a], x)]));
            let by = chol.solve(&DVector::from_fn(l, |a, _| self.cov[(z[a], y)]));
            for a in 0..l {
                sxx -= self.cov[(x, z[a])] * bx[a];
                syy -= self.cov[(y, z[a])] * by[a];
                sxy -= self.cov[(x, z[a])] * by[a];
            }
        }
        if sxx <= DEGENERATE * vx || syy <= DEGENERATE * vy {
            return Ok(None);
        }
        Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
    }

    /// Names of a collinear subset of `z`: the first column explained by
    /// the ones before it, with those it depends on.
    fn collinear(&self, z: &[usize]) -> Vec<String> {
        for end in 1..=z.len() {
            let c = z[end - 1];
            let prev = &z[..end - 1];
            let v = self.cov[(c, c)];
            if v <= 0.0 {
                return vec![self.names[c].clone()];
            }
            if prev.is_empty() {
                continue;
            }
            let l = prev.len();
            let s = DMatrix::from_fn(l, l, |a, b| self.cov[(prev[a], prev[b])]);
            let rhs = DVector::from_fn(l, |a, _| self.cov[(prev[a], c)]);
            let Some(beta) = s.clone().svd(true, true).solve(&rhs, 1e-12).ok() else {
                continue;
            };
            let resid = v - rhs.dot(&beta);
            if resid <= DEGENERATE * v {
                let mut out: Vec<String> = prev
                    .iter()
                    .zip(beta.iter())
                    .filter(|(_, b)| b.abs() > 1e-8)
                    .map(|(&p, _)| self.names[p].clone())
                    .collect();
                out.push(self.names[c].clone());
                return out;
            }
        }
        z.iter().map(|&c| self.names[c].clone()).collect()
    }

    /// Fisher-z test of `x _||_ y | z` on cached covariances.
    pub fn test(&self, x: &str, y: &str, z: &[String], alpha: f64) -> Result<CiTestResult> {
        let (xi, yi) = (self.index(x)?, self.index(y)?);
        let zi: Vec<usize> = z.iter().map(|c| self.index(c)).collect::<Result<_>>()?;
        if z.len() + 2 > self.n.saturating_sub(3) {
            return Err(invalid(format!("conditioning set of size {} is too large for {} rows", z.len(), self.n)));
        }
        let (statistic, p_value) = match self.partial_correlation(xi, yi, &zi)? {
            None => (0.0, 1.0),
            Some(rho) => {
                let rho = rho.clamp(-1.0 + 1e-15, 1.0 - 1e-15);
                let stat = ((self.n - z.len() - 3) as f64).sqrt() * rho.atanh();
                (stat, two_sided_normal_p(stat.abs()))
            }
        };
        Ok(CiTestResult::new(x, y, z, statistic, p_value, alpha))
    }
}

/// Linear-Gaussian conditional independence test: partial correlation of
/// `x` and `y` given `z`, `sqrt(n - |z| - 3) atanh(rho)` against N(0, 1).
pub fn fisher_z_test(data: &Columns, x: &str, y: &str, z: &[String], alpha: f64) -> Result<CiTestResult> {
    let mut keep: Vec<String> = vec![x.to_string(), y.to_string()];
    keep.extend(z.iter().cloned());
    keep.dedup();
    let sub = data.subset(&keep)?;
    CovarianceCache::new(&sub).test(x, y, z, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut impl Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    /// Residual-regression oracle for the partial correlation.
    fn residual_correlation(x: &[f64], y: &[f64], z: &[Vec<f64>]) -> f64 {
        let n = x.len();
        let k = z.len() + 1;
        let design = DMatrix::from_fn(n, k, |r, c| if c == 0 { 1.0 } else { z[c - 1][r] });
        let resid = |v: &[f64]| {
            let v = DVector::from_column_slice(v);
            let beta = (design.transpose() * &design).cholesky().unwrap().solve(&(design.transpose() * &v));
            v - &design * beta
        };
        let (rx, ry) = (resid(x), resid(y));
        rx.dot(&ry) / (rx.norm() * ry.norm())
    }

    #[test]
    fn matches_residual_regression() {
        let mut rng = stream(1, 99, 10);
        let n = 500;
        let z1: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let z2: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let x: Vec<f64> = (0..n).map(|r| z1[r] + 0.5 * z2[r] + gauss(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|r| z1[r] - x[r] * 0.3 + gauss(&mut rng)).collect();
        let data = Columns::new(
            vec!["x".into(), "y".into(), "z1".into(), "z2".into()],
            vec![x.clone(), y.clone(), z1.clone(), z2.clone()],
        )
        .unwrap();
        let cache = CovarianceCache::new(&data);
        let got = cache.partial_correlation(0, 1, &[2, 3]).unwrap().unwrap();
        let want = residual_correlation(&x, &y, &[z1, z2]);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn perfect_dependence_and_chain() {
        let mut rng = stream(2, 99, 11);
        let n = 10_000;
        let x: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let near: Vec<f64> = x.iter().map(|v| v + 0.01 * gauss(&mut rng)).collect();
        let z: Vec<f64> = x.iter().map(|v| v + gauss(&mut rng)).collect();
        let y: Vec<f64> = z.iter().map(|v| v + gauss(&mut rng)).collect();
        let data = Columns::new(vec!["x".into(), "near".into(), "z".into(), "y".into()], vec![x, near, z, y]).unwrap();
        assert!(fisher_z_test(&data, "x", "near", &[], 0.01).unwrap().p_value < 1e-10);
        assert!(!fisher_z_test(&data, "x", "y", &[], 0.01).unwrap().independent);
        assert!(fisher_z_test(&data, "x", "y", &["z".into()], 0.01).unwrap().independent);
    }

    #[test]
    fn singular_conditioning_names_columns() {
        let mut rng = stream(3, 99, 12);
        let n = 200;
        let a: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let c: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - 2.0 * q).collect();
        let x: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let data = Columns::new(vec!["a".into(), "b".into(), "c".into(), "x".into(), "y".into()], vec![a, b, c, x, y])
            .unwrap();
        let err = fisher_z_test(&data, "x", "y", &["a".into(), "b".into(), "c".into()], 0.05).unwrap_err();
        match err {
            Error::Singular(cols) => assert_eq!(cols, vec!["a", "b", "c"]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn symmetric_and_size_checked() {
        let mut rng = stream(4, 99, 13);
        let n = 300;
        let x: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.2 * v + gauss(&mut rng)).collect();
        let z: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let data = Columns::new(vec!["x".into(), "y".into(), "z".into()], vec![x, y, z]).unwrap();
        let a = fisher_z_test(&data, "x", "y", &["z".into()], 0.05).unwrap();
        let b = fisher_z_test(&data, "y", "x", &["z".into()], 0.05).unwrap();
        assert!((a.statistic - b.statistic).abs() < 1e-12);
        let tiny = Columns::new(vec!["x".into(), "y".into()], vec![vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 3.0, 2.0, 5.0]])
            .unwrap();
        assert!(fisher_z_test(&tiny, "x", "y", &[], 0.05).is_err());
    }
}
