use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::effects::{covariance, percentile_interval};
use crate::dataset::Dataset;
use crate::error::{invalid, Error, Result};
use crate::rng::{domain, stream};

/// Largest fraction of failed resamples tolerated.
pub const MAX_DROP_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapOptions {
    /// Number of resamples (at least 50).
    pub b: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self { b: 200, level: 0.95, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Estimator on the original data.
    pub point: Vec<f64>,
    /// Successful resamples, in resample order.
    pub replicates: Vec<Vec<f64>>,
    pub stderr: Vec<f64>,
    /// Percentile intervals widened to contain the point estimate.
    pub ci: Vec<(f64, f64)>,
    pub covariance: Vec<Vec<f64>>,
    pub dropped: usize,
    pub errors: Vec<String>,
    pub level: f64,
}

/// Resample whole pageviews with replacement and rerun `estimator` on each
/// resample. Resample `b` draws its indices from its own stream, so the
/// result does not depend on the worker count.
pub fn bootstrap<F>(d: &Dataset, estimator: F, opts: &BootstrapOptions) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    if opts.b < 50 {
        return Err(invalid(format!("bootstrap needs at least 50 resamples, got {}", opts.b)));
    }
    if !(0.0 < opts.level && opts.level < 1.0) {
        return Err(invalid("level must lie in (0, 1)"));
    }
    if d.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let point = estimator(d)?;
    let k = point.len();
    let n = d.len();
    let outcomes: Vec<std::result::Result<Vec<f64>, String>> = (0..opts.b as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(opts.seed, domain::BOOTSTRAP, b);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match estimator(&d.select(&idx)) {
                Ok(v) if v.len() == k && v.iter().all(|x| x.is_finite()) => Ok(v),
                Ok(_) => Err(format!("resample {b}: non-finite or misshapen output")),
                Err(e) => Err(format!("resample {b}: {e}")),
            }
        })
        .collect();
    let mut replicates = Vec::with_capacity(opts.b);
    let mut errors = Vec::new();
    for o in outcomes {
        match o {
            Ok(v) => replicates.push(v),
            Err(e) => errors.push(e),
        }
    }
    let dropped = errors.len();
    if dropped as f64 > MAX_DROP_FRACTION * opts.b as f64 {
        return Err(Error::Numerical(format!(
            "{dropped} of {} bootstrap resamples failed; first: {}",
            opts.b, errors[0]
        )));
    }
    let cov = covariance(&replicates, k);
    let stderr = (0..k).map(|c| cov[c][c].max(0.0).sqrt()).collect();
    let ci = (0..k)
        .map(|c| {
            let mut col: Vec<f64> = replicates.iter().map(|r| r[c]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            percentile_interval(&col, opts.level, point[c])
        })
        .collect();
    Ok(BootstrapResult { point, replicates, stderr, ci, covariance: cov, dropped, errors, level: opts.level })
}
