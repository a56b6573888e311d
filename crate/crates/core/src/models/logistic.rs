//! Ridge-penalized logistic and multinomial logistic regression fitted by
//! damped Newton iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Design, FitDiagnostics};
use crate::error::{invalid, Error, Result};
use crate::math::{log1pexp, sigmoid, solve_spd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticOptions {
    /// Ridge penalty on the non-intercept weights of the mean log-likelihood.
    pub ridge: f64,
    pub max_iter: usize,
    /// Stop when the gradient norm drops to this value.
    pub tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self { ridge: 1e-6, max_iter: 500, tol: 1e-8 }
    }
}

/// Binary logistic regression; `weights[0]` is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
}

impl LogisticModel {
    pub fn logit(&self, row: &[f64]) -> f64 {
        self.weights[0] + self.weights[1..].iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        sigmoid(self.logit(row))
    }
}

/// Value, gradient and negated Hessian of a penalized mean log-likelihood.
struct Eval {
    f: f64,
    grad: Vec<f64>,
    /// Row-major `dim x dim`, upper triangle filled before `finish`.
    hess: Vec<f64>,
}

impl Eval {
    fn new(dim: usize, hess: bool) -> Self {
        Self { f: 0.0, grad: vec![0.0; dim], hess: if hess { vec![0.0; dim * dim] } else { Vec::new() } }
    }

    /// Average over `n` rows, subtract the ridge penalty on every entry for
    /// which `penalized` holds, and mirror the Hessian.
    fn finish(mut self, w: &[f64], n: f64, ridge: f64, penalized: impl Fn(usize) -> bool) -> Self {
        let dim = self.grad.len();
        self.f /= n;
        self.grad.iter_mut().for_each(|g| *g /= n);
        for k in (0..dim).filter(|&k| penalized(k)) {
            self.f -= 0.5 * ridge * w[k] * w[k];
            self.grad[k] -= ridge * w[k];
        }
        if !self.hess.is_empty() {
            for a in 0..dim {
                for b in a..dim {
                    let v = self.hess[a * dim + b] / n;
                    self.hess[a * dim + b] = v;
                    self.hess[b * dim + a] = v;
                }
                if penalized(a) {
                    self.hess[a * dim + a] += ridge;
                }
            }
        }
        self
    }
}

fn binary_eval(design: &Design, y: &[u8], w: &[f64], ridge: f64, hess: bool) -> Eval {
    let d = design.width();
    let dim = d + 1;
    let mut e = Eval::new(dim, hess);
    let mut xr = vec![1.0; dim];
    for r in 0..design.n_rows() {
        xr[1..].copy_from_slice(design.row(r));
        let z: f64 = w.iter().zip(&xr).map(|(a, b)| a * b).sum();
        let yv = f64::from(y[r]);
        e.f += yv * z - log1pexp(z);
        let p = sigmoid(z);
        let resid = yv - p;
        for (g, x) in e.grad.iter_mut().zip(&xr) {
            *g += resid * x;
        }
        let wt = p * (1.0 - p);
        if hess && wt > 0.0 {
            for a in 0..dim {
                let s = wt * xr[a];
                for (h, x) in e.hess[a * dim + a..(a + 1) * dim].iter_mut().zip(&xr[a..]) {
                    *h += s * x;
                }
            }
        }
    }
    e.finish(w, design.n_rows() as f64, ridge, |k| k > 0)
}

/// Penalized mean log-likelihood and its gradient.
#[cfg(test)]
pub(crate) fn objective(design: &Design, y: &[u8], w: &[f64], ridge: f64) -> (f64, Vec<f64>) {
    let e = binary_eval(design, y, w, ridge, false);
    (e.f, e.grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped Newton ascent from `w` with a halving line search. Returns the
/// final weights, their evaluation and the iteration count.
fn newton(mut w: Vec<f64>, opts: &LogisticOptions, eval: impl Fn(&[f64]) -> Eval) -> Result<(Vec<f64>, Eval, usize)> {
    let dim = w.len();
    let mut cur = eval(&w);
    let mut iterations = 0;
    while norm(&cur.grad) > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let h = DMatrix::from_row_slice(dim, dim, &cur.hess);
        let step = solve_spd(&h, &DVector::from_column_slice(&cur.grad))
            .ok_or_else(|| Error::Numerical("Newton system is not positive definite".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = w.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let e = eval(&cand);
            if e.f >= cur.f - 1e-14 * cur.f.abs().max(1.0) {
                w = cand;
                cur = e;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((w, cur, iterations))
}

fn check_labels(y: &[u8], n: usize) -> Result<()> {
    if y.len() != n {
        return Err(invalid("labels and design differ in length"));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if y.iter().any(|&v| v > 1) {
        return Err(invalid("labels must be 0 or 1"));
    }
    if pos == 0 || pos == n {
        return Err(invalid("fitting needs both labels present"));
    }
    Ok(())
}

/// Maximize the ridge-penalized Bernoulli log-likelihood.
pub fn fit_weights(design: &Design, y: &[u8], opts: &LogisticOptions) -> Result<(LogisticModel, FitDiagnostics)> {
    check_labels(y, design.n_rows())?;
    if opts.ridge < 0.0 {
        return Err(invalid("ridge penalty must be non-negative"));
    }
    let n = design.n_rows() as f64;
    let mut w = vec![0.0; design.width() + 1];
    let rate = y.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    w[0] = (rate / (1.0 - rate)).ln();
    let (w, last, iterations) = newton(w, opts, |w| binary_eval(design, y, w, opts.ridge, true))?;
    let mut warnings = Vec::new();
    let grad_norm = norm(&last.grad);
    let converged = grad_norm <= opts.tol;
    let max_w = w[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let train_loss = -last.f - 0.5 * opts.ridge * w[1..].iter().map(|v| v * v).sum::<f64>();
    if max_w > 30.0 && train_loss < 1e-3 {
        warnings.push(format!("weights diverging (max |w| = {max_w:.1}); the labels look perfectly separable"));
    }
    if !converged {
        warnings.push(format!("stopped after {iterations} iterations with gradient norm {grad_norm:.2e}"));
    }
    Ok((
        LogisticModel { weights: w },
        FitDiagnostics { log_loss: train_loss, iterations, gradient_norm: Some(grad_norm), warnings },
    ))
}

/// Multinomial logistic regression with class 0 as reference.
/// `weights[c]` holds the intercept and slopes of class `c + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinomialModel {
    pub n_classes: usize,
    pub weights: Vec<Vec<f64>>,
}

impl MultinomialModel {
    pub fn predict(&self, row: &[f64]) -> Vec<f64> {
        let mut scores = Vec::with_capacity(self.n_classes);
        scores.push(0.0);
        for w in &self.weights {
            scores.push(w[0] + w[1..].iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
        }
        softmax(&scores)
    }
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn softmax_into(scores: &mut [f64]) {
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - top).exp();
        total += *s;
    }
    scores.iter_mut().for_each(|s| *s /= total);
}

/// Evaluation over the flattened weights `[class 1 | class 2 | ...]`, each
/// block holding an intercept and `d` slopes.
fn multinomial_eval(design: &Design, y: &[usize], n_classes: usize, w: &[f64], ridge: f64, hess: bool) -> Eval {
    let d = design.width();
    let k1 = n_classes - 1;
    let dim = k1 * (d + 1);
    let mut e = Eval::new(dim, hess);
    let mut xr = vec![1.0; d + 1];
    let mut probs = vec![0.0; n_classes];
    for r in 0..design.n_rows() {
        xr[1..].copy_from_slice(design.row(r));
        probs[0] = 0.0;
        for c in 0..k1 {
            probs[c + 1] = w[c * (d + 1)..(c + 1) * (d + 1)].iter().zip(&xr).map(|(a, b)| a * b).sum();
        }
        softmax_into(&mut probs);
        e.f += probs[y[r]].max(1e-300).ln();
        for c in 0..k1 {
            let resid = f64::from(u8::from(y[r] == c + 1)) - probs[c + 1];
            for (g, x) in e.grad[c * (d + 1)..(c + 1) * (d + 1)].iter_mut().zip(&xr) {
                *g += resid * x;
            }
        }
        if !hess {
            continue;
        }
        for c in 0..k1 {
            for f in c..k1 {
                let pc = probs[c + 1];
                let wt = if c == f { pc * (1.0 - pc) } else { -pc * probs[f + 1] };
                if wt == 0.0 {
                    continue;
                }
                let (bc, bf) = (c * (d + 1), f * (d + 1));
                for a in 0..=d {
                    let s = wt * xr[a];
                    let lo = if c == f { a } else { 0 };
                    let row = (bc + a) * dim + bf;
                    for (h, x) in e.hess[row + lo..row + d + 1].iter_mut().zip(&xr[lo..]) {
                        *h += s * x;
                    }
                }
            }
        }
    }
    e.finish(w, design.n_rows() as f64, ridge, |k| k % (d + 1) != 0)
}

/// Fit a multinomial logistic model to class labels `0..n_classes`.
/// Every class must be observed.
pub fn fit_multinomial(
    design: &Design,
    y: &[usize],
    n_classes: usize,
    opts: &LogisticOptions,
) -> Result<(MultinomialModel, FitDiagnostics)> {
    if y.len() != design.n_rows() {
        return Err(invalid("labels and design differ in length"));
    }
    if n_classes < 2 {
        return Err(invalid("multinomial model needs at least two classes"));
    }
    let mut counts = vec![0usize; n_classes];
    for &c in y {
        if c >= n_classes {
            return Err(invalid(format!("class {c} out of range")));
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(invalid(format!("class {c} has no observations")));
    }
    let d = design.width();
    let mut w = Vec::with_capacity((n_classes - 1) * (d + 1));
    for &count in &counts[1..] {
        w.push((count as f64 / counts[0] as f64).ln());
        w.extend(std::iter::repeat_n(0.0, d));
    }
    let (w, last, iterations) = newton(w, opts, |w| multinomial_eval(design, y, n_classes, w, opts.ridge, true))?;
    let grad_norm = norm(&last.grad);
    let mut warnings = Vec::new();
    if grad_norm > opts.tol {
        warnings.push(format!("stopped after {iterations} iterations with gradient norm {grad_norm:.2e}"));
    }
    let penalty: f64 = w.chunks(d + 1).map(|c| c[1..].iter().map(|v| v * v).sum::<f64>()).sum();
    let model = MultinomialModel { n_classes, weights: w.chunks(d + 1).map(<[f64]>::to_vec).collect() };
    Ok((
        model,
        FitDiagnostics {
            log_loss: -last.f - 0.5 * opts.ridge * penalty,
            iterations,
            gradient_norm: Some(grad_norm),
            warnings,
        },
    ))
}
