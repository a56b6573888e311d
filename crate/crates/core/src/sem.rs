//! Structural-equation simulator for pageviews and its Monte Carlo
//! counterfactual oracle.
//!
//! The generative law per pageview is
//!
//! ```text
//! U ~ N(0, 1)
//! C = U + sigma_c * e_c
//! X_j = C * basis_j + sigma_x * e_j                     (p-vector per ad)
//! A ~ eps + (1 - (m+1) eps) * softmax(bias + W vec(X))  (over valid rules)
//! Y_i ~ Bernoulli(sigmoid(beta0 + delta_i + lambda_u U + theta' X_i
//!         + sum_j [A_j = A_i] gamma' X_j + [A_j != A_i] eta' X_j))
//! ```
//!
//! `theta` (`self_weight`) defaults to zero; it lets a configuration carry
//! a self-ad effect while every cross-ad coefficient is switched off.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{enumerate_valid_rules, AllocationRule};
use crate::dataset::{sha256_hex, Dataset, FeatureMatrix, Pageview};
use crate::error::{invalid, Result};
use crate::math::{gauss_hermite, sigmoid};
use crate::rng::{domain, stream};

/// Pageviews (or oracle draws) per independently seeded partition.
pub const CHUNK: usize = 4096;

fn default_eps_pos() -> f64 {
    0.02
}

/// Every parameter of the structural equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemConfig {
    /// Ads per pageview.
    pub m: usize,
    /// Features per ad.
    pub p: usize,
    /// Homophily: weight of the latent intent on every click logit.
    pub lambda_u: f64,
    pub beta0: f64,
    /// Position intercepts, length `m`.
    pub delta: Vec<f64>,
    /// Same-block coefficients, length `p`.
    pub gamma: Vec<f64>,
    /// Cross-block coefficients, length `p`.
    pub eta: Vec<f64>,
    /// Extra weight on the ad's own features, length `p` (empty = zeros).
    #[serde(default)]
    pub self_weight: Vec<f64>,
    /// Loading of each ad's features on the query, `m x p` (empty = ones).
    #[serde(default)]
    pub basis: Vec<Vec<f64>>,
    /// Rule scores: one row of length `m * p` per valid rule, in
    /// descending Top-count order.
    pub w_prop: Vec<Vec<f64>>,
    /// Rule score intercepts, length `m + 1` (empty = zeros).
    #[serde(default)]
    pub prop_bias: Vec<f64>,
    /// Probability floor mixed into the rule distribution.
    #[serde(default = "default_eps_pos")]
    pub eps_pos: f64,
    pub sigma_c: f64,
    pub sigma_x: f64,
    pub seed: u64,
}

impl SemConfig {
    /// A configuration with every effect switched off: clicks are
    /// Bernoulli(1/2) and rules are uniform.
    pub fn null(m: usize, p: usize, seed: u64) -> Self {
        Self {
            m,
            p,
            lambda_u: 0.0,
            beta0: 0.0,
            delta: vec![0.0; m],
            gamma: vec![0.0; p],
            eta: vec![0.0; p],
            self_weight: Vec::new(),
            basis: Vec::new(),
            w_prop: vec![vec![0.0; m * p]; m + 1],
            prop_bias: Vec::new(),
            eps_pos: default_eps_pos(),
            sigma_c: 1.0,
            sigma_x: 1.0,
            seed,
        }
    }

    /// The reference configuration shipped as `fixtures/golden.json`:
    /// three ads with four features each, no latent homophily, same-block
    /// effects on features 1 and 2, a cross-block effect on feature 3, an
    /// own-ad effect on feature 4, and rule scores driven by features 1
    /// and 2 of individual ads.
    pub fn reference() -> Self {
        let mut c = Self::null(3, 4, 20260101);
        c.beta0 = -1.2;
        c.delta = vec![0.3, 0.0, -0.3];
        c.gamma = vec![0.5, -0.4, 0.0, 0.0];
        c.eta = vec![0.0, 0.0, 0.4, 0.0];
        c.self_weight = vec![0.0, 0.0, 0.0, 0.5];
        c.basis = vec![vec![0.3; 4]; 3];
        c.w_prop = vec![vec![0.0; 12]; 4];
        c.w_prop[0][8] = 0.4;
        c.w_prop[1][4] = 0.4;
        c.w_prop[2][0] = 0.3;
        c.w_prop[3][1] = -0.3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p) = (self.m, self.p);
        if m == 0 || p == 0 {
            return Err(invalid("m and p must be at least 1"));
        }
        let check_len = |name: &str, len: usize, want: usize| {
            if len == want {
                Ok(())
            } else {
                Err(invalid(format!("{name} has length {len}, expected {want}")))
            }
        };
        check_len("delta", self.delta.len(), m)?;
        check_len("gamma", self.gamma.len(), p)?;
        check_len("eta", self.eta.len(), p)?;
        if !self.self_weight.is_empty() {
            check_len("self_weight", self.self_weight.len(), p)?;
        }
        if !self.basis.is_empty() {
            check_len("basis", self.basis.len(), m)?;
            for row in &self.basis {
                check_len("basis row", row.len(), p)?;
            }
        }
        check_len("w_prop", self.w_prop.len(), m + 1)?;
        for row in &self.w_prop {
            check_len("w_prop row", row.len(), m * p)?;
        }
        if !self.prop_bias.is_empty() {
            check_len("prop_bias", self.prop_bias.len(), m + 1)?;
        }
        if !(self.sigma_c > 0.0 && self.sigma_x > 0.0) {
            return Err(invalid("noise scales must be positive"));
        }
        if !(self.eps_pos > 0.0 && self.eps_pos * (m + 1) as f64 <= 1.0) {
            return Err(invalid(format!("eps_pos must lie in (0, 1/(m+1)], got {}", self.eps_pos)));
        }
        let all = [&self.delta, &self.gamma, &self.eta, &self.self_weight, &self.prop_bias];
        let finite = all.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.w_prop.iter().flatten().all(|x| x.is_finite())
            && self.basis.iter().flatten().all(|x| x.is_finite())
            && self.lambda_u.is_finite()
            && self.beta0.is_finite();
        if !finite {
            return Err(invalid("parameters must be finite"));
        }
        Ok(())
    }

    pub fn basis_at(&self, j: usize, k: usize) -> f64 {
        if self.basis.is_empty() {
            1.0
        } else {
            self.basis[j][k]
        }
    }

    fn self_at(&self, k: usize) -> f64 {
        self.self_weight.get(k).copied().unwrap_or(0.0)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }

    /// Click logit of position `i` (zero-based) without the latent term.
    pub fn observed_logit(&self, x: &FeatureMatrix, a: &AllocationRule, i: usize) -> f64 {
        let mut z = self.beta0 + self.delta[i];
        let xi = x.row(i);
        for k in 0..self.p {
            z += self.self_at(k) * xi[k];
        }
        for j in 0..self.m {
            let coef = if a.same_block(i, j) { &self.gamma } else { &self.eta };
            z += coef.iter().zip(x.row(j)).map(|(c, v)| c * v).sum::<f64>();
        }
        z
    }

    /// Bernoulli mean of `Y_i` given everything, latent intent included.
    pub fn click_probability(&self, u: f64, x: &FeatureMatrix, a: &AllocationRule, i: usize) -> f64 {
        sigmoid(self.observed_logit(x, a, i) + self.lambda_u * u)
    }

    /// Probability of each valid rule given the features, in
    /// [`enumerate_valid_rules`] order.
    pub fn rule_probabilities(&self, x: &FeatureMatrix) -> Vec<f64> {
        let flat = x.as_slice();
        let scores: Vec<f64> = self
            .w_prop
            .iter()
            .enumerate()
            .map(|(r, w)| {
                self.prop_bias.get(r).copied().unwrap_or(0.0) + w.iter().zip(flat).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        let floor = self.eps_pos;
        let scale = 1.0 - floor * (self.m + 1) as f64;
        exps.iter().map(|e| floor + scale * e / total).collect()
    }

    /// Per-position marginal `p(A_i = 1 | X)` implied by the rule law.
    pub fn top_marginals(&self, x: &FeatureMatrix) -> Vec<f64> {
        let probs = self.rule_probabilities(x);
        (0..self.m).map(|i| probs.iter().take(self.m - i).sum()).collect()
    }

    /// Posterior mean and variance of the latent intent given the features.
    pub fn intent_posterior(&self, x: &FeatureMatrix) -> (f64, f64) {
        let mut b2 = 0.0;
        let mut bx = 0.0;
        for j in 0..self.m {
            for k in 0..self.p {
                let b = self.basis_at(j, k);
                b2 += b * b;
                bx += b * x.get(j, k);
            }
        }
        if b2 == 0.0 {
            return (0.0, 1.0);
        }
        let v = self.sigma_c * self.sigma_c + self.sigma_x * self.sigma_x / b2;
        (bx / b2 / (1.0 + v), v / (1.0 + v))
    }

    fn draw_features(&self, rng: &mut ChaCha8Rng) -> (f64, f64, FeatureMatrix) {
        let u: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let c = u + self.sigma_c * e;
        let mut data = Vec::with_capacity(self.m * self.p);
        for j in 0..self.m {
            for k in 0..self.p {
                let e: f64 = rng.sample(StandardNormal);
                data.push(c * self.basis_at(j, k) + self.sigma_x * e);
            }
        }
        (u, c, FeatureMatrix::new(self.m, self.p, data).expect("shape"))
    }
}

/// Exact `E[Y_i | A = a, X]` under a configuration, integrating the latent
/// intent against its Gaussian posterior.
#[derive(Debug, Clone)]
pub struct OracleOutcomeLaw {
    cfg: SemConfig,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl OracleOutcomeLaw {
    pub fn new(cfg: SemConfig) -> Result<Self> {
        cfg.validate()?;
        let (nodes, weights) = gauss_hermite(40);
        Ok(Self { cfg, nodes, weights })
    }

    pub fn config(&self) -> &SemConfig {
        &self.cfg
    }

    pub fn mean(&self, x: &FeatureMatrix, a: &AllocationRule, i: usize) -> f64 {
        let z = self.cfg.observed_logit(x, a, i);
        if self.cfg.lambda_u == 0.0 {
            return sigmoid(z);
        }
        let (mu, var) = self.cfg.intent_posterior(x);
        let sd = var.sqrt();
        self.nodes.iter().zip(&self.weights).map(|(t, w)| w * sigmoid(z + self.cfg.lambda_u * (mu + sd * t))).sum()
    }
}

/// Latent quantities behind one simulated pageview.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrace {
    pub u: f64,
    pub c: f64,
    /// Bernoulli parameter each click was drawn from.
    pub click_probs: Vec<f64>,
    /// Rule probabilities the allocation was drawn from.
    pub rule_probs: Vec<f64>,
}

fn simulate_chunk(
    cfg: &SemConfig,
    rules: &[AllocationRule],
    chunk: usize,
    start: usize,
    end: usize,
) -> Vec<(Pageview, LatentTrace)> {
    let mut rng = stream(cfg.seed, domain::SIMULATE, chunk as u64);
    (start..end)
        .map(|n| {
            let (u, c, x) = cfg.draw_features(&mut rng);
            let rule_probs = cfg.rule_probabilities(&x);
            let draw: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = rules.len() - 1;
            for (r, pr) in rule_probs.iter().enumerate() {
                acc += pr;
                if draw < acc {
                    pick = r;
                    break;
                }
            }
            let a = rules[pick].clone();
            let click_probs: Vec<f64> = (0..cfg.m).map(|i| cfg.click_probability(u, &x, &a, i)).collect();
            let y = click_probs.iter().map(|&pr| u8::from(rng.random::<f64>() < pr)).collect();
            (Pageview { id: n as u64, x, a, y }, LatentTrace { u, c, click_probs, rule_probs })
        })
        .collect()
}

/// Simulate `n_pageviews` pageviews, keeping the latent trace.
pub fn simulate_traced(cfg: &SemConfig, n_pageviews: usize) -> Result<(Dataset, Vec<LatentTrace>)> {
    cfg.validate()?;
    let rules = enumerate_valid_rules(cfg.m)?;
    let n_chunks = n_pageviews.div_ceil(CHUNK);
    let parts: Vec<Vec<(Pageview, LatentTrace)>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| simulate_chunk(cfg, &rules, c, c * CHUNK, ((c + 1) * CHUNK).min(n_pageviews)))
        .collect();
    let mut pvs = Vec::with_capacity(n_pageviews);
    let mut traces = Vec::with_capacity(n_pageviews);
    for (pv, tr) in parts.into_iter().flatten() {
        let min_p = tr.rule_probs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            min_p >= cfg.eps_pos * (1.0 - 1e-12),
            "positivity violated: rule probability {min_p} below floor {}",
            cfg.eps_pos
        );
        pvs.push(pv);
        traces.push(tr);
    }
    let provenance = format!("sem:sha256:{}", cfg.digest());
    Ok((Dataset::new(cfg.m, cfg.p, pvs, provenance)?, traces))
}

/// Simulate `n_pageviews` pageviews. Deterministic given `cfg.seed` and
/// independent of the number of worker threads.
pub fn simulate(cfg: &SemConfig, n_pageviews: usize) -> Result<Dataset> {
    simulate_traced(cfg, n_pageviews).map(|(d, _)| d)
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleMean {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Default)]
struct Moments {
    n: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl Moments {
    fn new(k: usize) -> Self {
        Self { n: 0.0, sum: vec![0.0; k], sumsq: vec![0.0; k] }
    }

    fn merge(mut self, other: Moments) -> Moments {
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(other.sum) {
            *a += b;
        }
        for (a, b) in self.sumsq.iter_mut().zip(other.sumsq) {
            *a += b;
        }
        self
    }

    fn finish(&self) -> Vec<OracleMean> {
        self.sum
            .iter()
            .zip(&self.sumsq)
            .map(|(s, ss)| {
                let mean = s / self.n;
                let var = ((ss / self.n - mean * mean) * self.n / (self.n - 1.0)).max(0.0);
                OracleMean { mean, stderr: (var / self.n).sqrt() }
            })
            .collect()
    }
}

/// Accumulate Rao-Blackwellized click probabilities for each
/// `(rule, position)` target over the draw partitions `chunks`.
fn oracle_moments(
    cfg: &SemConfig,
    targets: &[(AllocationRule, usize)],
    chunks: std::ops::Range<usize>,
    n_draws: usize,
) -> Moments {
    chunks
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(cfg.seed, domain::ORACLE, c as u64);
            let mut mom = Moments::new(targets.len());
            let end = ((c + 1) * CHUNK).min(n_draws);
            for _ in c * CHUNK..end {
                let (u, _, x) = cfg.draw_features(&mut rng);
                for (t, (a, i)) in targets.iter().enumerate() {
                    let pr = cfg.click_probability(u, &x, a, *i);
                    mom.sum[t] += pr;
                    mom.sumsq[t] += pr * pr;
                }
                mom.n += 1.0;
            }
            mom
        })
        .collect::<Vec<_>>()
        .into_iter()
        // merged in chunk order so the sums do not depend on the worker count
        .fold(Moments::new(targets.len()), Moments::merge)
}

fn check_target(cfg: &SemConfig, a: &AllocationRule, i: usize) -> Result<()> {
    if a.len() != cfg.m {
        return Err(invalid(format!("rule {a} has {} positions, config has m={}", a.len(), cfg.m)));
    }
    if i >= cfg.m {
        return Err(invalid(format!("position {} out of range", i + 1)));
    }
    Ok(())
}

/// `E[Y_i(a)]` by Monte Carlo over the unmutilated laws of `U`, `C`, `X`
/// with the allocation forced to `a`.
pub fn counterfactual_oracle(cfg: &SemConfig, a: &AllocationRule, i: usize, n_draws: usize) -> Result<OracleMean> {
    cfg.validate()?;
    check_target(cfg, a, i)?;
    if n_draws < 2 {
        return Err(invalid("oracle needs at least two draws"));
    }
    let targets = [(a.clone(), i)];
    Ok(oracle_moments(cfg, &targets, 0..n_draws.div_ceil(CHUNK), n_draws).finish()[0])
}

/// Ground-truth counterfactual means for every valid rule and position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub m: usize,
    pub rules: Vec<AllocationRule>,
    /// Indexed `[rule][position]`.
    pub means: Vec<Vec<OracleMean>>,
    pub n_draws: usize,
}

impl OracleTable {
    pub fn get(&self, a: &AllocationRule, i: usize) -> Option<OracleMean> {
        let r = self.rules.iter().position(|x| x == a)?;
        self.means.get(r)?.get(i).copied()
    }

    /// CSV with columns `rule,position,psi,mc_se` (one-based positions).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rule", "position", "psi", "mc_se"])?;
        for (r, rule) in self.rules.iter().enumerate() {
            for (i, om) in self.means[r].iter().enumerate() {
                out.write_record([
                    rule.code(),
                    (i + 1).to_string(),
                    crate::dataset::fmt_f64(om.mean),
                    crate::dataset::fmt_f64(om.stderr),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<OracleTable> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows: Vec<(AllocationRule, usize, OracleMean)> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let perr = |msg: &str| crate::error::Error::Parse {
                location: format!("line {}", k + 2),
                message: msg.to_string(),
            };
            let rule: AllocationRule = rec.get(0).unwrap_or("").parse()?;
            let pos: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| perr("bad position"))?;
            let mean: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| perr("bad psi"))?;
            let stderr: f64 = rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| perr("bad mc_se"))?;
            if pos == 0 {
                return Err(perr("positions are one-based"));
            }
            rows.push((rule, pos - 1, OracleMean { mean, stderr }));
        }
        let m = rows.first().map(|r| r.0.len()).ok_or_else(|| invalid("empty oracle table"))?;
        let rules = enumerate_valid_rules(m)?;
        let mut means = vec![vec![None; m]; rules.len()];
        for (rule, i, om) in rows {
            if rule.len() != m || i >= m {
                return Err(invalid("oracle table mixes pageview sizes"));
            }
            means[rule.rule_index()][i] = Some(om);
        }
        let means = means
            .into_iter()
            .map(|row| row.into_iter().collect::<Option<Vec<_>>>())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| invalid("oracle table is missing (rule, position) entries"))?;
        Ok(OracleTable { m, rules, means, n_draws: 0 })
    }
}

/// Oracle means for all valid rules and positions from one shared set of
/// draws (common random numbers across targets).
pub fn oracle_table(cfg: &SemConfig, n_draws: usize) -> Result<OracleTable> {
    cfg.validate()?;
    if n_draws < 2 {
        return Err(invalid("oracle needs at least two draws"));
    }
    let rules = enumerate_valid_rules(cfg.m)?;
    let targets: Vec<(AllocationRule, usize)> =
        rules.iter().flat_map(|r| (0..cfg.m).map(move |i| (r.clone(), i))).collect();
    let flat = oracle_moments(cfg, &targets, 0..n_draws.div_ceil(CHUNK), n_draws).finish();
    let means = flat.chunks(cfg.m).map(<[OracleMean]>::to_vec).collect();
    Ok(OracleTable { m: cfg.m, rules, means, n_draws })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interfering(seed: u64) -> SemConfig {
        let mut cfg = SemConfig::null(3, 2, seed);
        cfg.lambda_u = 0.7;
        cfg.beta0 = -0.5;
        cfg.delta = vec![0.3, 0.0, -0.4];
        cfg.gamma = vec![0.5, -0.2];
        cfg.eta = vec![-0.4, 0.3];
        cfg.self_weight = vec![0.2, 0.0];
        cfg.basis = vec![vec![0.6, 0.2], vec![0.5, -0.3], vec![0.4, 0.1]];
        cfg.w_prop = vec![
            vec![0.8, 0.0, 0.3, 0.0, 0.0, 0.0],
            vec![0.2, 0.1, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, -0.5, 0.2, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.6, -0.4],
        ];
        cfg
    }

    fn rule(s: &str) -> AllocationRule {
        s.parse().unwrap()
    }

    #[test]
    fn validation_catches_shapes() {
        let mut cfg = interfering(1);
        cfg.gamma.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = interfering(1);
        cfg.sigma_x = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = interfering(1);
        cfg.eps_pos = 0.3;
        assert!(cfg.validate().is_err());
        assert!(simulate(&cfg, 10).is_err());
    }

    #[test]
    fn zero_predictor_gives_half() {
        let cfg = SemConfig::null(3, 2, 5);
        let d = simulate(&cfg, 40_000).unwrap();
        for mean in d.observed_means() {
            assert!((mean - 0.5).abs() < 0.01, "{mean}");
        }
        for a in enumerate_valid_rules(3).unwrap() {
            for i in 0..3 {
                let om = counterfactual_oracle(&cfg, &a, i, 5000).unwrap();
                assert_eq!(om.mean, 0.5);
                assert_eq!(om.stderr, 0.0);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = interfering(42);
        let a = simulate(&cfg, 10).unwrap();
        let b = simulate(&cfg, 10).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = simulate(&interfering(43), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_is_stable_across_sizes() {
        let cfg = interfering(3);
        let small = simulate(&cfg, 5000).unwrap();
        let large = simulate(&cfg, 9000).unwrap();
        assert_eq!(small.pageviews(), &large.pageviews()[..5000]);
    }

    #[test]
    fn empty_simulation() {
        let d = simulate(&interfering(1), 0).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn equal_coefficients_remove_the_block_indicator() {
        let mut cfg = interfering(9);
        cfg.eta = cfg.gamma.clone();
        let (d, _) = simulate_traced(&cfg, 50).unwrap();
        let rules = enumerate_valid_rules(3).unwrap();
        for pv in d.pageviews() {
            for i in 0..3 {
                let base = cfg.observed_logit(&pv.x, &rules[0], i);
                for r in &rules[1..] {
                    assert!((cfg.observed_logit(&pv.x, r, i) - base).abs() < 1e-12);
                }
            }
        }
        let t = oracle_table(&cfg, 20_000).unwrap();
        for i in 0..3 {
            for r in 1..4 {
                assert!((t.means[r][i].mean - t.means[0][i].mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observed_clicks_follow_the_outcome_law() {
        let cfg = interfering(11);
        let (d, traces) = simulate_traced(&cfg, 500).unwrap();
        for (pv, tr) in d.pageviews().iter().zip(&traces) {
            for i in 0..3 {
                assert_eq!(cfg.click_probability(tr.u, &pv.x, &pv.a, i), tr.click_probs[i]);
            }
            let min_p = tr.rule_probs.iter().cloned().fold(1.0, f64::min);
            assert!(min_p >= cfg.eps_pos);
            assert!((tr.rule_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_halves_agree() {
        let cfg = interfering(17);
        let a = rule("100");
        let n = 8 * CHUNK;
        let targets = [(a, 0usize)];
        let first = oracle_moments(&cfg, &targets, 0..4, n).finish()[0];
        let second = oracle_moments(&cfg, &targets, 4..8, n).finish()[0];
        let tol = 4.0 * (first.stderr.powi(2) + second.stderr.powi(2)).sqrt();
        assert!((first.mean - second.mean).abs() <= tol);
    }

    #[test]
    fn table_matches_single_target_oracle() {
        let cfg = interfering(21);
        let t = oracle_table(&cfg, 10_000).unwrap();
        let single = counterfactual_oracle(&cfg, &rule("110"), 2, 10_000).unwrap();
        assert_eq!(t.get(&rule("110"), 2).unwrap(), single);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = OracleTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.means, t.means);
    }

    #[test]
    fn oracle_rejects_mismatched_rule() {
        let cfg = interfering(1);
        assert!(counterfactual_oracle(&cfg, &rule("10"), 0, 100).is_err());
        assert!(counterfactual_oracle(&cfg, &rule("100"), 3, 100).is_err());
    }

    #[test]
    fn stratified_means_match_oracle_without_latent_confounding() {
        // With no homophily, E_X[ E[Y | A=a, X] ] recovered through the exact
        // outcome law equals the intervention mean.
        let mut cfg = interfering(23);
        cfg.lambda_u = 0.0;
        let law = OracleOutcomeLaw::new(cfg.clone()).unwrap();
        let d = simulate(&cfg, 40_000).unwrap();
        let t = oracle_table(&cfg, 200_000).unwrap();
        for (r, a) in t.rules.iter().enumerate() {
            for i in 0..3 {
                let est: f64 = d.pageviews().iter().map(|pv| law.mean(&pv.x, a, i)).sum::<f64>() / d.len() as f64;
                assert!((est - t.means[r][i].mean).abs() < 0.01, "{a} {i}: {est}");
            }
        }
    }

    #[test]
    fn oracle_outcome_law_integrates_intent() {
        // Average of the exact regression over simulated pageviews with the
        // observed rule equals the average click probability.
        let cfg = interfering(29);
        let law = OracleOutcomeLaw::new(cfg.clone()).unwrap();
        let (d, traces) = simulate_traced(&cfg, 60_000).unwrap();
        let mut diff = 0.0;
        for (pv, tr) in d.pageviews().iter().zip(&traces) {
            diff += law.mean(&pv.x, &pv.a, 0) - tr.click_probs[0];
        }
        assert!((diff / d.len() as f64).abs() < 0.004);
    }

    #[test]
    fn marginals_sum_rule_probabilities() {
        let cfg = interfering(2);
        let d = simulate(&cfg, 3).unwrap();
        let x = &d.pageviews()[0].x;
        let probs = cfg.rule_probabilities(x);
        let marg = cfg.top_marginals(x);
        assert!((marg[0] - (probs[0] + probs[1] + probs[2])).abs() < 1e-15);
        assert!((marg[2] - probs[0]).abs() < 1e-15);
    }
}
