//! Bayesian quadratic regression by adaptive random-walk Metropolis.
//!
//! The model is `agb = b0 + b1*cover + b2*cover^2 + eps`, eps ~ N(0, sigma),
//! with flat priors on the coefficients and on log sigma. The sampler uses
//! joint Gaussian proposals whose covariance adapts during warmup only,
//! steered toward a 0.23-0.4 acceptance rate. Convergence is a contract:
//! split R-hat below 1.01 and effective sample size above 400 on every
//! parameter, or the fit fails loudly (after retries with longer chains).
//!
//! The Gaussian likelihood reduces to sufficient statistics (Gram matrix,
//! cross moments), so a log-posterior evaluation costs a handful of
//! multiplications regardless of the pair count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::{Error, Result};

pub const N_PARAMS: usize = 4; // b0, b1, b2, sigma

/// Post-warmup draws of (b0, b1, b2, sigma), chain-major.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub chains: usize,
    pub per_chain: usize,
    pub draws: Vec<[f64; 4]>,
}

impl PosteriorDraws {
    pub fn chain(&self, c: usize) -> &[[f64; 4]] {
        &self.draws[c * self.per_chain..(c + 1) * self.per_chain]
    }

    pub fn param_series(&self, c: usize, p: usize) -> Vec<f64> {
        self.chain(c).iter().map(|d| d[p]).collect()
    }

    pub fn flat(&self, p: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[p]).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub rhat: [f64; 4],
    pub ess: [f64; 4],
    pub accept_rate: Vec<f64>,
    pub iters: usize,
    pub warmup: usize,
    pub retries: usize,
    pub n_pairs_used: usize,
}

#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
pub struct RegressionConfig {
    /// Deterministic fraction of pairs used for fitting.
    pub subsample: f64,
    /// Pairs with cover above this are excluded (percent).
    pub max_cover: f64,
    pub chains: usize,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    pub max_retries: usize,
    /// Minimum pair count after filtering.
    pub min_pairs: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            subsample: 0.10,
            max_cover: 40.0,
            chains: 4,
            iters: 2000,
            warmup: 1000,
            seed: 0,
            max_retries: 2,
            min_pairs: 1000,
        }
    }
}

/// Sufficient statistics of the quadratic regression likelihood.
#[derive(Debug, Clone, Copy)]
pub struct QuadStats {
    pub n: f64,
    pub gram: [[f64; 3]; 3],
    pub xy: [f64; 3],
    pub yy: f64,
}

impl QuadStats {
    pub fn from_pairs(cover: &[f64], agb: &[f64]) -> Self {
        let mut gram = [[0.0f64; 3]; 3];
        let mut xy = [0.0f64; 3];
        let mut yy = 0.0f64;
        for (&c, &y) in cover.iter().zip(agb.iter()) {
            let row = [1.0, c, c * c];
            for i in 0..3 {
                for j in 0..3 {
                    gram[i][j] += row[i] * row[j];
                }
                xy[i] += row[i] * y;
            }
            yy += y * y;
        }
        Self {
            n: cover.len() as f64,
            gram,
            xy,
            yy,
        }
    }

    /// Residual sum of squares at the given coefficients.
    pub fn sse(&self, beta: &[f64; 3]) -> f64 {
        let mut bgb = 0.0;
        let mut bxy = 0.0;
        for i in 0..3 {
            bxy += beta[i] * self.xy[i];
            for j in 0..3 {
                bgb += beta[i] * self.gram[i][j] * beta[j];
            }
        }
        (self.yy - 2.0 * bxy + bgb).max(0.0)
    }

    /// Log posterior at (beta, log sigma) under flat priors on beta and on
    /// log sigma.
    pub fn log_posterior(&self, theta: &[f64; 4]) -> f64 {
        let beta = [theta[0], theta[1], theta[2]];
        let log_sigma = theta[3];
        let sigma2 = (2.0 * log_sigma).exp();
        -self.n * log_sigma - self.sse(&beta) / (2.0 * sigma2)
    }

    /// Ordinary least squares solution with residual standard deviation.
    pub fn ols(&self) -> Result<([f64; 3], f64)> {
        let beta = solve3(self.gram, self.xy)?;
        let dof = (self.n - 3.0).max(1.0);
        let sigma = (self.sse(&beta) / dof).sqrt().max(1e-9);
        Ok((beta, sigma))
    }
}

/// Solve a 3x3 linear system by Gaussian elimination with partial pivoting.
pub fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Result<[f64; 3]> {
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[piv][col].abs() < 1e-12 {
            return Err(Error::Numerical("singular design matrix".into()));
        }
        m.swap(col, piv);
        for row in 0..3 {
            if row == col {
                continue;
            }
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    Ok([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

/// Lower-triangular Cholesky factor of a 4x4 SPD matrix (with jitter).
fn cholesky4(a: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut l = [[0.0f64; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][j] = s.max(1e-18).sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    l
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct ChainResult {
    kept: Vec<[f64; 4]>, // (b0, b1, b2, log_sigma)
    accept_rate: f64,
}

fn run_chain(
    stats: &QuadStats,
    init: [f64; 4],
    init_scales: [f64; 4],
    iters: usize,
    warmup: usize,
    seed: u64,
) -> ChainResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = N_PARAMS as f64;
    let mut theta = init;
    let mut lp = stats.log_posterior(&theta);

    // Proposal covariance: starts diagonal, adapts to the empirical
    // covariance of warmup samples.
    let mut cov = [[0.0f64; 4]; 4];
    for i in 0..4 {
        cov[i][i] = init_scales[i] * init_scales[i];
    }
    let mut chol = cholesky4(&cov);
    let mut log_s = (2.38 / d.sqrt()).ln();

    let mut sum = [0.0f64; 4];
    let mut outer = [[0.0f64; 4]; 4];
    let mut n_hist = 0usize;

    let mut kept = Vec::with_capacity(iters - warmup);
    let mut accepted = 0usize;

    for it in 0..iters {
        let s = log_s.exp();
        let z: [f64; 4] = std::array::from_fn(|_| standard_normal(&mut rng));
        let mut prop = theta;
        for i in 0..4 {
            let mut dx = 0.0;
            for j in 0..=i {
                dx += chol[i][j] * z[j];
            }
            prop[i] += s * dx;
        }
        let lp_prop = stats.log_posterior(&prop);
        let alpha = (lp_prop - lp).exp().min(1.0);
        if rng.gen::<f64>() < alpha {
            theta = prop;
            lp = lp_prop;
            accepted += 1;
        }

        if it < warmup {
            // Robbins-Monro scale adaptation toward the 0.23-0.4 window.
            log_s += (it as f64 + 1.0).powf(-0.6) * (alpha - 0.3);
            for i in 0..4 {
                sum[i] += theta[i];
                for j in 0..4 {
                    outer[i][j] += theta[i] * theta[j];
                }
            }
            n_hist += 1;
            if n_hist >= 50 && it % 25 == 24 {
                let nf = n_hist as f64;
                let mut c = [[0.0f64; 4]; 4];
                for i in 0..4 {
                    for j in 0..4 {
                        c[i][j] = outer[i][j] / nf - (sum[i] / nf) * (sum[j] / nf);
                    }
                    c[i][i] += 1e-12;
                }
                cov = c;
                chol = cholesky4(&cov);
            }
        } else {
            kept.push(theta);
        }
    }
    ChainResult {
        kept,
        accept_rate: accepted as f64 / iters as f64,
    }
}

/// Fit the quadratic regression on (cover, agb) pairs.
///
/// Covers above `max_cover` are dropped, then a deterministic `subsample`
/// fraction is taken. The returned draws store sigma (not log sigma).
pub fn fit_regression(
    cover: &[f32],
    agb: &[f32],
    config: &RegressionConfig,
) -> Result<(PosteriorDraws, Diagnostics)> {
    let eligible: Vec<(f64, f64)> = cover
        .iter()
        .zip(agb.iter())
        .filter(|(c, _)| (**c as f64) <= config.max_cover)
        .map(|(c, y)| (*c as f64, *y as f64))
        .collect();
    if eligible.len() < config.min_pairs {
        return Err(Error::EmptyData(format!(
            "{} pairs after cover filtering, need at least {}",
            eligible.len(),
            config.min_pairs
        )));
    }
    let mut idx: Vec<usize> = (0..eligible.len()).collect();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    idx.shuffle(&mut rng);
    let keep = ((eligible.len() as f64 * config.subsample).ceil() as usize)
        .clamp(1, eligible.len());
    idx.truncate(keep);
    idx.sort_unstable();
    let cov_s: Vec<f64> = idx.iter().map(|&i| eligible[i].0).collect();
    let agb_s: Vec<f64> = idx.iter().map(|&i| eligible[i].1).collect();
    let stats = QuadStats::from_pairs(&cov_s, &agb_s);
    let draws = sample_posterior(&stats, config).map(|(d, mut diag)| {
        diag.n_pairs_used = keep;
        (d, diag)
    })?;
    Ok(draws)
}

/// Run the sampler on prepared sufficient statistics (used directly by
/// synthetic-recovery tests).
pub fn sample_posterior(
    stats: &QuadStats,
    config: &RegressionConfig,
) -> Result<(PosteriorDraws, Diagnostics)> {
    if config.chains < 2 {
        return Err(Error::Argument("need at least 2 chains".into()));
    }
    let (beta_hat, sigma_hat) = stats.ols()?;
    let init_scales = proposal_scales(stats, sigma_hat);

    let mut iters = config.iters;
    let mut warmup = config.warmup;
    for retry in 0..=config.max_retries {
        let results: Vec<ChainResult> = (0..config.chains)
            .into_par_iter()
            .map(|c| {
                let chain_seed = config
                    .seed
                    .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(c as u64 + 1))
                    .wrapping_add(retry as u64);
                let mut rng = ChaCha20Rng::seed_from_u64(chain_seed ^ 0xfeed);
                // Overdispersed starts around the OLS solution.
                let mut init = [
                    beta_hat[0],
                    beta_hat[1],
                    beta_hat[2],
                    sigma_hat.ln(),
                ];
                for (i, v) in init.iter_mut().enumerate() {
                    *v += 3.0 * init_scales[i] * standard_normal(&mut rng);
                }
                run_chain(stats, init, init_scales, iters, warmup, chain_seed)
            })
            .collect();

        let per_chain = iters - warmup;
        let mut rhat = [0.0f64; 4];
        let mut ess = [0.0f64; 4];
        for p in 0..4 {
            let series: Vec<Vec<f64>> = results
                .iter()
                .map(|r| r.kept.iter().map(|d| d[p]).collect())
                .collect();
            let refs: Vec<&[f64]> = series.iter().map(|v| v.as_slice()).collect();
            rhat[p] = split_rhat(&refs);
            ess[p] = effective_sample_size(&refs);
        }
        let converged = rhat.iter().all(|&r| r < 1.01) && ess.iter().all(|&e| e > 400.0);
        if converged {
            let mut draws = Vec::with_capacity(config.chains * per_chain);
            for r in &results {
                for d in &r.kept {
                    draws.push([d[0], d[1], d[2], d[3].exp()]);
                }
            }
            return Ok((
                PosteriorDraws {
                    chains: config.chains,
                    per_chain,
                    draws,
                },
                Diagnostics {
                    rhat,
                    ess,
                    accept_rate: results.iter().map(|r| r.accept_rate).collect(),
                    iters,
                    warmup,
                    retries: retry,
                    n_pairs_used: stats.n as usize,
                },
            ));
        }
        log::warn!(
            "retry {retry}: rhat {:?}, ess {:?}; doubling chain length",
            rhat,
            ess
        );
        iters *= 2;
        warmup *= 2;
    }
    Err(Error::Convergence(format!(
        "split R-hat or effective sample size failed after {} retries",
        config.max_retries
    )))
}

fn proposal_scales(stats: &QuadStats, sigma_hat: f64) -> [f64; 4] {
    // Rough per-coefficient standard errors from the Gram diagonal.
    let mut s = [0.0f64; 4];
    for i in 0..3 {
        s[i] = (sigma_hat / stats.gram[i][i].sqrt()).max(1e-8);
    }
    s[3] = (0.5 / stats.n.sqrt()).max(1e-4);
    s
}

/// Split R-hat: each chain is halved, and the potential scale reduction
/// factor compares between- and within-half variances.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let halves = split_halves(chains);
    if halves.is_empty() {
        return f64::INFINITY;
    }
    let n = halves[0].len() as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let grand = mean(&means);
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, &mu)| h.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let b = n / (m - 1.0) * means.iter().map(|&mu| (mu - grand) * (mu - grand)).sum::<f64>();
    if w <= 0.0 {
        return if b <= 0.0 { f64::INFINITY } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn split_halves(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut halves = Vec::new();
    for c in chains {
        let n = c.len() / 2;
        if n < 2 {
            return Vec::new();
        }
        halves.push(c[..n].to_vec());
        halves.push(c[c.len() - n..].to_vec());
    }
    halves
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Multi-chain effective sample size with Geyer's initial positive-pair
/// truncation on the combined autocorrelation.
pub fn effective_sample_size(chains: &[&[f64]]) -> f64 {
    let halves = split_halves(chains);
    if halves.is_empty() {
        return 0.0;
    }
    let m = halves.len();
    let n = halves[0].len();
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, &mu)| h.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n as f64 - 1.0))
        .collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    let grand = mean(&means);
    let b = if m > 1 {
        n as f64 / (m as f64 - 1.0)
            * means.iter().map(|&mu| (mu - grand) * (mu - grand)).sum::<f64>()
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    if var_plus <= 0.0 {
        return 0.0;
    }

    // Combined autocorrelation at each lag.
    let max_lag = n - 1;
    let mut rho = Vec::with_capacity(max_lag);
    for t in 1..max_lag {
        let mut acov = 0.0;
        for (h, &mu) in halves.iter().zip(&means) {
            let mut s = 0.0;
            for i in 0..n - t {
                s += (h[i] - mu) * (h[i + t] - mu);
            }
            acov += s / n as f64;
        }
        acov /= m as f64;
        rho.push(1.0 - (w - acov) / var_plus);
    }

    let mut tau = 1.0;
    let mut t = 0;
    let mut last_pair = f64::INFINITY;
    while t + 1 < rho.len() {
        let pair = rho[t] + rho[t + 1];
        if pair < 0.0 {
            break;
        }
        // Enforce monotone decrease of pair sums.
        let pair = pair.min(last_pair);
        tau += 2.0 * pair;
        last_pair = pair;
        t += 2;
    }
    (m * n) as f64 / tau
}

/// Shortest contiguous interval containing `mass` of the samples.
pub fn hdi(samples: &[f64], mass: f64) -> Result<(f64, f64)> {
    if samples.len() < 20 {
        return Err(Error::Argument(format!(
            "need at least 20 samples for an HDI, got {}",
            samples.len()
        )));
    }
    if !(0.0 < mass && mass <= 1.0) {
        return Err(Error::Argument(format!("mass {mass} out of (0,1]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let k = ((mass * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (sorted[0], sorted[k - 1]);
    let mut best_width = best.1 - best.0;
    for i in 1..=n - k {
        let width = sorted[i + k - 1] - sorted[i];
        if width < best_width {
            best_width = width;
            best = (sorted[i], sorted[i + k - 1]);
        }
    }
    Ok(best)
}
