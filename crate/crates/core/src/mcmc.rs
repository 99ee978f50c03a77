//! Adaptive random-walk Metropolis for low-dimensional posteriors, with
//! split-R̂ and effective-sample-size diagnostics.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub chains: usize,
    /// Post-warmup draws kept in total, across chains.
    pub draws: usize,
    pub target_accept: f64,
    pub max_rhat: f64,
    /// Iterations per kept draw (warmup is as long as the kept segment).
    pub thin: usize,
    /// Reruns with doubled chain length (thinned back to `draws`) when R̂ fails.
    pub retries: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            chains: 4,
            draws: 4000,
            target_accept: 0.3,
            max_rhat: 1.05,
            thin: 4,
            retries: 1,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return invalid("thin must be at least 1");
        }
        if self.chains < 2 {
            return invalid("at least 2 chains are needed for split-Rhat");
        }
        if self.draws < 4 * self.chains || !self.draws.is_multiple_of(self.chains) {
            return invalid(format!(
                "draws ({}) must be a multiple of chains ({}) with at least 4 per chain",
                self.draws, self.chains
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) || !(self.max_rhat > 1.0) {
            return invalid("target_accept must be in (0,1) and max_rhat > 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    /// Post-warmup acceptance rate of each chain.
    pub acceptance: Vec<f64>,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Post-warmup draws (chain-major order) on the sampler's coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples<const N: usize> {
    pub draws: Vec<[f64; N]>,
    pub chains: usize,
    pub diagnostics: Diagnostics,
}

/// Lower Cholesky factor of a small covariance matrix, with a ridge fallback.
fn cholesky<const N: usize>(cov: &[[f64; N]; N]) -> [[f64; N]; N] {
    let mut ridge = 0.0;
    loop {
        let mut l = [[0.0; N]; N];
        let mut ok = true;
        'outer: for i in 0..N {
            for j in 0..=i {
                let mut s = cov[i][j] + if i == j { ridge } else { 0.0 };
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    if !(s > 0.0) {
                        ok = false;
                        break 'outer;
                    }
                    l[i][i] = s.sqrt();
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        if ok {
            return l;
        }
        let diag_max = (0..N).map(|i| cov[i][i].abs()).fold(1e-12, f64::max);
        ridge = if ridge == 0.0 { 1e-10 * diag_max } else { ridge * 10.0 };
    }
}

fn empirical_cov<const N: usize>(xs: &[[f64; N]]) -> [[f64; N]; N] {
    let n = xs.len() as f64;
    let mut m = [0.0; N];
    for x in xs {
        for i in 0..N {
            m[i] += x[i] / n;
        }
    }
    let mut c = [[0.0; N]; N];
    for x in xs {
        for i in 0..N {
            for j in 0..N {
                c[i][j] += (x[i] - m[i]) * (x[j] - m[j]) / (n - 1.0);
            }
        }
    }
    c
}

struct ChainRun<const N: usize> {
    draws: Vec<[f64; N]>,
    acceptance: f64,
}

fn run_chain<const N: usize, F>(
    log_density: &F,
    start: [f64; N],
    scale: [f64; N],
    warmup: usize,
    kept: usize,
    thin: usize,
    target: f64,
    rng: &mut impl Rng,
) -> Result<ChainRun<N>>
where
    F: Fn(&[f64; N]) -> f64,
{
    let mut x = start;
    let mut lp = log_density(&x);
    if !lp.is_finite() {
        return invalid(format!("log density is not finite at the chain start {start:?}"));
    }
    let mut cov = [[0.0; N]; N];
    for i in 0..N {
        cov[i][i] = scale[i] * scale[i];
    }
    let mut chol = cholesky(&cov);
    let mut log_step = 0.0f64;
    let mut history = Vec::with_capacity(warmup);
    let mut accepted = 0usize;
    let total = warmup + kept * thin;
    let mut draws = Vec::with_capacity(kept);
    let switch = warmup / 2;

    for it in 0..total {
        let z: [f64; N] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let step = log_step.exp();
        let mut prop = x;
        for i in 0..N {
            prop[i] += step * (0..=i).map(|k| chol[i][k] * z[k]).sum::<f64>();
        }
        let lp_prop = log_density(&prop);
        let log_u: f64 = rng.random::<f64>().ln();
        let accept_prob = if lp_prop.is_finite() {
            (lp_prop - lp).min(0.0).exp()
        } else {
            0.0
        };
        if lp_prop.is_finite() && log_u < lp_prop - lp {
            x = prop;
            lp = lp_prop;
            if it >= warmup {
                accepted += 1;
            }
        }
        if it < warmup {
            // Robbins–Monro adaptation of the global step size
            let gain = 1.0 / ((it % switch.max(1)) as f64 + 1.0).powf(0.6);
            log_step += gain * (accept_prob - target);
            history.push(x);
            if it + 1 == switch && switch >= 20 * N {
                let c = empirical_cov(&history[switch / 2..]);
                let d = N as f64;
                let mut scaled = c;
                for row in scaled.iter_mut() {
                    for v in row.iter_mut() {
                        *v *= 2.38 * 2.38 / d;
                    }
                }
                if scaled.iter().flatten().all(|v| v.is_finite()) && (0..N).all(|i| scaled[i][i] > 0.0) {
                    chol = cholesky(&scaled);
                    log_step = 0.0;
                }
            }
        } else if (it - warmup) % thin == thin - 1 {
            draws.push(x);
        }
    }
    Ok(ChainRun {
        draws,
        acceptance: accepted as f64 / (kept * thin) as f64,
    })
}

/// Potential scale reduction on split chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.iter().map(|c| c.len() / 2).min().unwrap_or(0);
    if half < 2 {
        return f64::NAN;
    }
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        parts.push(&c[..half]);
        parts.push(&c[c.len() - half..]);
    }
    let n = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let b = n * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    let w = parts
        .iter()
        .zip(&means)
        .map(|(p, m)| p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / means.len() as f64;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let acov = |c: usize, lag: usize| -> f64 {
        let x = &chains[c][..n];
        let mu = means[c];
        (0..n - lag).map(|t| (x[t] - mu) * (x[t + lag] - mu)).sum::<f64>() / n as f64
    };
    let w = (0..m).map(|c| acov(c, 0) * n as f64 / (n - 1) as f64).sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = if m > 1 {
        means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let var_plus = (n - 1) as f64 / n as f64 * w + b_over_n;
    if !(var_plus > 0.0) {
        return (m * n) as f64;
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = (0..m).map(|c| acov(c, lag)).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = tau.max(1.0 / ((m * n) as f64).log10());
    (m * n) as f64 / tau
}

fn diagnose<const N: usize>(per_chain: &[Vec<[f64; N]>], acceptance: Vec<f64>) -> Diagnostics {
    let coord = |i: usize| -> Vec<Vec<f64>> { per_chain.iter().map(|c| c.iter().map(|x| x[i]).collect()).collect() };
    let rhat = (0..N).map(|i| split_rhat(&coord(i))).collect();
    let ess = (0..N).map(|i| effective_sample_size(&coord(i))).collect();
    Diagnostics { rhat, ess, acceptance }
}

/// Runs `settings.chains` adaptive chains from `init` (jittered by `scale`)
/// and returns the pooled post-warmup draws. Warmup per chain equals the
/// number of kept draws per chain. Chain `c` of attempt `a` uses the RNG
/// substream `(seed, a, c)`.
pub fn sample<const N: usize, F>(
    sampler: &str,
    log_density: F,
    init: [f64; N],
    scale: [f64; N],
    settings: &SamplerSettings,
    seed: u64,
) -> Result<Samples<N>>
where
    F: Fn(&[f64; N]) -> f64 + Sync,
{
    settings.validate()?;
    if scale.iter().any(|s| !(*s > 0.0)) {
        return invalid("proposal scales must be positive");
    }
    let per_chain = settings.draws / settings.chains;
    let mut last_err = None;
    for attempt in 0..=settings.retries {
        let thin = settings.thin << attempt;
        let runs: Vec<Result<ChainRun<N>>> = (0..settings.chains)
            .into_par_iter()
            .map(|c| {
                let mut rng = substream(seed, &[attempt as u64, c as u64]);
                // overdispersed start around the initial point
                let mut start = init;
                for _ in 0..20 {
                    let cand: [f64; N] =
                        std::array::from_fn(|i| init[i] + scale[i] * rng.sample::<f64, _>(StandardNormal));
                    if log_density(&cand).is_finite() {
                        start = cand;
                        break;
                    }
                }
                run_chain(
                    &log_density,
                    start,
                    scale,
                    per_chain * thin,
                    per_chain,
                    thin,
                    settings.target_accept,
                    &mut rng,
                )
            })
            .collect();
        let runs: Vec<ChainRun<N>> = runs.into_iter().collect::<Result<_>>()?;
        let acceptance = runs.iter().map(|r| r.acceptance).collect();
        let per: Vec<Vec<[f64; N]>> = runs.into_iter().map(|r| r.draws).collect();
        let diagnostics = diagnose(&per, acceptance);
        let max_rhat = diagnostics.max_rhat();
        if max_rhat.is_finite() && max_rhat <= settings.max_rhat {
            return Ok(Samples {
                draws: per.concat(),
                chains: settings.chains,
                diagnostics,
            });
        }
        last_err = Some(Error::Diagnostics {
            sampler: sampler.to_string(),
            max_rhat,
            min_ess: diagnostics.min_ess(),
            acceptance: diagnostics.acceptance.clone(),
        });
    }
    Err(last_err.expect("at least one attempt runs"))
}
