//! PD-endpoint → toxicity models: a logistic model on the log peak ratio and
//! a hierarchical probit-type model with a latent per-patient threshold.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Cauchy, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mcmc::{self, Diagnostics, SamplerSettings};
use crate::optim::golden_section_min;
use crate::stats::{beta_moment_match, expit, ln_expit, logit, mean, norm_cdf, norm_interval, norm_sf, variance};
use crate::toxgen::ToxicityOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Logistic,
    Hierarchical,
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Logistic => "logistic",
            Model::Hierarchical => "hierarchical",
        }
    }

    pub fn param_names(&self) -> [&'static str; 2] {
        match self {
            Model::Logistic => ["beta0", "beta1"],
            Model::Hierarchical => ["mu_z", "tau_z"],
        }
    }
}

/// Prior of the logistic model: Normal intercept, Gamma slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticPrior {
    pub beta0_mean: f64,
    pub beta0_sd: f64,
    pub beta1_shape: f64,
    /// Prior mean of the slope; the Gamma rate is `shape / mean`.
    pub beta1_mean: f64,
    /// 1-based index of the reference regimen.
    pub ref_index: usize,
    pub ref_peak: f64,
}

impl LogisticPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0_sd > 0.0 && self.beta1_shape > 0.0 && self.beta1_mean > 0.0 && self.ref_peak > 0.0)
            || !self.beta0_mean.is_finite()
        {
            return invalid(format!("invalid logistic prior {self:?}"));
        }
        Ok(())
    }

    pub fn beta1_rate(&self) -> f64 {
        self.beta1_shape / self.beta1_mean
    }

    /// Log prior density on the sampler coordinates `(β0, log β1)`.
    fn log_density(&self, beta0: f64, log_beta1: f64) -> f64 {
        let z = (beta0 - self.beta0_mean) / self.beta0_sd;
        -0.5 * z * z + self.beta1_shape * log_beta1 - self.beta1_rate() * log_beta1.exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let b0 = Normal::new(self.beta0_mean, self.beta0_sd)
            .expect("validated prior")
            .sample(rng);
        let b1 = Gamma::new(self.beta1_shape, 1.0 / self.beta1_rate())
            .expect("validated prior")
            .sample(rng);
        [b0, b1]
    }
}

/// Prior of the hierarchical model: `μ_z ~ N(0, σ²)`, `τ_z ~ half-Cauchy(0, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalPrior {
    pub mu_z_sd: f64,
    pub tau_z_scale: f64,
    /// 1-based index of the regimen anchored at toxicity probability 0.5.
    pub ref_index: usize,
    pub ref_peak: f64,
}

impl HierarchicalPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_z_sd > 0.0 && self.tau_z_scale > 0.0 && self.ref_peak > 0.0) {
            return invalid(format!("invalid hierarchical prior {self:?}"));
        }
        Ok(())
    }

    /// Log prior density on the sampler coordinates `(μ_z, log τ_z)`.
    fn log_density(&self, mu_z: f64, log_tau: f64) -> f64 {
        let z = mu_z / self.mu_z_sd;
        let t = log_tau.exp() / self.tau_z_scale;
        -0.5 * z * z - (1.0 + t * t).ln() + log_tau
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let mu = Normal::new(0.0, self.mu_z_sd).expect("validated prior").sample(rng);
        let tau = Cauchy::new(0.0, self.tau_z_scale)
            .expect("validated prior")
            .sample(rng)
            .abs();
        [mu, tau]
    }
}

fn log_ratio(r_m: f64, ref_peak: f64) -> Result<f64> {
    if !(r_m > 0.0) || !(ref_peak > 0.0) {
        return invalid(format!("peaks must be positive (r = {r_m}, reference = {ref_peak})"));
    }
    Ok((r_m / ref_peak).ln())
}

/// `expit(β0 + β1·log(r/ref))`.
pub fn logistic_prob(params: [f64; 2], r_m: f64, ref_peak: f64) -> Result<f64> {
    Ok(expit(params[0] + params[1] * log_ratio(r_m, ref_peak)?))
}

/// `Φ((log(r/ref) − μ_z)/τ_z)`.
pub fn hierarchical_prob(params: [f64; 2], r_m: f64, ref_peak: f64) -> Result<f64> {
    let u = log_ratio(r_m, ref_peak)?;
    Ok(latent_cdf(params[0], params[1], u))
}

fn latent_cdf(mu: f64, tau: f64, u: f64) -> f64 {
    if tau > 0.0 {
        norm_cdf((u - mu) / tau)
    } else if u >= mu {
        1.0
    } else {
        0.0
    }
}

/// How the prior slope mean is derived from the initial guesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SlopeCalibration {
    /// Least squares over the reference regimen and its neighbors.
    Neighbors,
    /// Exact solve through one other regimen (1-based index).
    Single { index: usize },
}

/// Derives the logistic prior means from per-regimen prior guesses.
pub fn calibrate_logistic_prior(
    guesses: &[f64],
    ref_peaks: &[f64],
    ref_index: usize,
    delta_t: f64,
    beta0_sd: f64,
    beta1_shape: f64,
    mode: SlopeCalibration,
) -> Result<LogisticPrior> {
    let k_count = guesses.len();
    if k_count != ref_peaks.len() || k_count == 0 {
        return invalid("guesses and reference peaks must have equal nonzero length");
    }
    if ref_index == 0 || ref_index > k_count {
        return invalid(format!("reference index {ref_index} outside 1..={k_count}"));
    }
    if guesses.iter().any(|p| !(*p > 0.0 && *p < 1.0)) || ref_peaks.iter().any(|r| !(*r > 0.0)) {
        return invalid("guesses must lie in (0,1) and reference peaks must be positive");
    }
    if (guesses[ref_index - 1] - delta_t).abs() > 1e-9 {
        return invalid(format!(
            "the guess at the reference regimen ({}) must equal the target {delta_t}",
            guesses[ref_index - 1]
        ));
    }
    let beta0 = logit(delta_t);
    let ref_peak = ref_peaks[ref_index - 1];
    let beta1 = match mode {
        SlopeCalibration::Single { index } => {
            if index == 0 || index > k_count || index == ref_index {
                return invalid(format!(
                    "single-mode index {index} must differ from the reference index"
                ));
            }
            let lr = (ref_peaks[index - 1] / ref_peak).ln();
            if lr == 0.0 {
                return Err(Error::CalibrationDegenerate(format!(
                    "regimens {index} and {ref_index} share the same reference peak"
                )));
            }
            (logit(guesses[index - 1]) - beta0) / lr
        }
        SlopeCalibration::Neighbors => {
            let lo = ref_index.saturating_sub(1).max(1);
            let hi = (ref_index + 1).min(k_count);
            if lo == ref_index || hi == ref_index {
                log::warn!("reference regimen {ref_index} is at the panel boundary; using available neighbors");
            }
            let terms: Vec<(f64, f64)> = (lo..=hi)
                .filter(|&k| k != ref_index)
                .map(|k| (guesses[k - 1], (ref_peaks[k - 1] / ref_peak).ln()))
                .collect();
            if terms.is_empty() {
                return Err(Error::CalibrationDegenerate("no neighbor regimen available".into()));
            }
            if terms.iter().any(|(_, lr)| *lr == 0.0) {
                return Err(Error::CalibrationDegenerate(
                    "a neighbor shares the reference regimen's peak".into(),
                ));
            }
            neighbor_slope(beta0, &terms)
        }
    };
    if !(beta1 > 0.0 && beta1.is_finite()) {
        return Err(Error::CalibrationDegenerate(format!(
            "calibrated slope {beta1} is not positive"
        )));
    }
    Ok(LogisticPrior {
        beta0_mean: beta0,
        beta0_sd,
        beta1_shape,
        beta1_mean: beta1,
        ref_index,
        ref_peak,
    })
}

fn neighbor_slope(beta0: f64, terms: &[(f64, f64)]) -> f64 {
    let sse = |b1: f64| {
        terms
            .iter()
            .map(|(p, lr)| (p - expit(beta0 + b1 * lr)).powi(2))
            .sum::<f64>()
    };
    // coarse log-spaced scan, then golden-section refinement around the best node
    let nodes: Vec<f64> = (0..=400).map(|i| 10f64.powf(-4.0 + 7.0 * i as f64 / 400.0)).collect();
    let (best, _) = nodes
        .iter()
        .enumerate()
        .map(|(i, &b)| (i, sse(b)))
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let lo = if best == 0 { 0.0 } else { nodes[best - 1] };
    let hi = nodes[(best + 1).min(nodes.len() - 1)];
    golden_section_min(sse, lo, hi, 1e-13).0
}

/// One patient's data for the logistic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticDatum {
    pub toxic: bool,
    pub peak: f64,
}

/// One patient's data for the hierarchical model: peaks on the received regimen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalDatum {
    pub peaks: Vec<f64>,
    pub outcome: ToxicityOutcome,
}

/// Posterior draws on the natural scale with sampler diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub model: Model,
    pub params: Vec<[f64; 2]>,
    pub chains: usize,
    pub ref_peak: f64,
    pub diagnostics: Diagnostics,
}

impl PosteriorDraws {
    /// Toxicity probability of draw `m` at a log peak ratio.
    #[inline]
    pub fn prob_at_log_ratio(&self, m: usize, u: f64) -> f64 {
        let [a, b] = self.params[m];
        match self.model {
            Model::Logistic => expit(a + b * u),
            Model::Hierarchical => latent_cdf(a, b, u),
        }
    }

    /// Posterior mean toxicity probability at a given peak.
    pub fn mean_prob(&self, r_m: f64) -> Result<f64> {
        let u = log_ratio(r_m, self.ref_peak)?;
        Ok((0..self.params.len())
            .map(|m| self.prob_at_log_ratio(m, u))
            .sum::<f64>()
            / self.params.len() as f64)
    }

    /// One row per draw: `draw,chain,<param1>,<param2>`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let [p1, p2] = self.model.param_names();
        wr.write_record(["draw", "chain", p1, p2])?;
        let per_chain = self.params.len() / self.chains.max(1);
        for (i, p) in self.params.iter().enumerate() {
            wr.write_record([
                i.to_string(),
                (i / per_chain.max(1)).to_string(),
                p[0].to_string(),
                p[1].to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Log-likelihood of the logistic model at `(β0, β1)`.
pub fn logistic_loglik(params: [f64; 2], data: &[LogisticDatum], ref_peak: f64) -> Result<f64> {
    let mut ll = 0.0;
    for d in data {
        let eta = params[0] + params[1] * log_ratio(d.peak, ref_peak)?;
        ll += if d.toxic { ln_expit(eta) } else { ln_expit(-eta) };
    }
    Ok(ll)
}

pub fn logistic_posterior(
    data: &[LogisticDatum],
    prior: &LogisticPrior,
    settings: &SamplerSettings,
    seed: u64,
) -> Result<PosteriorDraws> {
    prior.validate()?;
    let lr: Vec<(bool, f64)> = data
        .iter()
        .map(|d| Ok((d.toxic, log_ratio(d.peak, prior.ref_peak)?)))
        .collect::<Result<_>>()?;
    let target = |x: &[f64; 2]| {
        let b1 = x[1].exp();
        let ll: f64 = lr
            .iter()
            .map(|&(y, u)| {
                let eta = x[0] + b1 * u;
                if y {
                    ln_expit(eta)
                } else {
                    ln_expit(-eta)
                }
            })
            .sum();
        prior.log_density(x[0], x[1]) + ll
    };
    let init = [prior.beta0_mean, prior.beta1_mean.ln()];
    let scale = [prior.beta0_sd.min(1.0), (1.0 / prior.beta1_shape).sqrt().min(1.0)];
    let s = mcmc::sample("logistic-DRtox", target, init, scale, settings, seed)?;
    Ok(PosteriorDraws {
        model: Model::Logistic,
        params: s.draws.iter().map(|x| [x[0], x[1].exp()]).collect(),
        chains: s.chains,
        ref_peak: prior.ref_peak,
        diagnostics: s.diagnostics,
    })
}

/// Marginal log-likelihood of one patient with the latent threshold
/// integrated out. Toxicity at administration `j` has probability
/// `F(u_j) − F(max_{l<j} u_l)`; no toxicity has probability `1 − F(max_l u_l)`.
pub fn hierarchical_patient_loglik(
    params: [f64; 2],
    peaks: &[f64],
    outcome: &ToxicityOutcome,
    ref_peak: f64,
) -> Result<f64> {
    if peaks.is_empty() || peaks.len() != outcome.stop_index {
        return invalid(format!(
            "peak vector length {} does not match the received administrations {}",
            peaks.len(),
            outcome.stop_index
        ));
    }
    let u: Vec<f64> = peaks.iter().map(|&r| log_ratio(r, ref_peak)).collect::<Result<_>>()?;
    patient_loglik_from_ratios(params, &u, outcome.global)
}

fn patient_loglik_from_ratios(params: [f64; 2], u: &[f64], toxic: bool) -> Result<f64> {
    let [mu, tau] = params;
    if !(tau > 0.0) {
        return invalid("tau_z must be positive");
    }
    let n = u.len();
    let prior_max = u[..n - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if toxic {
        let hi = u[n - 1];
        if hi <= prior_max {
            return Err(Error::ModelInconsistency { patients: vec![] });
        }
        Ok(norm_interval((prior_max - mu) / tau, (hi - mu) / tau).ln())
    } else {
        Ok(norm_sf((prior_max.max(u[n - 1]) - mu) / tau).ln())
    }
}

/// Whether the hierarchical likelihood is defined for this patient.
pub fn hierarchical_consistent(d: &HierarchicalDatum) -> bool {
    if !d.outcome.global {
        return true;
    }
    let n = d.peaks.len();
    n > 0 && d.peaks[..n - 1].iter().all(|&r| r < d.peaks[n - 1])
}

pub fn hierarchical_posterior(
    data: &[HierarchicalDatum],
    prior: &HierarchicalPrior,
    settings: &SamplerSettings,
    seed: u64,
) -> Result<PosteriorDraws> {
    prior.validate()?;
    let bad: Vec<usize> = data
        .iter()
        .enumerate()
        .filter(|(_, d)| !hierarchical_consistent(d))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::ModelInconsistency { patients: bad });
    }
    // Each patient reduces to an interval (lo, hi] for the latent threshold.
    let mut intervals = Vec::with_capacity(data.len());
    for d in data {
        if d.peaks.len() != d.outcome.stop_index || d.peaks.is_empty() {
            return invalid("peak vector length does not match the received administrations");
        }
        let u: Vec<f64> = d
            .peaks
            .iter()
            .map(|&r| log_ratio(r, prior.ref_peak))
            .collect::<Result<_>>()?;
        let n = u.len();
        let prior_max = u[..n - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        intervals.push(if d.outcome.global {
            (prior_max, u[n - 1])
        } else {
            (prior_max.max(u[n - 1]), f64::INFINITY)
        });
    }
    let target = |x: &[f64; 2]| {
        let (mu, tau) = (x[0], x[1].exp());
        let ll: f64 = intervals
            .iter()
            .map(|&(lo, hi)| {
                if hi == f64::INFINITY {
                    norm_sf((lo - mu) / tau).ln()
                } else {
                    norm_interval((lo - mu) / tau, (hi - mu) / tau).ln()
                }
            })
            .sum();
        prior.log_density(x[0], x[1]) + ll
    };
    let init = [0.0, prior.tau_z_scale.ln()];
    let scale = [prior.mu_z_sd.min(1.0), 1.0];
    let s = mcmc::sample("hierarchical-DRtox", target, init, scale, settings, seed)?;
    Ok(PosteriorDraws {
        model: Model::Hierarchical,
        params: s.draws.iter().map(|x| [x[0], x[1].exp()]).collect(),
        chains: s.chains,
        ref_peak: prior.ref_peak,
        diagnostics: s.diagnostics,
    })
}

/// Either prior, for operations shared by both models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum DrtoxPrior {
    Logistic(LogisticPrior),
    Hierarchical(HierarchicalPrior),
}

impl DrtoxPrior {
    fn sample_prob<R: Rng + ?Sized>(&self, u: f64, rng: &mut R) -> f64 {
        match self {
            DrtoxPrior::Logistic(p) => {
                let [a, b] = p.sample(rng);
                expit(a + b * u)
            }
            DrtoxPrior::Hierarchical(p) => {
                let [m, t] = p.sample(rng);
                latent_cdf(m, t, u)
            }
        }
    }

    fn ref_peak(&self) -> f64 {
        match self {
            DrtoxPrior::Logistic(p) => p.ref_peak,
            DrtoxPrior::Hierarchical(p) => p.ref_peak,
        }
    }
}

/// Per-regimen and mean prior effective sample sizes by beta moment matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    /// `None` where moment matching is infeasible.
    pub per_regimen: Vec<Option<f64>>,
    pub mean: f64,
}

/// `a + b` of the beta distribution matching the sample's mean and variance.
/// Variances that are zero up to rounding are treated as a point mass.
pub fn ess_from_probabilities(probs: &[f64]) -> Option<f64> {
    let (m, v) = (mean(probs), variance(probs));
    if v <= 1e-12 * m * (1.0 - m) {
        return None;
    }
    beta_moment_match(m, v).map(|(a, b)| a + b)
}

pub fn ess_approx<R: Rng + ?Sized>(
    prior: &DrtoxPrior,
    ref_peaks: &[f64],
    n_prior_draws: usize,
    rng: &mut R,
) -> Result<EssReport> {
    if ref_peaks.is_empty() || n_prior_draws < 2 {
        return invalid("ess_approx needs reference peaks and at least 2 prior draws");
    }
    let mut per_regimen = Vec::with_capacity(ref_peaks.len());
    for (k, &r) in ref_peaks.iter().enumerate() {
        let u = log_ratio(r, prior.ref_peak())?;
        let probs: Vec<f64> = (0..n_prior_draws).map(|_| prior.sample_prob(u, rng)).collect();
        let ess = ess_from_probabilities(&probs);
        if ess.is_none() {
            log::warn!("beta moment matching infeasible at regimen {}", k + 1);
        }
        per_regimen.push(ess);
    }
    let ok: Vec<f64> = per_regimen.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(Error::EssInfeasible);
    }
    Ok(EssReport {
        mean: mean(&ok),
        per_regimen,
    })
}

/// Log-density of the half-Cauchy prior on τ (for external checks).
pub fn half_cauchy_ln_pdf(tau: f64, scale: f64) -> f64 {
    if tau < 0.0 {
        return f64::NEG_INFINITY;
    }
    (2.0 / (PI * scale)).ln() - (1.0 + (tau / scale).powi(2)).ln()
}
