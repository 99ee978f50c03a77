//! Two-parameter logistic continual reassessment method.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{invalid, Result};
use crate::mcmc::{self, Diagnostics, SamplerSettings};
use crate::optim::bisect;
use crate::stats::{expit, ln_expit, norm_ppf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrmConfig {
    pub skeleton: Vec<f64>,
    pub target: f64,
    pub cohort_size: usize,
    pub n_max: usize,
    pub intercept_mean: f64,
    pub intercept_sd: f64,
    pub slope_shape: f64,
    pub slope_rate: f64,
}

impl Default for CrmConfig {
    fn default() -> Self {
        Self {
            skeleton: vec![0.06, 0.12, 0.20, 0.30, 0.40, 0.50],
            target: 0.3,
            cohort_size: 3,
            n_max: 30,
            intercept_mean: 0.0,
            intercept_sd: 2.0,
            slope_shape: 5.0,
            slope_rate: 5.0,
        }
    }
}

impl CrmConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.skeleton;
        if s.is_empty() || s.iter().any(|p| !(*p > 0.0 && *p < 1.0)) || s.windows(2).any(|w| w[1] <= w[0]) {
            return invalid(format!("skeleton must be strictly increasing in (0,1): {s:?}"));
        }
        if !(self.target > 0.0 && self.target < 1.0) {
            return invalid("CRM target must lie in (0,1)");
        }
        if self.cohort_size == 0 || self.n_max == 0 || !self.n_max.is_multiple_of(self.cohort_size) {
            return invalid("n_max must be a positive multiple of a positive cohort size");
        }
        if !(self.intercept_sd > 0.0 && self.slope_shape > 0.0 && self.slope_rate > 0.0) {
            return invalid("CRM prior scales must be positive");
        }
        Ok(())
    }

    /// Quadrature nodes for the prior: midpoint quantiles of each marginal.
    fn prior_nodes(&self) -> (Vec<f64>, Vec<f64>) {
        const NA: usize = 400;
        const NB: usize = 200;
        let a = (0..NA)
            .map(|i| self.intercept_mean + self.intercept_sd * norm_ppf((i as f64 + 0.5) / NA as f64))
            .collect();
        let gamma = Gamma::new(self.slope_shape, self.slope_rate).expect("validated config");
        let b = (0..NB)
            .map(|i| gamma.inverse_cdf((i as f64 + 0.5) / NB as f64))
            .collect();
        (a, b)
    }

    /// Standardized dose labels `x_k` such that the prior mean of
    /// `expit(a + b·x_k)` equals the skeleton value.
    pub fn dose_labels(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let (a_nodes, b_nodes) = self.prior_nodes();
        let prior_mean = |x: f64| {
            let mut s = 0.0;
            for &b in &b_nodes {
                for &a in &a_nodes {
                    s += expit(a + b * x);
                }
            }
            s / (a_nodes.len() * b_nodes.len()) as f64
        };
        self.skeleton
            .iter()
            .map(|&p| {
                bisect(|x| prior_mean(x) - p, -200.0, 200.0, 1e-10, 200).ok_or_else(|| {
                    crate::Error::InvalidArgument(format!("skeleton value {p} unreachable under the prior"))
                })
            })
            .collect()
    }
}

/// Posterior summary of the CRM model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrmPosterior {
    /// Posterior mean toxicity probability per regimen.
    pub means: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Samples the CRM posterior given `(regimen index, toxic)` pairs (1-based).
pub fn crm_posterior(
    data: &[(usize, bool)],
    config: &CrmConfig,
    labels: &[f64],
    settings: &SamplerSettings,
    seed: u64,
) -> Result<CrmPosterior> {
    if labels.len() != config.skeleton.len() {
        return invalid("dose labels do not match the skeleton");
    }
    if let Some(&(k, _)) = data.iter().find(|(k, _)| *k == 0 || *k > labels.len()) {
        return invalid(format!("regimen index {k} outside the panel"));
    }
    let target = |x: &[f64; 2]| {
        let (a, log_b) = (x[0], x[1]);
        let b = log_b.exp();
        let z = (a - config.intercept_mean) / config.intercept_sd;
        let prior = -0.5 * z * z + config.slope_shape * log_b - config.slope_rate * b;
        let ll: f64 = data
            .iter()
            .map(|&(k, y)| {
                let eta = a + b * labels[k - 1];
                if y {
                    ln_expit(eta)
                } else {
                    ln_expit(-eta)
                }
            })
            .sum();
        prior + ll
    };
    let init = [config.intercept_mean, (config.slope_shape / config.slope_rate).ln()];
    let s = mcmc::sample("CRM", target, init, [1.0, 0.5], settings, seed)?;
    let n = s.draws.len() as f64;
    let means = labels
        .iter()
        .map(|&x| s.draws.iter().map(|d| expit(d[0] + d[1].exp() * x)).sum::<f64>() / n)
        .collect();
    Ok(CrmPosterior {
        means,
        diagnostics: s.diagnostics,
    })
}

/// 1-based argmin of `|p_k − target|` over `candidates`, ties to the lower index.
pub fn closest_among(means: &[f64], target: f64, candidates: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for k in candidates {
        let d = (means[k - 1] - target).abs();
        match best {
            Some(b) if (means[b - 1] - target).abs() <= d => {}
            _ => best = Some(k),
        }
    }
    best
}

/// Next regimen without skipping: at most one level above the highest tried.
pub fn crm_next(means: &[f64], target: f64, highest_tried: usize) -> usize {
    let cap = (highest_tried + 1).min(means.len()).max(1);
    closest_among(means, target, 1..=cap).expect("nonempty candidate range")
}
