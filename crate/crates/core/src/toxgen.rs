//! Toxicity outcomes from cytokine peaks via a latent subject sensitivity,
//! true regimen toxicity probabilities, and threshold calibration.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optim::bisect;
use crate::pkpd::{max_peaks_for, sample_individual, IndividualParams, PopulationParams, SimSettings};
use crate::regimen::{DoseRegimen, RegimenPanel};
use crate::stats::norm_sf;

/// Ground truth of the toxicity mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToxicityGround {
    /// Cytokine threshold (pg/mL).
    pub tau_t: f64,
    /// SD of the log subject sensitivity.
    pub omega_alpha: f64,
}

impl ToxicityGround {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_t > 0.0) || !(self.omega_alpha >= 0.0 && self.omega_alpha.is_finite()) {
            return invalid(format!(
                "toxicity ground needs tau_t > 0 and omega_alpha >= 0 (got {}, {})",
                self.tau_t, self.omega_alpha
            ));
        }
        Ok(())
    }

    /// Probability that a patient with maximum peak `r_max` experiences toxicity.
    pub fn patient_prob(&self, r_max: f64) -> f64 {
        if r_max <= 0.0 {
            return 0.0;
        }
        let z = self.tau_t.ln() - r_max.ln();
        if self.omega_alpha == 0.0 {
            return if z <= 0.0 { 1.0 } else { 0.0 };
        }
        norm_sf(z / self.omega_alpha)
    }
}

/// Per-administration toxicity indicators of one patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToxicityOutcome {
    pub per_admin: Vec<bool>,
    /// 1-based index of the last administration received.
    pub stop_index: usize,
    pub global: bool,
}

impl ToxicityOutcome {
    /// Outcome when toxicity first occurs at `j` (1-based), or never (`None`),
    /// for a planned schedule of `n` administrations.
    pub fn new(n: usize, toxic_at: Option<usize>) -> Result<Self> {
        match toxic_at {
            Some(j) if j == 0 || j > n => invalid(format!("toxicity index {j} outside 1..={n}")),
            Some(j) => {
                let mut per_admin = vec![false; j];
                per_admin[j - 1] = true;
                Ok(Self {
                    per_admin,
                    stop_index: j,
                    global: true,
                })
            }
            None => Ok(Self {
                per_admin: vec![false; n],
                stop_index: n,
                global: false,
            }),
        }
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.per_admin.len();
        n == self.stop_index
            && n > 0
            && self.per_admin[..n - 1].iter().all(|y| !y)
            && self.global == self.per_admin[n - 1]
    }
}

/// Scans the peaks in order with a fixed subject sensitivity.
pub fn outcome_for_sensitivity(peaks: &[f64], alpha: f64, tau_t: f64) -> Result<ToxicityOutcome> {
    let toxic_at = peaks.iter().position(|&r| alpha * r >= tau_t).map(|j| j + 1);
    ToxicityOutcome::new(peaks.len(), toxic_at)
}

/// Draws a subject sensitivity `α = e^η` and applies the threshold rule.
pub fn simulate_toxicity<R: Rng + ?Sized>(
    peaks: &[f64],
    ground: &ToxicityGround,
    rng: &mut R,
) -> Result<ToxicityOutcome> {
    if peaks.is_empty() || peaks.iter().any(|r| !(*r >= 0.0)) {
        return invalid("peaks must be nonempty and nonnegative");
    }
    let z: f64 = rng.sample(StandardNormal);
    outcome_for_sensitivity(peaks, (ground.omega_alpha * z).exp(), ground.tau_t)
}

/// Mean patient toxicity probability over a sample of maximum peaks.
pub fn tox_prob_from_peaks(max_peaks: &[f64], ground: &ToxicityGround) -> f64 {
    max_peaks.iter().map(|&r| ground.patient_prob(r)).sum::<f64>() / max_peaks.len() as f64
}

/// Draws `n` individuals from the population (no residual error).
pub fn sample_population<R: Rng + ?Sized>(pop: &PopulationParams, n: usize, rng: &mut R) -> Vec<IndividualParams> {
    (0..n).map(|_| sample_individual(pop, rng)).collect()
}

/// Monte Carlo estimate of the true toxicity probability of a regimen.
pub fn true_tox_prob<R: Rng + ?Sized>(
    regimen: &DoseRegimen,
    pop: &PopulationParams,
    ground: &ToxicityGround,
    n_mc: usize,
    settings: &SimSettings,
    rng: &mut R,
) -> Result<f64> {
    if n_mc == 0 {
        return invalid("n_mc must be >= 1");
    }
    ground.validate()?;
    let thetas = sample_population(pop, n_mc, rng);
    let peaks = max_peaks_for(&thetas, regimen, settings)?;
    Ok(tox_prob_from_peaks(&peaks, ground))
}

/// Maximum-peak samples of every panel regimen for one shared set of draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakBank {
    pub max_peaks: Vec<Vec<f64>>,
}

impl PeakBank {
    pub fn simulate<R: Rng + ?Sized>(
        panel: &RegimenPanel,
        pop: &PopulationParams,
        n_mc: usize,
        settings: &SimSettings,
        rng: &mut R,
    ) -> Result<Self> {
        if n_mc == 0 {
            return invalid("n_mc must be >= 1");
        }
        let thetas = sample_population(pop, n_mc, rng);
        let max_peaks = panel
            .regimens()
            .iter()
            .map(|r| max_peaks_for(&thetas, r, settings))
            .collect::<Result<_>>()?;
        Ok(Self { max_peaks })
    }

    pub fn curve(&self, ground: &ToxicityGround) -> Vec<f64> {
        self.max_peaks.iter().map(|p| tox_prob_from_peaks(p, ground)).collect()
    }
}

/// Calibrated toxicity threshold with the resulting true toxicity curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ground: ToxicityGround,
    /// 1-based index of the targeted MTD-regimen.
    pub target_index: usize,
    pub delta_t: f64,
    pub true_curve: Vec<f64>,
}

/// 1-based argmin of `|p_k − δ|`, ties to the lower index.
pub fn closest_to_target(curve: &[f64], delta_t: f64) -> usize {
    let mut best = 0;
    for (k, p) in curve.iter().enumerate() {
        if (p - delta_t).abs() < (curve[best] - delta_t).abs() {
            best = k;
        }
    }
    best + 1
}

fn solve_tau(peaks: &[f64], omega_alpha: f64, delta_t: f64) -> Option<f64> {
    let positive: Vec<f64> = peaks.iter().copied().filter(|r| *r > 0.0).collect();
    if positive.is_empty() {
        return None;
    }
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min).ln() - 10.0 * omega_alpha - 1.0;
    let hi = positive.iter().copied().fold(0.0, f64::max).ln() + 10.0 * omega_alpha + 1.0;
    let f = |log_tau: f64| {
        tox_prob_from_peaks(
            peaks,
            &ToxicityGround {
                tau_t: log_tau.exp(),
                omega_alpha,
            },
        ) - delta_t
    };
    bisect(f, lo, hi, 1e-12, 200).map(f64::exp)
}

/// Finds the threshold placing the MTD-regimen at `target_index` (1-based).
pub fn calibrate_threshold_with_bank(
    bank: &PeakBank,
    omega_alpha: f64,
    target_index: usize,
    delta_t: f64,
) -> Result<Calibration> {
    let k_count = bank.max_peaks.len();
    if target_index == 0 || target_index > k_count {
        return invalid(format!("target index {target_index} outside 1..={k_count}"));
    }
    if !(delta_t > 0.0 && delta_t < 1.0) {
        return invalid(format!("delta_t must lie in (0, 1), got {delta_t}"));
    }
    if !(omega_alpha >= 0.0) {
        return invalid("omega_alpha must be >= 0");
    }
    let attempt = |k: usize| -> Option<Calibration> {
        let tau_t = solve_tau(&bank.max_peaks[k - 1], omega_alpha, delta_t)?;
        let ground = ToxicityGround { tau_t, omega_alpha };
        let true_curve = bank.curve(&ground);
        (closest_to_target(&true_curve, delta_t) == k).then_some(Calibration {
            ground,
            target_index: k,
            delta_t,
            true_curve,
        })
    };
    if let Some(c) = attempt(target_index) {
        return Ok(c);
    }
    let achievable = (1..=k_count).filter(|&k| attempt(k).is_some()).collect();
    Err(Error::CalibrationInfeasible {
        target: target_index,
        achievable,
    })
}

/// Simulates a peak bank and calibrates the threshold on it.
pub fn calibrate_threshold<R: Rng + ?Sized>(
    panel: &RegimenPanel,
    pop: &PopulationParams,
    omega_alpha: f64,
    target_index: usize,
    delta_t: f64,
    n_mc: usize,
    settings: &SimSettings,
    rng: &mut R,
) -> Result<Calibration> {
    let bank = PeakBank::simulate(panel, pop, n_mc, settings, rng)?;
    calibrate_threshold_with_bank(&bank, omega_alpha, target_index, delta_t)
}
