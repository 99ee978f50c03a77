//! Posterior toxicity of regimens: posterior parameter draws combined with
//! peak distributions of new patients simulated from the *fitted*
//! population, MTD-regimen selection, and prediction for untested regimens.
//!
//! The peak distributions come from `(μ̂, Ω̂)`, never from the simulation
//! truth, so estimation error in the PK/PD fit propagates to every curve.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drtox::PosteriorDraws;
use crate::error::{invalid, Result};
use crate::nlme::NlmeFit;
use crate::pkpd::{max_peaks_for, sample_around, IndividualParams, PopulationParams, SimSettings};
use crate::regimen::{DoseRegimen, RegimenPanel};
use crate::rng::{purpose, substream};
use crate::stats::quantile_in_place;

/// Posterior toxicity probability of one regimen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorToxicity {
    pub regimen_label: String,
    /// One probability per (parameter draw, simulated peak) pair.
    pub draws: Vec<f64>,
    pub mean: f64,
    /// 2.5% and 97.5% quantiles of `draws`.
    pub credible_interval: (f64, f64),
}

/// Summary of a [`PosteriorToxicity`] without the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToxicityEstimate {
    pub label: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl PosteriorToxicity {
    pub fn estimate(&self) -> ToxicityEstimate {
        ToxicityEstimate {
            label: self.regimen_label.clone(),
            mean: self.mean,
            lower: self.credible_interval.0,
            upper: self.credible_interval.1,
        }
    }
}

/// New-patient parameter draws from the fitted population.
///
/// The draws depend only on `seed`, so every regimen evaluated with the same
/// seed sees the same patients.
pub fn new_patients(pop: &PopulationParams, m_predict: usize, seed: u64) -> Vec<IndividualParams> {
    let mut rng = substream(seed, &[purpose::PREDICT]);
    (0..m_predict)
        .map(|_| sample_around(&pop.mu, &pop.omega, &mut rng))
        .collect()
}

/// Maximum cytokine peaks of `m_predict` new patients on the full regimen.
pub fn predict_peak_distribution(
    fit: &NlmeFit,
    regimen: &DoseRegimen,
    m_predict: usize,
    sim: &SimSettings,
    seed: u64,
) -> Result<Vec<f64>> {
    if m_predict == 0 {
        return invalid("m_predict must be at least 1");
    }
    let patients = new_patients(&fit.population(), m_predict, seed);
    max_peaks_for(&patients, regimen, sim)
}

/// Peak samples for every panel regimen from one shared set of new patients.
pub fn panel_peak_samples(
    fit: &NlmeFit,
    panel: &RegimenPanel,
    m_predict: usize,
    sim: &SimSettings,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if m_predict == 0 {
        return invalid("m_predict must be at least 1");
    }
    let patients = new_patients(&fit.population(), m_predict, seed);
    panel
        .regimens()
        .iter()
        .map(|r| max_peaks_for(&patients, r, sim))
        .collect()
}

/// Evaluates the toxicity model on every (draw, peak) pair.
pub fn posterior_toxicity(draws: &PosteriorDraws, peaks: &[f64], label: &str) -> Result<PosteriorToxicity> {
    if draws.params.is_empty() {
        return invalid("no posterior draws");
    }
    if peaks.is_empty() || peaks.iter().any(|r| !(*r > 0.0)) {
        return invalid(format!("peak samples for {label} must be nonempty and positive"));
    }
    if !(draws.ref_peak > 0.0) {
        return invalid("reference peak must be positive");
    }
    let u: Vec<f64> = peaks.iter().map(|r| (r / draws.ref_peak).ln()).collect();
    let probs: Vec<f64> = (0..draws.params.len())
        .into_par_iter()
        .flat_map_iter(|m| u.iter().map(move |&x| draws.prob_at_log_ratio(m, x)))
        .collect();
    // collected in draw-major order, so the sum does not depend on threading
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    let mut scratch = probs.clone();
    let lower = quantile_in_place(&mut scratch, 0.025);
    let upper = quantile_in_place(&mut scratch, 0.975);
    Ok(PosteriorToxicity {
        regimen_label: label.to_string(),
        draws: probs,
        mean,
        credible_interval: (lower, upper),
    })
}

/// Posterior toxicity of every regimen, given per-regimen peak samples.
pub fn posterior_tox_curve(
    draws: &PosteriorDraws,
    peak_samples: &[Vec<f64>],
    labels: &[String],
) -> Result<Vec<PosteriorToxicity>> {
    if peak_samples.len() != labels.len() {
        return invalid(format!(
            "{} peak samples for {} labels",
            peak_samples.len(),
            labels.len()
        ));
    }
    peak_samples
        .iter()
        .zip(labels)
        .map(|(p, l)| posterior_toxicity(draws, p, l))
        .collect()
}

/// 1-based index of the administered regimen whose mean is closest to
/// `delta_t`; ties go to the lower index.
pub fn select_mtd(means: &[f64], administered: &[usize], delta_t: f64) -> Result<usize> {
    if administered.is_empty() {
        return invalid("administered set is empty");
    }
    if let Some(k) = administered.iter().find(|&&k| k == 0 || k > means.len()) {
        return invalid(format!("administered index {k} outside 1..={}", means.len()));
    }
    let mut sorted = administered.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best = sorted[0];
    for &k in &sorted[1..] {
        if (means[k - 1] - delta_t).abs() < (means[best - 1] - delta_t).abs() {
            best = k;
        }
    }
    Ok(best)
}

/// Posterior toxicity of a regimen outside (or inside) the panel.
///
/// With the seed used for [`panel_peak_samples`], the simulated new patients
/// are the same, so a panel regimen reproduces its curve entry exactly.
pub fn predict_new_regimen(
    fit: &NlmeFit,
    draws: &PosteriorDraws,
    regimen: &DoseRegimen,
    m_predict: usize,
    sim: &SimSettings,
    seed: u64,
) -> Result<PosteriorToxicity> {
    let peaks = predict_peak_distribution(fit, regimen, m_predict, sim, seed)?;
    posterior_toxicity(draws, &peaks, regimen.label())
}

/// CSV with one row per regimen: index, label, mean, bounds and flags.
pub fn write_curve_csv<W: std::io::Write>(
    curve: &[ToxicityEstimate],
    administered: &[usize],
    selected: Option<usize>,
    w: W,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "regimen",
        "label",
        "p_tox",
        "lower",
        "upper",
        "administered",
        "selected",
    ])?;
    for (i, e) in curve.iter().enumerate() {
        let k = i + 1;
        wr.write_record([
            k.to_string(),
            e.label.clone(),
            e.mean.to_string(),
            e.lower.to_string(),
            e.upper.to_string(),
            administered.contains(&k).to_string(),
            (selected == Some(k)).to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
