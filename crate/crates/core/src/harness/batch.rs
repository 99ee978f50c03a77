//! Per-trial analysis pipeline and the batch driver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::metrics::{rmse_metrics, RmseScope, RmseSummary};
use crate::drtox::{
    hierarchical_posterior, logistic_posterior, HierarchicalDatum, HierarchicalPrior, LogisticDatum, LogisticPrior,
    PosteriorDraws,
};
use crate::error::{Error, Result};
use crate::escalation::{run_trial, TrialDataset, TrialSetup};
use crate::integrate::{panel_peak_samples, posterior_tox_curve, predict_new_regimen, select_mtd, ToxicityEstimate};
use crate::nlme::{fit_population, predict_peaks, NlmeFit, PredictedPeaks};
use crate::pkpd::{IndividualParams, ParamVector};
use crate::regimen::{DoseRegimen, RegimenPanel};
use crate::rng::{derive_seed, purpose};
use crate::toxgen::Calibration;

/// The three ways of choosing an MTD-regimen compared in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The escalation design's own recommendation.
    Design,
    Logistic,
    Hierarchical,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Design, Method::Logistic, Method::Hierarchical];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Design => "design",
            Method::Logistic => "logistic",
            Method::Hierarchical => "hierarchical",
        }
    }
}

/// Scenario quantities shared by every trial of a batch.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub panel: RegimenPanel,
    pub calibration: Calibration,
    pub logistic_prior: LogisticPrior,
    pub hierarchical_prior: HierarchicalPrior,
    pub new_regimens: Vec<DoseRegimen>,
}

impl Scenario {
    pub fn prepare(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let (logistic_prior, hierarchical_prior) = config.priors()?;
        Ok(Self {
            config: config.clone(),
            panel: config.panel()?,
            calibration: config.calibration()?,
            logistic_prior,
            hierarchical_prior,
            new_regimens: config.new_regimens()?,
        })
    }

    pub fn setup(&self) -> TrialSetup<'_> {
        TrialSetup {
            panel: &self.panel,
            pop: &self.config.population,
            ground: &self.calibration.ground,
            sim: &self.config.sim,
            sampling: &self.config.sampling,
        }
    }
}

/// Fitted PK/PD model, posteriors and curves for one dataset.
#[derive(Debug, Clone)]
pub struct TrialAnalysis {
    pub fit: NlmeFit,
    pub peaks: Vec<PredictedPeaks>,
    pub logistic: PosteriorDraws,
    pub hierarchical: PosteriorDraws,
    pub logistic_curve: Vec<ToxicityEstimate>,
    pub hierarchical_curve: Vec<ToxicityEstimate>,
    pub logistic_selection: usize,
    pub hierarchical_selection: usize,
    /// Predictions for the scenario's untested regimens: (logistic, hierarchical).
    pub new_regimens: Vec<(ToxicityEstimate, ToxicityEstimate)>,
}

/// NLME → predicted peaks → both DRtox posteriors → curves → selections.
///
/// All randomness derives from `seed` (the trial's own seed).
pub fn analyze_dataset(scenario: &Scenario, dataset: &TrialDataset, seed: u64) -> Result<TrialAnalysis> {
    let cfg = &scenario.config;
    let fit = fit_population(dataset, &cfg.population, &cfg.nlme, &cfg.sim)?;
    let peaks = predict_peaks(&fit, dataset, &cfg.sim)?;

    let logistic_data: Vec<LogisticDatum> = dataset
        .patients
        .iter()
        .zip(&peaks)
        .map(|(p, r)| LogisticDatum {
            toxic: p.outcome.global,
            peak: if cfg.drtox.use_planned_peaks {
                r.max_planned
            } else {
                r.max_received
            },
        })
        .collect();
    let hierarchical_data: Vec<HierarchicalDatum> = dataset
        .patients
        .iter()
        .zip(&peaks)
        .map(|(p, r)| HierarchicalDatum {
            peaks: r.received.clone(),
            outcome: p.outcome.clone(),
        })
        .collect();
    let logistic = logistic_posterior(
        &logistic_data,
        &scenario.logistic_prior,
        &cfg.sampler,
        derive_seed(seed, &[purpose::LOGISTIC_MCMC]),
    )?;
    let hierarchical = hierarchical_posterior(
        &hierarchical_data,
        &scenario.hierarchical_prior,
        &cfg.sampler,
        derive_seed(seed, &[purpose::HIERARCHICAL_MCMC]),
    )?;

    let predict_seed = derive_seed(seed, &[purpose::PREDICT]);
    let samples = panel_peak_samples(&fit, &scenario.panel, cfg.m_predict, &cfg.sim, predict_seed)?;
    let labels = scenario.panel.labels();
    let summarize = |draws: &PosteriorDraws| -> Result<Vec<ToxicityEstimate>> {
        Ok(posterior_tox_curve(draws, &samples, &labels)?
            .iter()
            .map(|p| p.estimate())
            .collect())
    };
    let logistic_curve = summarize(&logistic)?;
    let hierarchical_curve = summarize(&hierarchical)?;
    let means = |c: &[ToxicityEstimate]| c.iter().map(|e| e.mean).collect::<Vec<_>>();
    let administered = &dataset.administered_set;
    let logistic_selection = select_mtd(&means(&logistic_curve), administered, cfg.delta_t)?;
    let hierarchical_selection = select_mtd(&means(&hierarchical_curve), administered, cfg.delta_t)?;

    let new_regimens = scenario
        .new_regimens
        .iter()
        .map(|r| {
            let l = predict_new_regimen(&fit, &logistic, r, cfg.m_predict, &cfg.sim, predict_seed)?;
            let h = predict_new_regimen(&fit, &hierarchical, r, cfg.m_predict, &cfg.sim, predict_seed)?;
            Ok((l.estimate(), h.estimate()))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TrialAnalysis {
        fit,
        peaks,
        logistic,
        hierarchical,
        logistic_curve,
        hierarchical_curve,
        logistic_selection,
        hierarchical_selection,
        new_regimens,
    })
}

/// Compact per-trial record kept in batch results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// Failed attempts replaced before this trial succeeded.
    pub replaced: usize,
    /// Why each replaced attempt failed.
    pub failures: Vec<String>,
    pub seed: u64,
    pub n_patients: usize,
    pub n_toxicities: usize,
    pub sample_sizes: Vec<usize>,
    pub administered: Vec<usize>,
    /// `None` when the design stopped without an MTD-regimen.
    pub design_selection: Option<usize>,
    pub logistic_selection: usize,
    pub hierarchical_selection: usize,
    /// Final CRM posterior means, when the design provides them.
    pub design_curve: Option<Vec<f64>>,
    pub logistic_curve: Vec<ToxicityEstimate>,
    pub hierarchical_curve: Vec<ToxicityEstimate>,
    pub new_regimens: Vec<(ToxicityEstimate, ToxicityEstimate)>,
    pub nlme_converged: bool,
    pub nlme_iterations: usize,
    pub nlme_failed_patients: usize,
    pub mu_hat: IndividualParams,
    pub omega_hat: ParamVector,
    pub max_rhat: f64,
    pub min_ess: f64,
}

impl TrialRecord {
    pub fn selection(&self, m: Method) -> Option<usize> {
        match m {
            Method::Design => self.design_selection,
            Method::Logistic => Some(self.logistic_selection),
            Method::Hierarchical => Some(self.hierarchical_selection),
        }
    }

    pub fn curve(&self, m: Method) -> Option<Vec<f64>> {
        match m {
            Method::Design => self.design_curve.clone(),
            Method::Logistic => Some(self.logistic_curve.iter().map(|e| e.mean).collect()),
            Method::Hierarchical => Some(self.hierarchical_curve.iter().map(|e| e.mean).collect()),
        }
    }
}

/// Errors after which a simulated trial is discarded and replaced.
fn replaceable(e: &Error) -> bool {
    matches!(
        e,
        Error::ModelInconsistency { .. }
            | Error::Diagnostics { .. }
            | Error::EstimationInfeasible(_)
            | Error::FitFailure { .. }
            | Error::Integration { .. }
    )
}

/// Seed of attempt `attempt` of trial `trial`; attempt 0 is the trial's own
/// substream, replacements get their own.
pub fn trial_seed(master: u64, trial: usize, attempt: usize) -> u64 {
    if attempt == 0 {
        derive_seed(master, &[trial as u64])
    } else {
        derive_seed(master, &[trial as u64, attempt as u64])
    }
}

/// Simulates and analyses one trial, replacing failed attempts.
///
/// Returns the record, or the failures when `max_attempts` are exhausted.
pub fn run_one_trial(
    scenario: &Scenario,
    master: u64,
    trial: usize,
    max_attempts: usize,
) -> std::result::Result<TrialRecord, (Vec<String>, Error)> {
    let mut failures = Vec::new();
    for attempt in 0..max_attempts {
        let seed = trial_seed(master, trial, attempt);
        let outcome = run_trial(
            &scenario.config.design,
            &scenario.setup(),
            &scenario.config.sampler,
            seed,
        )
        .and_then(|ds| analyze_dataset(scenario, &ds, seed).map(|a| (ds, a)));
        match outcome {
            Ok((ds, a)) => return Ok(record(trial, attempt, failures, seed, &ds, &a)),
            Err(e) if replaceable(&e) => {
                log::info!("trial {trial} attempt {attempt} replaced: {e}");
                failures.push(e.to_string());
            }
            Err(e) => return Err((failures, e)),
        }
    }
    let last = failures.last().cloned().unwrap_or_default();
    Err((
        failures,
        Error::ReplacementExhausted {
            failed: max_attempts,
            budget: max_attempts - 1,
            last,
        },
    ))
}

fn record(
    trial: usize,
    replaced: usize,
    failures: Vec<String>,
    seed: u64,
    ds: &TrialDataset,
    a: &TrialAnalysis,
) -> TrialRecord {
    let diags = [&a.logistic.diagnostics, &a.hierarchical.diagnostics];
    TrialRecord {
        trial,
        replaced,
        failures,
        seed,
        n_patients: ds.patients.len(),
        n_toxicities: ds.patients.iter().filter(|p| p.outcome.global).count(),
        sample_sizes: ds.sample_sizes(),
        administered: ds.administered_set.clone(),
        design_selection: ds.recommendation,
        logistic_selection: a.logistic_selection,
        hierarchical_selection: a.hierarchical_selection,
        design_curve: ds.design_log.last().and_then(|c| c.crm_means.clone()),
        logistic_curve: a.logistic_curve.clone(),
        hierarchical_curve: a.hierarchical_curve.clone(),
        new_regimens: a.new_regimens.clone(),
        nlme_converged: a.fit.converged,
        nlme_iterations: a.fit.iterations,
        nlme_failed_patients: a.fit.failed.len(),
        mu_hat: a.fit.mu_hat,
        omega_hat: a.fit.omega_hat,
        max_rhat: diags.iter().map(|d| d.max_rhat()).fold(0.0, f64::max),
        min_ess: diags.iter().map(|d| d.min_ess()).fold(f64::INFINITY, f64::min),
    }
}

/// Selection percentages of one method; `no_mtd` completes the row to 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcsRow {
    pub method: Method,
    pub percent: Vec<f64>,
    pub no_mtd: f64,
    /// Percentage selecting the true MTD-regimen.
    pub correct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub method: Method,
    pub scope: RmseScope,
    pub summary: RmseSummary,
}

/// Outcome of a batch: per-trial records and aggregate operating characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub scenario: String,
    pub design: String,
    pub seed: u64,
    pub n_trials: usize,
    pub labels: Vec<String>,
    pub tau_t: f64,
    pub true_curve: Vec<f64>,
    pub true_mtd: usize,
    pub replacements: usize,
    pub pcs: Vec<PcsRow>,
    pub mean_sample_size: Vec<f64>,
    pub mean_n: f64,
    pub rmse: Vec<RmseRow>,
    pub trials: Vec<TrialRecord>,
}

impl BatchResult {
    pub fn pcs_row(&self, m: Method) -> Option<&PcsRow> {
        self.pcs.iter().find(|r| r.method == m)
    }
}

/// Runs `n_trials` trials in parallel and aggregates them in trial order.
pub fn run_batch(config: &ScenarioConfig) -> Result<BatchResult> {
    let scenario = Scenario::prepare(config)?;
    run_batch_prepared(&scenario)
}

pub fn run_batch_prepared(scenario: &Scenario) -> Result<BatchResult> {
    let cfg = &scenario.config;
    let budget = (cfg.replacement_budget * cfg.n_trials as f64).floor() as usize;
    let outcomes: Vec<_> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| run_one_trial(scenario, cfg.seed, t, budget + 1))
        .collect();
    let mut trials = Vec::with_capacity(cfg.n_trials);
    let mut replacements = 0;
    let mut last_failure = String::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => {
                replacements += r.replaced;
                if let Some(f) = r.failures.last() {
                    last_failure = f.clone();
                }
                trials.push(r);
            }
            Err((failures, e)) => {
                if let Error::ReplacementExhausted { .. } = e {
                    return Err(Error::ReplacementExhausted {
                        failed: replacements + failures.len(),
                        budget,
                        last: failures.last().cloned().unwrap_or_default(),
                    });
                }
                return Err(e);
            }
        }
        if replacements > budget {
            return Err(Error::ReplacementExhausted {
                failed: replacements,
                budget,
                last: last_failure,
            });
        }
    }
    Ok(aggregate(scenario, trials, replacements))
}

fn aggregate(scenario: &Scenario, trials: Vec<TrialRecord>, replacements: usize) -> BatchResult {
    let cfg = &scenario.config;
    let k_count = scenario.panel.len();
    let n = trials.len() as f64;
    let true_mtd = scenario.calibration.target_index;
    let pcs = Method::ALL
        .iter()
        .map(|&m| {
            let mut counts = vec![0usize; k_count];
            let mut none = 0usize;
            for t in &trials {
                match t.selection(m) {
                    Some(k) => counts[k - 1] += 1,
                    None => none += 1,
                }
            }
            let percent: Vec<f64> = counts.iter().map(|&c| 100.0 * c as f64 / n).collect();
            let no_mtd = 100.0 * none as f64 / n;
            PcsRow {
                method: m,
                correct: percent[true_mtd - 1],
                percent,
                no_mtd,
            }
        })
        .collect();
    let mut totals = vec![0usize; k_count];
    for t in &trials {
        for (m, s) in totals.iter_mut().zip(&t.sample_sizes) {
            *m += s;
        }
    }
    let mean_sample_size: Vec<f64> = totals.iter().map(|&s| s as f64 / n).collect();
    let mean_n = trials.iter().map(|t| t.n_patients as f64).sum::<f64>() / n;
    let truth = &scenario.calibration.true_curve;
    let mut rmse = Vec::new();
    for &m in &Method::ALL {
        let curves: Vec<Vec<f64>> = trials.iter().filter_map(|t| t.curve(m)).collect();
        if curves.len() != trials.len() {
            continue;
        }
        for scope in [RmseScope::All, RmseScope::MtdNeighborhood] {
            if let Ok(summary) = rmse_metrics(&curves, truth, scope, true_mtd) {
                rmse.push(RmseRow {
                    method: m,
                    scope,
                    summary,
                });
            }
        }
    }
    BatchResult {
        scenario: cfg.name.clone(),
        design: cfg.design.name().to_string(),
        seed: cfg.seed,
        n_trials: cfg.n_trials,
        labels: scenario.panel.labels(),
        tau_t: scenario.calibration.ground.tau_t,
        true_curve: truth.clone(),
        true_mtd,
        replacements,
        pcs,
        mean_sample_size,
        mean_n,
        rmse,
        trials,
    }
}
