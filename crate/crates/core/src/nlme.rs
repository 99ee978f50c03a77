//! Population PK/PD estimation by iterative two-stage MAP.
//!
//! Each outer iteration fits every patient's random effects `η_i` by
//! maximizing the observation likelihood (proportional error) plus the
//! log-normal prior, then re-centers the fixed effects
//! (`μ ← μ·exp(mean η̂)`) and sets each variance to the empirical variance of
//! the re-centered `η̂`, floored. Both steps minimize the same joint objective
//!
//! ```text
//! J(μ, Ω, η) = Σ_i [ −log p(y_i | μ·e^{η_i}) + ½ Σ_c (η_ic²/ω_c + ln ω_c) ]
//! ```
//!
//! so the recorded objective trace is nonincreasing.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::escalation::{PatientRecord, TrialDataset};
use crate::pkpd::{
    concentration_parts, cytokine_sensitivities, idx, IndividualParams, Observation, ObservedSamples, ParamVector,
    PdSolution, PopulationParams, SimSettings, N_PARAMS, PARAM_NAMES,
};
use crate::regimen::DoseRegimen;

/// Predictions are floored here so the log-likelihood stays finite.
const MIN_PREDICTION: f64 = 1e-10;

/// Which components are estimated and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlmeConfig {
    /// Components carrying a random effect.
    pub random_effects: Vec<String>,
    /// Components whose fixed effect is held at its initial value.
    pub frozen: Vec<String>,
    pub max_iter: usize,
    /// Convergence on the largest relative change of μ and Ω entries.
    pub rel_tol: f64,
    pub omega_floor: f64,
    /// Observations below these limits (ng/mL, pg/mL) are replaced by half
    /// the limit, and so are predictions for them that fall below it.
    pub loq_pk: f64,
    pub loq_pd: f64,
    /// Number of starting points tried when a fit fails.
    pub multistarts: usize,
}

impl Default for NlmeConfig {
    fn default() -> Self {
        Self {
            random_effects: ["cl", "emax", "ic50", "kdeg", "kprime"].map(String::from).to_vec(),
            frozen: ["ec50", "imax", "ic50"].map(String::from).to_vec(),
            max_iter: 50,
            rel_tol: 1e-3,
            omega_floor: 1e-4,
            loq_pk: 0.01,
            loq_pd: 0.1,
            multistarts: 3,
        }
    }
}

fn component_index(name: &str) -> Result<usize> {
    PARAM_NAMES
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown parameter component `{name}`")))
}

impl NlmeConfig {
    pub fn validate(&self) -> Result<()> {
        for n in self.random_effects.iter().chain(&self.frozen) {
            component_index(n)?;
        }
        if self.max_iter == 0 || !(self.rel_tol > 0.0) || !(self.omega_floor > 0.0) || self.multistarts == 0 {
            return invalid("nlme: max_iter, rel_tol, omega_floor and multistarts must be positive");
        }
        if !(self.loq_pk >= 0.0 && self.loq_pd >= 0.0) {
            return invalid("nlme: limits of quantification must be nonnegative");
        }
        Ok(())
    }

    fn mask(names: &[String]) -> Result<[bool; N_PARAMS]> {
        let mut m = [false; N_PARAMS];
        for n in names {
            m[component_index(n)?] = true;
        }
        Ok(m)
    }
}

/// One patient's data as seen by the estimator.
#[derive(Debug, Clone, Copy)]
pub struct PatientData<'a> {
    pub received: &'a DoseRegimen,
    pub observations: &'a ObservedSamples,
}

impl<'a> From<&'a PatientRecord> for PatientData<'a> {
    fn from(p: &'a PatientRecord) -> Self {
        Self {
            received: &p.received,
            observations: &p.observations,
        }
    }
}

/// Result of [`fit_population`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlmeFit {
    pub mu_hat: IndividualParams,
    pub omega_hat: ParamVector,
    pub b_pk: f64,
    pub b_pd: f64,
    /// Individual estimates; patients whose fit failed get `mu_hat`.
    pub theta_hat: Vec<IndividualParams>,
    /// Dataset positions of patients excluded after a fit failure.
    pub failed: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

impl NlmeFit {
    /// The fitted population, for simulating new patients.
    pub fn population(&self) -> PopulationParams {
        PopulationParams {
            mu: self.mu_hat,
            omega: self.omega_hat,
            b_pk: self.b_pk,
            b_pd: self.b_pd,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let fit: Self = serde_json::from_str(s)?;
        fit.population().validate()?;
        for th in &fit.theta_hat {
            th.validate()?;
        }
        Ok(fit)
    }
}

/// An observation after limit-of-quantification handling.
#[derive(Debug, Clone, Copy)]
struct Obs {
    t: f64,
    value: f64,
    /// Predictions are floored here (half the LOQ for censored values).
    floor: f64,
}

fn censor(obs: &[Observation], loq: f64) -> Vec<Obs> {
    obs.iter()
        .map(|o| {
            if o.value < loq {
                Obs {
                    t: o.t,
                    value: 0.5 * loq,
                    floor: 0.5 * loq,
                }
            } else {
                Obs {
                    t: o.t,
                    value: o.value,
                    floor: MIN_PREDICTION,
                }
            }
        })
        .collect()
}

/// Objective value, gradient and expected information in the η coordinates.
struct Evaluation {
    f: f64,
    grad: Vec<f64>,
    info: DMatrix<f64>,
}

struct IndividualProblem<'a> {
    pop: &'a PopulationParams,
    sim: &'a SimSettings,
    received: &'a DoseRegimen,
    pk: Vec<Obs>,
    pd: Vec<Obs>,
    pd_times: Vec<f64>,
    /// Components with a random effect (ω > 0).
    active: Vec<usize>,
}

/// Adds one proportional-error observation to the objective.
///
/// `dlnf` holds `∂ln f/∂η` for the active components; the expected
/// information of `ln f` under `y = f(1 + bε)` is `2 + 1/b²`.
fn accumulate(ev: &mut Evaluation, y: f64, f: f64, dlnf: &[f64], b: f64) {
    let sd = b * f;
    let r = (y - f) / sd;
    ev.f += sd.ln() + 0.5 * r * r;
    let g = 1.0 - r * (r + 1.0 / b);
    let w = 2.0 + 1.0 / (b * b);
    for (i, di) in dlnf.iter().enumerate() {
        ev.grad[i] += g * di;
        for (j, dj) in dlnf.iter().enumerate() {
            ev.info[(i, j)] += w * di * dj;
        }
    }
}

impl IndividualProblem<'_> {
    fn theta(&self, eta: &[f64]) -> Option<IndividualParams> {
        let mut a = self.pop.mu.to_array();
        for (&c, &e) in self.active.iter().zip(eta) {
            if !e.is_finite() || e.abs() > 20.0 {
                return None;
            }
            a[c] *= e.exp();
        }
        let th = IndividualParams::from_array(a);
        th.validate().ok().map(|_| th)
    }

    /// Negative log posterior of η (up to constants) with derivatives.
    fn evaluate(&self, eta: &[f64]) -> Option<Evaluation> {
        let th = self.theta(eta)?;
        let n = self.active.len();
        let mut ev = Evaluation {
            f: 0.0,
            grad: vec![0.0; n],
            info: DMatrix::zeros(n, n),
        };
        let mut dlnf = vec![0.0; n];
        if self.pop.b_pk > 0.0 {
            let (bw, tinf) = (self.sim.body_weight_kg, self.sim.infusion_hours);
            for o in &self.pk {
                let (c, dc_dlnk) = concentration_parts(&th.pk, self.received, bw, tinf, o.t).ok()?;
                let floored = c < o.floor;
                let f = c.max(o.floor);
                for (d, &comp) in dlnf.iter_mut().zip(&self.active) {
                    *d = match comp {
                        _ if floored => 0.0,
                        idx::CL => (dc_dlnk - c) / f,
                        idx::V => -dc_dlnk / f,
                        _ => 0.0,
                    };
                }
                accumulate(&mut ev, o.value, f, &dlnf, self.pop.b_pk);
            }
        }
        if self.pop.b_pd > 0.0 && !self.pd.is_empty() {
            let sens = cytokine_sensitivities(&th, self.received, self.sim, &self.pd_times).ok()?;
            for (o, s) in self.pd.iter().zip(&sens) {
                let floored = s.value < o.floor;
                let f = s.value.max(o.floor);
                for (d, &comp) in dlnf.iter_mut().zip(&self.active) {
                    *d = if floored { 0.0 } else { s.grad[comp] / f };
                }
                accumulate(&mut ev, o.value, f, &dlnf, self.pop.b_pd);
            }
        }
        for (i, (&c, e)) in self.active.iter().zip(eta).enumerate() {
            let om = self.pop.omega.0[c];
            ev.f += 0.5 * e * e / om;
            ev.grad[i] += e / om;
            ev.info[(i, i)] += 1.0 / om;
        }
        ev.f.is_finite().then_some(ev)
    }
}

/// Levenberg–Marquardt on the expected information (Fisher scoring with
/// damping). Returns `(η, f, converged)`; every accepted step decreases `f`.
fn scoring(problem: &IndividualProblem, eta0: &[f64], max_iter: usize) -> Option<(Vec<f64>, f64, bool)> {
    let n = eta0.len();
    let mut eta = eta0.to_vec();
    let mut cur = problem.evaluate(&eta)?;
    let mut lambda = 1e-3;
    for _ in 0..max_iter {
        let g = DVector::from_column_slice(&cur.grad);
        // Newton decrement under the (undamped) information
        let decrement = cur.info.clone().cholesky().map(|ch| 0.5 * g.dot(&ch.solve(&g)));
        if decrement.is_some_and(|d| d < 1e-8) {
            return Some((eta, cur.f, true));
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut m = cur.info.clone();
            for i in 0..n {
                m[(i, i)] *= 1.0 + lambda;
            }
            let Some(ch) = m.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let mut step = ch.solve(&(-&g));
            let norm = step.amax();
            if norm > 2.0 {
                step *= 2.0 / norm;
            }
            let trial: Vec<f64> = eta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            match problem.evaluate(&trial) {
                Some(ev) if ev.f < cur.f => {
                    let decrease = cur.f - ev.f;
                    eta = trial;
                    cur = ev;
                    lambda = (lambda / 5.0).max(1e-9);
                    accepted = true;
                    if decrease < 1e-10 * (1.0 + cur.f.abs()) {
                        return Some((eta, cur.f, true));
                    }
                    break;
                }
                _ => lambda *= 5.0,
            }
        }
        if !accepted {
            // no descent direction left at working precision
            let d = decrement.unwrap_or(f64::INFINITY);
            return Some((eta, cur.f, d < 1e-4));
        }
    }
    Some((eta, cur.f, false))
}

/// Starting points for the multistart: the warm start, then ±½·SD shifts.
fn start_points(active: &[usize], omega: &ParamVector, base: &[f64], n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|s| {
            let shift = match s {
                0 => 0.0,
                s if s % 2 == 1 => 0.5 * (s / 2 + 1) as f64,
                s => -0.5 * (s / 2) as f64,
            };
            active
                .iter()
                .zip(base)
                .map(|(&c, b)| b + shift * omega.0[c].sqrt())
                .collect()
        })
        .collect()
}

/// Posterior mode of one patient's random effects, started from `eta0`.
///
/// Returns `(η̂, objective)`; the result is never worse than the start.
fn map_eta(problem: &IndividualProblem, eta0: &[f64], multistarts: usize, patient: usize) -> Result<(Vec<f64>, f64)> {
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in start_points(&problem.active, &problem.pop.omega, eta0, multistarts) {
        let Some((eta, f, converged)) = scoring(problem, &start, 200) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| f < b.1) {
            best = Some((eta, f));
        }
        if converged {
            break;
        }
    }
    best.ok_or_else(|| Error::FitFailure {
        patient,
        reason: "objective not finite at any starting point".into(),
    })
}

fn problem<'a>(
    data: PatientData<'a>,
    pop: &'a PopulationParams,
    sim: &'a SimSettings,
    config: &NlmeConfig,
) -> Result<IndividualProblem<'a>> {
    let obs = data.observations;
    if obs.pk.is_empty() && obs.pd.is_empty() {
        return invalid("map_individual needs at least one observation");
    }
    let active = (0..N_PARAMS).filter(|&c| pop.omega.0[c] > 0.0).collect();
    let pd = censor(&obs.pd, config.loq_pd);
    Ok(IndividualProblem {
        pop,
        sim,
        received: data.received,
        pk: censor(&obs.pk, config.loq_pk),
        pd_times: pd.iter().map(|o| o.t).collect(),
        pd,
        active,
    })
}

/// Posterior-mode individual parameters `θ = μ·exp(η̂)` for one patient.
///
/// Only components with `ω > 0` are estimated; the search starts at `η = 0`.
pub fn map_individual(
    data: PatientData,
    pop: &PopulationParams,
    sim: &SimSettings,
    config: &NlmeConfig,
) -> Result<IndividualParams> {
    pop.validate()?;
    let p = problem(data, pop, sim, config)?;
    let zero = vec![0.0; p.active.len()];
    let (eta, _) = map_eta(&p, &zero, config.multistarts, 0)?;
    p.theta(&eta).ok_or_else(|| Error::FitFailure {
        patient: 0,
        reason: "estimate outside the valid range".into(),
    })
}

/// Population objective contribution of the variances: ½ n Σ ln ω.
fn log_det_term(omega: &ParamVector, active: &[usize], n: usize) -> f64 {
    0.5 * n as f64 * active.iter().map(|&c| omega.0[c].ln()).sum::<f64>()
}

fn max_rel_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| ((b - a) / a).abs())
        .fold(0.0, f64::max)
}

/// Iterative two-stage estimation over all patients of a dataset.
pub fn fit_population(
    dataset: &TrialDataset,
    init: &PopulationParams,
    config: &NlmeConfig,
    sim: &SimSettings,
) -> Result<NlmeFit> {
    let data: Vec<PatientData> = dataset.patients.iter().map(PatientData::from).collect();
    fit_patients(&data, init, config, sim)
}

/// [`fit_population`] on explicit patient data.
pub fn fit_patients(
    data: &[PatientData],
    init: &PopulationParams,
    config: &NlmeConfig,
    sim: &SimSettings,
) -> Result<NlmeFit> {
    config.validate()?;
    init.validate()?;
    if data.is_empty() {
        return invalid("fit_population needs a nonempty dataset");
    }
    let re = NlmeConfig::mask(&config.random_effects)?;
    let frozen = NlmeConfig::mask(&config.frozen)?;
    let active: Vec<usize> = (0..N_PARAMS).filter(|&c| re[c]).collect();

    let mut pop = *init;
    for c in 0..N_PARAMS {
        pop.omega.0[c] = if re[c] {
            init.omega.0[c].max(config.omega_floor)
        } else {
            0.0
        };
    }
    let n = data.len();
    let mut etas: Vec<Vec<f64>> = vec![vec![0.0; active.len()]; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut failed: Vec<usize> = Vec::new();

    for iter in 0..config.max_iter {
        iterations = iter + 1;
        // (i) individual fits, warm-started at the current (re-centered) η
        let fits: Vec<Result<(Vec<f64>, f64)>> = data
            .par_iter()
            .zip(&etas)
            .enumerate()
            .map(|(i, (d, eta0))| {
                let p = problem(*d, &pop, sim, config)?;
                map_eta(&p, eta0, config.multistarts, i)
            })
            .collect();
        failed.clear();
        let mut objective = 0.0;
        for (i, r) in fits.into_iter().enumerate() {
            match r {
                Ok((eta, f)) => {
                    etas[i] = eta;
                    objective += f;
                }
                Err(Error::FitFailure { .. }) => failed.push(i),
                Err(e) => return Err(e),
            }
        }
        let used: Vec<usize> = (0..n).filter(|i| !failed.contains(i)).collect();
        if used.len() < 3 {
            return Err(Error::EstimationInfeasible(format!(
                "only {} of {n} patients have usable individual fits",
                used.len()
            )));
        }
        trace.push(objective + log_det_term(&pop.omega, &active, used.len()));

        // (ii) population update: re-center, then empirical variances
        let mut mu = pop.mu.to_array();
        let mut omega = pop.omega;
        let m = used.len() as f64;
        for (j, &c) in active.iter().enumerate() {
            let shift = if frozen[c] {
                0.0
            } else {
                used.iter().map(|&i| etas[i][j]).sum::<f64>() / m
            };
            mu[c] *= shift.exp();
            for eta in etas.iter_mut() {
                eta[j] -= shift;
            }
            let var = used.iter().map(|&i| etas[i][j] * etas[i][j]).sum::<f64>() / m;
            omega.0[c] = var.max(config.omega_floor);
        }
        let change = max_rel_change(&pop.mu.to_array(), &mu).max(max_rel_change(&pop.omega.0, &omega.0));
        pop.mu = IndividualParams::from_array(mu);
        pop.omega = omega;
        if change < config.rel_tol {
            converged = true;
            break;
        }
    }

    let theta_hat = (0..n)
        .map(|i| {
            if failed.contains(&i) {
                return pop.mu;
            }
            let mut a = pop.mu.to_array();
            for (j, &c) in active.iter().enumerate() {
                a[c] *= etas[i][j].exp();
            }
            IndividualParams::from_array(a)
        })
        .collect();
    // frozen fixed effects must come back bit-identical
    debug_assert!(frozen
        .iter()
        .enumerate()
        .all(|(c, f)| !f || pop.mu.to_array()[c] == init.mu.to_array()[c]));
    Ok(NlmeFit {
        mu_hat: pop.mu,
        omega_hat: pop.omega,
        b_pk: pop.b_pk,
        b_pd: pop.b_pd,
        theta_hat,
        failed,
        converged,
        iterations,
        objective_trace: trace,
    })
}

/// Predicted peaks for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedPeaks {
    /// Per-administration peaks on the regimen actually received.
    pub received: Vec<f64>,
    pub max_received: f64,
    /// Peaks on the full planned regimen.
    pub planned: Vec<f64>,
    pub max_planned: f64,
}

/// Peaks implied by the individual estimates, on received and planned regimens.
pub fn predict_peaks(fit: &NlmeFit, dataset: &TrialDataset, sim: &SimSettings) -> Result<Vec<PredictedPeaks>> {
    if fit.theta_hat.len() != dataset.patients.len() {
        return invalid(format!(
            "fit has {} individual estimates for {} patients",
            fit.theta_hat.len(),
            dataset.patients.len()
        ));
    }
    dataset
        .patients
        .par_iter()
        .zip(&fit.theta_hat)
        .map(|(p, th)| {
            let planned = PdSolution::solve(th, &p.planned, sim)?.window_peaks();
            let received = if p.received.len() == p.planned.len() {
                planned.clone()
            } else {
                PdSolution::solve(th, &p.received, sim)?.window_peaks()
            };
            let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(PredictedPeaks {
                max_received: max(&received),
                received,
                max_planned: max(&planned),
                planned,
            })
        })
        .collect()
}
