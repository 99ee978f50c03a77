//! Simulated trials: patients, cohorts and the resulting dataset.

use serde::{Deserialize, Serialize};

use super::crm::{closest_among, crm_next, crm_posterior, CrmConfig};
use super::three_plus_three::{three_plus_three_step, Decision, LevelCount};
use crate::error::{invalid, Result};
use crate::mcmc::SamplerSettings;
use crate::pkpd::{
    observe_with_error, sample_individual, simulate_pd_with_times, IndividualParams, ObservedSamples, PdSolution,
    PopulationParams, SamplingDesign, SimSettings,
};
use crate::regimen::{DoseRegimen, RegimenPanel};
use crate::rng::{derive_seed, purpose, substream, SimRng};
use crate::toxgen::{simulate_toxicity, ToxicityGround, ToxicityOutcome};

/// Everything needed to simulate patients of one scenario.
#[derive(Debug, Clone, Copy)]
pub struct TrialSetup<'a> {
    pub panel: &'a RegimenPanel,
    pub pop: &'a PopulationParams,
    pub ground: &'a ToxicityGround,
    pub sim: &'a SimSettings,
    pub sampling: &'a SamplingDesign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Design {
    ThreePlusThree,
    Crm(CrmConfig),
}

impl Design {
    pub fn name(&self) -> &'static str {
        match self {
            Design::ThreePlusThree => "3+3",
            Design::Crm(_) => "CRM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: usize,
    /// 1-based panel index of the planned regimen.
    pub regimen_index: usize,
    pub planned: DoseRegimen,
    pub received: DoseRegimen,
    pub outcome: ToxicityOutcome,
    pub observations: ObservedSamples,
    /// Simulation truth; never read by the estimators.
    pub theta_true: IndividualParams,
    /// Noiseless peaks on the planned regimen (simulation truth).
    pub true_peaks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortLog {
    pub cohort: usize,
    pub regimen_index: usize,
    pub patients: usize,
    pub toxicities: usize,
    pub decision: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub crm_means: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub design: String,
    pub panel: RegimenPanel,
    pub patients: Vec<PatientRecord>,
    pub design_log: Vec<CohortLog>,
    /// Sorted 1-based indices of regimens given to at least one patient.
    pub administered_set: Vec<usize>,
    /// The design's own MTD-regimen recommendation (1-based).
    pub recommendation: Option<usize>,
    pub no_mtd: bool,
}

impl TrialDataset {
    /// Allocation never jumps more than one level above the highest tried.
    pub fn respects_no_skipping(&self) -> bool {
        let mut highest = 0;
        for c in &self.design_log {
            if c.regimen_index > highest + 1 {
                return false;
            }
            highest = highest.max(c.regimen_index);
        }
        true
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.panel.len()];
        for p in &self.patients {
            n[p.regimen_index - 1] += 1;
        }
        n
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s)?;
        for p in &d.patients {
            if p.regimen_index == 0 || d.panel.get(p.regimen_index - 1) != Some(&p.planned) {
                return invalid(format!("patient {} has a planned regimen outside the panel", p.id));
            }
        }
        Ok(d)
    }
}

/// Simulates one patient on panel regimen `regimen_index` (1-based).
pub fn simulate_patient(
    setup: &TrialSetup,
    regimen_index: usize,
    id: usize,
    rng: &mut SimRng,
) -> Result<PatientRecord> {
    let planned = setup
        .panel
        .get(regimen_index.wrapping_sub(1))
        .ok_or_else(|| crate::Error::InvalidArgument(format!("regimen index {regimen_index} outside the panel")))?
        .clone();
    let theta = sample_individual(setup.pop, rng);
    let true_peaks = PdSolution::solve(&theta, &planned, setup.sim)?.window_peaks();
    let outcome = simulate_toxicity(&true_peaks, setup.ground, rng)?;
    let received = planned.truncate_at_toxicity(outcome.stop_index)?;
    let schedule = setup.sampling.schedule(&received, setup.sim);
    let mut times = schedule.pk_times.clone();
    times.extend_from_slice(&schedule.pd_times);
    let profile = simulate_pd_with_times(&theta, &received, setup.sim, &times)?;
    let observations = observe_with_error(&profile, &schedule, setup.pop, rng)?;
    Ok(PatientRecord {
        id,
        regimen_index,
        planned,
        received,
        outcome,
        observations,
        theta_true: theta,
        true_peaks,
    })
}

fn treat_cohort(
    setup: &TrialSetup,
    k: usize,
    size: usize,
    seed: u64,
    patients: &mut Vec<PatientRecord>,
) -> Result<usize> {
    let mut tox = 0;
    for _ in 0..size {
        let id = patients.len();
        let mut rng = substream(seed, &[purpose::PATIENTS, id as u64]);
        let p = simulate_patient(setup, k, id, &mut rng)?;
        tox += p.outcome.global as usize;
        patients.push(p);
    }
    Ok(tox)
}

/// Runs one trial; `seed` is the trial's own seed.
pub fn run_trial(design: &Design, setup: &TrialSetup, sampler: &SamplerSettings, seed: u64) -> Result<TrialDataset> {
    let k_count = setup.panel.len();
    let mut patients = Vec::new();
    let mut log = Vec::new();
    let mut recommendation = None;
    let mut no_mtd = false;
    match design {
        Design::ThreePlusThree => {
            let mut counts = vec![LevelCount::default(); k_count];
            let mut current = 1;
            for cohort in 0..2 * k_count + 1 {
                let tox = treat_cohort(setup, current, 3, seed, &mut patients)?;
                counts[current - 1].treated += 3;
                counts[current - 1].toxicities += tox;
                let decision = three_plus_three_step(&counts, current)?;
                log.push(CohortLog {
                    cohort: cohort + 1,
                    regimen_index: current,
                    patients: 3,
                    toxicities: tox,
                    decision: format!("{decision:?}"),
                    crm_means: None,
                });
                match decision {
                    Decision::Escalate(k) | Decision::DeEscalate(k) => current = k,
                    Decision::StayExpand => {}
                    Decision::Stop => {
                        no_mtd = true;
                        break;
                    }
                    Decision::Declare(k) => {
                        recommendation = Some(k);
                        break;
                    }
                }
            }
            if recommendation.is_none() && !no_mtd {
                return invalid("3+3 design did not terminate");
            }
        }
        Design::Crm(cfg) => {
            cfg.validate()?;
            if cfg.skeleton.len() != k_count {
                return invalid(format!(
                    "skeleton has {} entries for {k_count} regimens",
                    cfg.skeleton.len()
                ));
            }
            let labels = cfg.dose_labels()?;
            let mut current = 1;
            let mut highest = 1;
            let mut data: Vec<(usize, bool)> = Vec::new();
            let mut last_means = Vec::new();
            for cohort in 0..cfg.n_max / cfg.cohort_size {
                let start = patients.len();
                let tox = treat_cohort(setup, current, cfg.cohort_size, seed, &mut patients)?;
                data.extend(patients[start..].iter().map(|p| (p.regimen_index, p.outcome.global)));
                highest = highest.max(current);
                let post = crm_posterior(
                    &data,
                    cfg,
                    &labels,
                    sampler,
                    derive_seed(seed, &[purpose::CRM_MCMC, cohort as u64]),
                )?;
                let next = crm_next(&post.means, cfg.target, highest);
                log.push(CohortLog {
                    cohort: cohort + 1,
                    regimen_index: current,
                    patients: cfg.cohort_size,
                    toxicities: tox,
                    decision: format!("next {next}"),
                    crm_means: Some(post.means.clone()),
                });
                current = next;
                last_means = post.means;
            }
            recommendation = closest_among(&last_means, cfg.target, administered(&patients));
        }
    }
    let administered_set = administered(&patients);
    Ok(TrialDataset {
        design: design.name().to_string(),
        panel: setup.panel.clone(),
        patients,
        design_log: log,
        administered_set,
        recommendation,
        no_mtd,
    })
}

fn administered(patients: &[PatientRecord]) -> Vec<usize> {
    let mut s: Vec<usize> = patients.iter().map(|p| p.regimen_index).collect();
    s.sort_unstable();
    s.dedup();
    s
}
