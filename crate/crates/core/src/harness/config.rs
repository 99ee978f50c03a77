//! Scenario configuration: one TOML file describing the panel, the
//! population, the toxicity ground truth, the design and the estimators.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drtox::{calibrate_logistic_prior, HierarchicalPrior, LogisticPrior, SlopeCalibration};
use crate::error::{Error, Result};
use crate::escalation::{CrmConfig, Design};
use crate::mcmc::SamplerSettings;
use crate::nlme::NlmeConfig;
use crate::pkpd::{reference_peaks, PopulationParams, SamplingDesign, SimSettings};
use crate::regimen::{DoseRegimen, RegimenPanel};
use crate::rng::{purpose, substream};
use crate::toxgen::{calibrate_threshold_with_bank, closest_to_target, Calibration, PeakBank, ToxicityGround};

/// A regimen given by doses (µg/kg) on administration days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimenSpec {
    #[serde(default)]
    pub label: Option<String>,
    pub doses: Vec<f64>,
    /// Administration days; defaults to the panel schedule.
    #[serde(default)]
    pub days: Option<Vec<f64>>,
}

impl RegimenSpec {
    pub fn build(&self, default_days: &[f64], default_label: &str) -> Result<DoseRegimen> {
        let days = self.days.as_deref().unwrap_or(default_days);
        let label = self.label.clone().unwrap_or_else(|| default_label.to_string());
        DoseRegimen::from_days(self.doses.clone(), days, label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelConfig {
    /// Administration days shared by the panel regimens (day 1 = time 0).
    pub days: Vec<f64>,
    pub regimens: Vec<RegimenSpec>,
}

impl PanelConfig {
    pub fn build(&self) -> Result<RegimenPanel> {
        let regimens = self
            .regimens
            .iter()
            .enumerate()
            .map(|(i, r)| r.build(&self.days, &format!("S{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(r) = regimens.iter().find(|r| !r.is_strictly_positive()) {
            return Err(Error::Config(format!(
                "panel regimen {} has a nonpositive dose",
                r.label()
            )));
        }
        RegimenPanel::new(regimens)
    }
}

/// Toxicity ground truth: an explicit threshold, or one calibrated so that
/// `true_mtd` is the MTD-regimen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundConfig {
    pub omega_alpha: f64,
    pub tau_t: Option<f64>,
    pub true_mtd: Option<usize>,
    /// Simulated patients per regimen for the true toxicity curve.
    pub draws: usize,
    pub seed: u64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            omega_alpha: 0.25,
            tau_t: None,
            true_mtd: None,
            draws: 4000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticSettings {
    /// 1-based reference regimen whose prior toxicity is `delta_t`.
    pub k_t: usize,
    pub beta0_sd: f64,
    pub beta1_shape: f64,
    /// Prior toxicity guesses per regimen; defaults to the CRM skeleton.
    pub guesses: Option<Vec<f64>>,
    pub slope: SlopeCalibration,
}

impl Default for LogisticSettings {
    fn default() -> Self {
        Self {
            k_t: 4,
            beta0_sd: 2.0,
            beta1_shape: 5.0,
            guesses: None,
            slope: SlopeCalibration::Neighbors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchicalSettings {
    /// 1-based regimen with prior toxicity 0.5.
    pub k50: usize,
    pub mu_z_sd: f64,
    pub tau_z_scale: f64,
}

impl Default for HierarchicalSettings {
    fn default() -> Self {
        Self {
            k50: 6,
            mu_z_sd: 1.0,
            tau_z_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrtoxConfig {
    pub logistic: LogisticSettings,
    pub hierarchical: HierarchicalSettings,
    /// Feed the logistic model the peak predicted on the full planned
    /// regimen (instead of the received one) for patients stopped early.
    pub use_planned_peaks: bool,
}

/// Everything needed to simulate and analyse a batch of trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default = "default_delta")]
    pub delta_t: f64,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default = "default_m_predict")]
    pub m_predict: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of `n_trials` that may be replaced after a failure.
    #[serde(default = "default_budget")]
    pub replacement_budget: f64,
    pub panel: PanelConfig,
    #[serde(default = "PopulationParams::reference")]
    pub population: PopulationParams,
    #[serde(default)]
    pub ground: GroundConfig,
    pub design: Design,
    #[serde(default)]
    pub drtox: DrtoxConfig,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub nlme: NlmeConfig,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub sampling: SamplingDesign,
    /// Untested regimens whose toxicity is predicted in every trial.
    #[serde(default)]
    pub new_regimens: Vec<RegimenSpec>,
}

fn default_delta() -> f64 {
    0.3
}
fn default_trials() -> usize {
    1000
}
fn default_m_predict() -> usize {
    1000
}
fn default_budget() -> f64 {
    0.05
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => Error::Config(format!("{}: {other}", path.display())),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every module precondition that does not need simulation.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if !(self.delta_t > 0.0 && self.delta_t < 1.0) {
            return cfg_err(format!("delta_t must lie in (0, 1), got {}", self.delta_t));
        }
        if self.n_trials == 0 || self.m_predict == 0 {
            return cfg_err("n_trials and m_predict must be positive".into());
        }
        if !(self.replacement_budget >= 0.0) {
            return cfg_err("replacement_budget must be >= 0".into());
        }
        let panel = self.panel()?;
        let k = panel.len();
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.population.validate().map_err(wrap)?;
        self.sim.validate().map_err(wrap)?;
        self.sampler.validate().map_err(wrap)?;
        self.nlme.validate().map_err(wrap)?;
        let g = &self.ground;
        match (g.tau_t, g.true_mtd) {
            (Some(t), None) if t > 0.0 => {}
            (None, Some(m)) if (1..=k).contains(&m) => {}
            _ => return cfg_err(format!("ground: give exactly one of tau_t (> 0) or true_mtd (1..={k})")),
        }
        if !(g.omega_alpha >= 0.0) || g.draws == 0 {
            return cfg_err("ground: omega_alpha must be >= 0 and draws positive".into());
        }
        if let Design::Crm(c) = &self.design {
            c.validate().map_err(wrap)?;
            if c.skeleton.len() != k {
                return cfg_err(format!(
                    "design: skeleton has {} entries for {k} regimens",
                    c.skeleton.len()
                ));
            }
        }
        let l = &self.drtox.logistic;
        if !(1..=k).contains(&l.k_t) || !(1..=k).contains(&self.drtox.hierarchical.k50) {
            return cfg_err(format!("drtox: reference regimens must lie in 1..={k}"));
        }
        if self.guesses().len() != k {
            return cfg_err(format!(
                "drtox.logistic: {} guesses for {k} regimens",
                self.guesses().len()
            ));
        }
        for (i, r) in self.new_regimens.iter().enumerate() {
            r.build(&self.panel.days, &format!("new{}", i + 1)).map_err(wrap)?;
        }
        Ok(())
    }

    pub fn panel(&self) -> Result<RegimenPanel> {
        self.panel.build().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("panel: {m}")),
            other => Error::Config(format!("panel: {other}")),
        })
    }

    pub fn new_regimens(&self) -> Result<Vec<DoseRegimen>> {
        self.new_regimens
            .iter()
            .enumerate()
            .map(|(i, r)| r.build(&self.panel.days, &format!("new{}", i + 1)))
            .collect()
    }

    fn guesses(&self) -> Vec<f64> {
        match (&self.drtox.logistic.guesses, &self.design) {
            (Some(g), _) => g.clone(),
            (None, Design::Crm(c)) => c.skeleton.clone(),
            (None, Design::ThreePlusThree) => CrmConfig::default().skeleton,
        }
    }

    /// Ground truth and the true toxicity curve (common random numbers
    /// across regimens, seeded by `ground.seed`).
    pub fn calibration(&self) -> Result<Calibration> {
        let panel = self.panel()?;
        let g = &self.ground;
        let mut rng = substream(g.seed, &[purpose::CALIBRATION]);
        let bank = PeakBank::simulate(&panel, &self.population, g.draws, &self.sim, &mut rng)?;
        match (g.tau_t, g.true_mtd) {
            (Some(tau_t), _) => {
                let ground = ToxicityGround {
                    tau_t,
                    omega_alpha: g.omega_alpha,
                };
                ground.validate()?;
                let true_curve = bank.curve(&ground);
                Ok(Calibration {
                    target_index: closest_to_target(&true_curve, self.delta_t),
                    ground,
                    delta_t: self.delta_t,
                    true_curve,
                })
            }
            (None, Some(k)) => calibrate_threshold_with_bank(&bank, g.omega_alpha, k, self.delta_t),
            (None, None) => Err(Error::Config("ground: no threshold or target".into())),
        }
    }

    /// Both DRtox priors, anchored on the reference peaks of the panel at
    /// the population fixed effects.
    pub fn priors(&self) -> Result<(LogisticPrior, HierarchicalPrior)> {
        let panel = self.panel()?;
        let refs = reference_peaks(&self.population, &panel, &self.sim)?;
        let l = &self.drtox.logistic;
        let logistic = calibrate_logistic_prior(
            &self.guesses(),
            &refs,
            l.k_t,
            self.delta_t,
            l.beta0_sd,
            l.beta1_shape,
            l.slope,
        )?;
        let h = &self.drtox.hierarchical;
        let hierarchical = HierarchicalPrior {
            mu_z_sd: h.mu_z_sd,
            tau_z_scale: h.tau_z_scale,
            ref_index: h.k50,
            ref_peak: refs[h.k50 - 1],
        };
        hierarchical.validate()?;
        Ok((logistic, hierarchical))
    }
}
