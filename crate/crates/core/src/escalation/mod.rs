//! Dose-escalation designs allocating cohorts over a regimen panel.

mod crm;
mod three_plus_three;
mod trial;

pub use crm::{closest_among, crm_next, crm_posterior, CrmConfig, CrmPosterior};
pub use three_plus_three::{three_plus_three_step, Decision, LevelCount};
pub use trial::{run_trial, simulate_patient, CohortLog, Design, PatientRecord, TrialDataset, TrialSetup};
