//! Scenarios, batch simulation of trials and operating characteristics.

mod batch;
mod config;
mod metrics;
mod output;

pub use batch::{
    analyze_dataset, run_batch, run_batch_prepared, run_one_trial, trial_seed, BatchResult, Method, PcsRow, RmseRow,
    Scenario, TrialAnalysis, TrialRecord,
};
pub use config::{
    DrtoxConfig, GroundConfig, HierarchicalSettings, LogisticSettings, PanelConfig, RegimenSpec, ScenarioConfig,
};
pub use metrics::{rmse_metrics, RmseScope, RmseSummary};
pub use output::{write_batch_outputs, write_report, write_trials_csv};
