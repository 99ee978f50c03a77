//! Estimation-error summaries of toxicity curves.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::stats::quantile;

/// Regimens over which the error is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseScope {
    All,
    /// The true MTD-regimen and its immediate neighbors.
    MtdNeighborhood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    /// One value per curve, in input order.
    pub per_trial: Vec<f64>,
}

/// Root mean square error of each estimated curve against the truth.
///
/// `true_mtd` is 1-based and only used by [`RmseScope::MtdNeighborhood`].
pub fn rmse_metrics(curves: &[Vec<f64>], truth: &[f64], scope: RmseScope, true_mtd: usize) -> Result<RmseSummary> {
    if curves.is_empty() {
        return invalid("no curves to summarize");
    }
    if true_mtd == 0 || true_mtd > truth.len() {
        return invalid(format!("true MTD index {true_mtd} outside 1..={}", truth.len()));
    }
    let indices: Vec<usize> = match scope {
        RmseScope::All => (0..truth.len()).collect(),
        RmseScope::MtdNeighborhood => {
            let k = true_mtd - 1;
            (k.saturating_sub(1)..=(k + 1).min(truth.len() - 1)).collect()
        }
    };
    let per_trial = curves
        .iter()
        .map(|c| {
            if c.len() != truth.len() {
                return invalid(format!("curve has {} entries, truth {}", c.len(), truth.len()));
            }
            let sq = indices.iter().map(|&i| (c[i] - truth[i]).powi(2)).sum::<f64>() / indices.len() as f64;
            Ok(sq.sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RmseSummary {
        mean: per_trial.iter().sum::<f64>() / per_trial.len() as f64,
        q25: quantile(&per_trial, 0.25),
        median: quantile(&per_trial, 0.5),
        q75: quantile(&per_trial, 0.75),
        per_trial,
    })
}
