//! CSV and JSON files written for a batch.
//!
//! | file | content |
//! |------|---------|
//! | `batch.json` | the full [`BatchResult`], re-readable by `report` |
//! | `summary.json` | aggregates only (no per-trial records) |
//! | `trials.csv` | long format: one row per trial × method × regimen |
//! | `pcs.csv` | selection percentages per method and regimen |
//! | `sample_sizes.csv` | mean number of patients per regimen |
//! | `rmse.csv` | RMSE summaries per method and scope |
//! | `new_regimens.csv` | predictions for untested regimens, per trial |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::batch::{BatchResult, Method};
use crate::error::Result;

#[derive(Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    design: &'a str,
    seed: u64,
    n_trials: usize,
    labels: &'a [String],
    tau_t: f64,
    true_curve: &'a [f64],
    true_mtd: usize,
    replacements: usize,
    pcs: &'a [super::batch::PcsRow],
    mean_sample_size: &'a [f64],
    mean_n: f64,
    rmse: Vec<RmseEntry>,
}

#[derive(Serialize)]
struct RmseEntry {
    method: Method,
    scope: super::metrics::RmseScope,
    mean: f64,
    q25: f64,
    median: f64,
    q75: f64,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes every batch output file into `dir` (created if missing).
pub fn write_batch_outputs(result: &BatchResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = create(dir, "batch.json")?;
    serde_json::to_writer_pretty(&mut f, result)?;
    f.flush()?;
    write_report(result, dir)?;
    write_trials_csv(result, create(dir, "trials.csv")?)?;
    Ok(())
}

/// Aggregate files derivable from a [`BatchResult`].
pub fn write_report(result: &BatchResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let summary = Summary {
        scenario: &result.scenario,
        design: &result.design,
        seed: result.seed,
        n_trials: result.n_trials,
        labels: &result.labels,
        tau_t: result.tau_t,
        true_curve: &result.true_curve,
        true_mtd: result.true_mtd,
        replacements: result.replacements,
        pcs: &result.pcs,
        mean_sample_size: &result.mean_sample_size,
        mean_n: result.mean_n,
        rmse: result
            .rmse
            .iter()
            .map(|r| RmseEntry {
                method: r.method,
                scope: r.scope,
                mean: r.summary.mean,
                q25: r.summary.q25,
                median: r.summary.median,
                q75: r.summary.q75,
            })
            .collect(),
    };
    let mut f = create(dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.flush()?;

    let mut w = csv::Writer::from_writer(create(dir, "pcs.csv")?);
    let mut header = vec!["method".to_string()];
    header.extend(result.labels.iter().cloned());
    header.extend(["no_mtd".to_string(), "correct".to_string()]);
    w.write_record(&header)?;
    for row in &result.pcs {
        let mut rec = vec![row.method.name().to_string()];
        rec.extend(row.percent.iter().map(|p| p.to_string()));
        rec.extend([row.no_mtd.to_string(), row.correct.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(dir, "sample_sizes.csv")?);
    w.write_record(["regimen", "label", "mean_patients", "true_p_tox"])?;
    for (k, (label, n)) in result.labels.iter().zip(&result.mean_sample_size).enumerate() {
        w.write_record([
            (k + 1).to_string(),
            label.clone(),
            n.to_string(),
            result.true_curve[k].to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(dir, "rmse.csv")?);
    w.write_record(["method", "scope", "mean", "q25", "median", "q75"])?;
    for r in &result.rmse {
        let scope = match r.scope {
            super::metrics::RmseScope::All => "all",
            super::metrics::RmseScope::MtdNeighborhood => "mtd_neighborhood",
        };
        w.write_record([
            r.method.name().to_string(),
            scope.to_string(),
            r.summary.mean.to_string(),
            r.summary.q25.to_string(),
            r.summary.median.to_string(),
            r.summary.q75.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(dir, "new_regimens.csv")?);
    w.write_record(["trial", "label", "method", "p_tox", "lower", "upper"])?;
    for t in &result.trials {
        for (l, h) in &t.new_regimens {
            for (m, e) in [("logistic", l), ("hierarchical", h)] {
                w.write_record([
                    t.trial.to_string(),
                    e.label.clone(),
                    m.to_string(),
                    e.mean.to_string(),
                    e.lower.to_string(),
                    e.upper.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per trial, method and regimen.
pub fn write_trials_csv<W: Write>(result: &BatchResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "trial",
        "seed",
        "replaced",
        "method",
        "regimen",
        "label",
        "p_tox",
        "lower",
        "upper",
        "n_patients",
        "selected",
    ])?;
    for t in &result.trials {
        for m in Method::ALL {
            let curve: Vec<(String, String, String)> = match m {
                Method::Design => match &t.design_curve {
                    Some(c) => c
                        .iter()
                        .map(|p| (p.to_string(), String::new(), String::new()))
                        .collect(),
                    None => vec![(String::new(), String::new(), String::new()); result.labels.len()],
                },
                Method::Logistic => t
                    .logistic_curve
                    .iter()
                    .map(|e| (e.mean.to_string(), e.lower.to_string(), e.upper.to_string()))
                    .collect(),
                Method::Hierarchical => t
                    .hierarchical_curve
                    .iter()
                    .map(|e| (e.mean.to_string(), e.lower.to_string(), e.upper.to_string()))
                    .collect(),
            };
            for (k, (label, (p, lo, hi))) in result.labels.iter().zip(curve).enumerate() {
                w.write_record([
                    t.trial.to_string(),
                    t.seed.to_string(),
                    t.replaced.to_string(),
                    m.name().to_string(),
                    (k + 1).to_string(),
                    label.clone(),
                    p,
                    lo,
                    hi,
                    t.sample_sizes[k].to_string(),
                    (t.selection(m) == Some(k + 1)).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
