//! `drtox`: simulate dose-escalation trials, fit the PK/PD and toxicity
//! models, predict untested regimens and run batches of trials.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use drtox_core::drtox::PosteriorDraws;
use drtox_core::escalation::{run_trial, TrialDataset};
use drtox_core::harness::{
    analyze_dataset, run_batch_prepared, trial_seed, write_batch_outputs, write_report, BatchResult, Scenario,
    ScenarioConfig,
};
use drtox_core::integrate::{predict_new_regimen, write_curve_csv, ToxicityEstimate};
use drtox_core::nlme::NlmeFit;
use drtox_core::pkpd::SimSettings;
use drtox_core::regimen::DoseRegimen;
use drtox_core::rng::{derive_seed, purpose};
use drtox_core::toxgen::Calibration;
use drtox_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "drtox",
    version,
    about = "Dose-regimen toxicity modelling from PK/PD-informed escalation trials"
)]
struct Cli {
    /// Scenario file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the scenario's `seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one escalation trial and write `dataset.json`.
    SimulateTrial {
        /// Trial index within the master seed's stream.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Fit the PK/PD model and both toxicity models to a trial dataset.
    Fit {
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
    },
    /// Predict the toxicity of a regimen from the output of `fit`.
    Predict {
        /// Directory holding `fit.json` and the posterior draws (default: --out).
        #[arg(long, value_name = "DIR")]
        fit: Option<PathBuf>,
        #[command(flatten)]
        regimen: RegimenArgs,
    },
    /// Calibrate the toxicity threshold of a scenario and print the true curve.
    Calibrate,
    /// Run the scenario's batch of trials and write operating characteristics.
    Batch {
        /// Overrides the scenario's `n_trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Rewrite the summary files from an existing `batch.json`.
    Report {
        #[arg(long, value_name = "PATH")]
        batch: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RegimenArgs {
    /// Comma-separated doses (µg/kg), one per administration.
    #[arg(long, value_delimiter = ',', required = true)]
    doses: Vec<f64>,
    /// Comma-separated administration days (default: the scenario panel's days, or 1, 5, 9, …).
    #[arg(long, value_delimiter = ',')]
    days: Option<Vec<f64>>,
    #[arg(long, default_value = "new")]
    label: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::ReplacementExhausted { .. } => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::SimulateTrial { trial } => simulate_trial(cli, *trial),
        Command::Fit { dataset } => fit(cli, dataset),
        Command::Predict { fit, regimen } => predict(cli, fit.as_deref().unwrap_or(&cli.out), regimen),
        Command::Calibrate => calibrate(cli),
        Command::Batch { trials } => batch(cli, *trials),
        Command::Report { batch } => report(cli, batch),
    }
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Error> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Error> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn simulate_trial(cli: &Cli, trial: usize) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let scenario = Scenario::prepare(&cfg)?;
    let seed = trial_seed(cfg.seed, trial, 0);
    let dataset = run_trial(&cfg.design, &scenario.setup(), &cfg.sampler, seed)?;
    write_json(&cli.out, "dataset.json", &dataset)?;
    let toxic = dataset.patients.iter().filter(|p| p.outcome.global).count();
    println!(
        "{} patients, {toxic} toxicities, sample sizes {:?}, recommendation {}",
        dataset.patients.len(),
        dataset.sample_sizes(),
        dataset.recommendation.map_or("none".to_string(), |k| format!("S{k}")),
    );
    Ok(())
}

#[derive(Serialize)]
struct FitSummary<'a> {
    seed: u64,
    nlme_converged: bool,
    nlme_iterations: usize,
    failed_patients: &'a [usize],
    administered: &'a [usize],
    logistic_selection: usize,
    hierarchical_selection: usize,
    logistic_curve: &'a [ToxicityEstimate],
    hierarchical_curve: &'a [ToxicityEstimate],
}

fn fit(cli: &Cli, dataset_path: &Path) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let dataset: TrialDataset = read_json(dataset_path)?;
    let scenario = Scenario::prepare(&cfg)?;
    let a = analyze_dataset(&scenario, &dataset, cfg.seed)?;
    let out = &cli.out;
    fs::write(out_path(out, "fit.json")?, a.fit.to_json()?)?;
    write_json(out, "logistic_draws.json", &a.logistic)?;
    write_json(out, "hierarchical_draws.json", &a.hierarchical)?;
    a.logistic.write_csv(create(out, "logistic_draws.csv")?)?;
    a.hierarchical.write_csv(create(out, "hierarchical_draws.csv")?)?;
    let administered = &dataset.administered_set;
    write_curve_csv(
        &a.logistic_curve,
        administered,
        Some(a.logistic_selection),
        create(out, "curve_logistic.csv")?,
    )?;
    write_curve_csv(
        &a.hierarchical_curve,
        administered,
        Some(a.hierarchical_selection),
        create(out, "curve_hierarchical.csv")?,
    )?;
    write_json(
        out,
        "fit_summary.json",
        &FitSummary {
            seed: cfg.seed,
            nlme_converged: a.fit.converged,
            nlme_iterations: a.fit.iterations,
            failed_patients: &a.fit.failed,
            administered,
            logistic_selection: a.logistic_selection,
            hierarchical_selection: a.hierarchical_selection,
            logistic_curve: &a.logistic_curve,
            hierarchical_curve: &a.hierarchical_curve,
        },
    )?;
    println!("regimen  logistic  hierarchical");
    for (l, h) in a.logistic_curve.iter().zip(&a.hierarchical_curve) {
        println!("{:<8} {:>8.3}  {:>12.3}", l.label, l.mean, h.mean);
    }
    println!(
        "selected: logistic S{}, hierarchical S{}",
        a.logistic_selection, a.hierarchical_selection
    );
    Ok(())
}

fn out_path(dir: &Path, name: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

#[derive(Serialize)]
struct Prediction {
    regimen: DoseRegimen,
    m_predict: usize,
    logistic: ToxicityEstimate,
    hierarchical: ToxicityEstimate,
}

fn predict(cli: &Cli, fit_dir: &Path, args: &RegimenArgs) -> Result<(), Error> {
    let (cfg_days, m_predict, sim, seed) = match &cli.config {
        Some(_) => {
            let cfg = load_config(cli)?;
            (Some(cfg.panel.days.clone()), cfg.m_predict, cfg.sim, cfg.seed)
        }
        None => (None, 1000, SimSettings::default(), cli.seed.unwrap_or(0)),
    };
    let days = match (&args.days, cfg_days) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) if d.len() == args.doses.len() => d,
        _ => (0..args.doses.len()).map(|j| 1.0 + 4.0 * j as f64).collect(),
    };
    let regimen = DoseRegimen::from_days(args.doses.clone(), &days, args.label.as_str())?;
    let fit = NlmeFit::from_json(&fs::read_to_string(fit_dir.join("fit.json"))?)?;
    let logistic: PosteriorDraws = read_json(&fit_dir.join("logistic_draws.json"))?;
    let hierarchical: PosteriorDraws = read_json(&fit_dir.join("hierarchical_draws.json"))?;
    // same new-patient stream as the curves written by `fit`
    let predict_seed = derive_seed(seed, &[purpose::PREDICT]);
    let l = predict_new_regimen(&fit, &logistic, &regimen, m_predict, &sim, predict_seed)?.estimate();
    let h = predict_new_regimen(&fit, &hierarchical, &regimen, m_predict, &sim, predict_seed)?.estimate();
    println!("{} {}", regimen.label(), regimen.dose_string());
    for (name, e) in [("logistic", &l), ("hierarchical", &h)] {
        println!(
            "  {name:<12} p_tox {:.3}  95% CrI [{:.3}, {:.3}]",
            e.mean, e.lower, e.upper
        );
    }
    write_json(
        &cli.out,
        "prediction.json",
        &Prediction {
            regimen,
            m_predict,
            logistic: l,
            hierarchical: h,
        },
    )?;
    Ok(())
}

fn calibrate(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let calibration: Calibration = cfg.calibration()?;
    write_json(&cli.out, "calibration.json", &calibration)?;
    println!(
        "tau_t = {:.4}  (omega_alpha = {})",
        calibration.ground.tau_t, calibration.ground.omega_alpha
    );
    let labels = cfg.panel()?.labels();
    for (k, (label, p)) in labels.iter().zip(&calibration.true_curve).enumerate() {
        let mark = if k + 1 == calibration.target_index {
            "  <- MTD-regimen"
        } else {
            ""
        };
        println!("{label:<8} p_T = {p:.4}{mark}");
    }
    Ok(())
}

fn batch(cli: &Cli, trials: Option<usize>) -> Result<(), Error> {
    let mut cfg = load_config(cli)?;
    if let Some(n) = trials {
        cfg.n_trials = n;
    }
    let scenario = Scenario::prepare(&cfg)?;
    let result = run_batch_prepared(&scenario)?;
    write_batch_outputs(&result, &cli.out)?;
    print_summary(&result);
    Ok(())
}

fn report(cli: &Cli, batch_path: &Path) -> Result<(), Error> {
    let result: BatchResult = read_json(batch_path)?;
    write_report(&result, &cli.out)?;
    print_summary(&result);
    Ok(())
}

fn print_summary(r: &BatchResult) {
    println!(
        "{}: {} trials, design {}, tau_t {:.2}, true MTD-regimen {}, {} replaced",
        r.scenario,
        r.n_trials,
        r.design,
        r.tau_t,
        r.labels[r.true_mtd - 1],
        r.replacements
    );
    print!("{:<13}", "");
    for l in &r.labels {
        print!("{l:>7}");
    }
    println!("{:>8}", "none");
    print!("{:<13}", "true p_T");
    for p in &r.true_curve {
        print!("{p:>7.3}");
    }
    println!();
    for row in &r.pcs {
        print!("{:<13}", row.method.name());
        for p in &row.percent {
            print!("{p:>7.1}");
        }
        println!("{:>8.1}", row.no_mtd);
    }
    print!("{:<13}", "patients");
    for n in &r.mean_sample_size {
        print!("{n:>7.1}");
    }
    println!("{:>8.1}", r.mean_n);
}
