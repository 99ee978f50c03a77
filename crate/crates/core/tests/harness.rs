use drtox_core::escalation::Design;
use drtox_core::harness::*;
use drtox_core::Error;

fn scenario(name: &str) -> ScenarioConfig {
    let path = format!("{}/../../scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    ScenarioConfig::load(path).unwrap()
}

/// Scenario 1 shrunk to a size that runs in seconds.
fn small(n_trials: usize) -> ScenarioConfig {
    let mut cfg = scenario("scenario1");
    cfg.n_trials = n_trials;
    cfg.m_predict = 50;
    cfg.ground.draws = 500;
    cfg.sampler.draws = 1000;
    if let Design::Crm(c) = &mut cfg.design {
        c.n_max = 18;
    }
    cfg
}

#[test]
fn rmse_of_truth_is_zero_and_of_offset_is_offset() {
    let truth = vec![0.05, 0.1, 0.2, 0.3, 0.45, 0.6];
    let s = rmse_metrics(&[truth.clone(), truth.clone()], &truth, RmseScope::All, 4).unwrap();
    assert_eq!(s.mean, 0.0);
    assert_eq!(s.per_trial, vec![0.0, 0.0]);

    let eps = 0.07;
    let shifted: Vec<f64> = truth.iter().map(|p| p + eps).collect();
    for scope in [RmseScope::All, RmseScope::MtdNeighborhood] {
        let s = rmse_metrics(std::slice::from_ref(&shifted), &truth, scope, 4).unwrap();
        assert!((s.mean - eps).abs() < 1e-12);
        assert!((s.median - eps).abs() < 1e-12);
    }
}

#[test]
fn neighborhood_scope_uses_only_adjacent_regimens() {
    let truth = vec![0.1; 6];
    let mut est = truth.clone();
    est[0] = 0.9; // far from the true MTD at 4: ignored by the neighborhood
    est[3] = 0.4;
    let s = rmse_metrics(&[est.clone()], &truth, RmseScope::MtdNeighborhood, 4).unwrap();
    assert!((s.mean - (0.09f64 / 3.0).sqrt()).abs() < 1e-12);
    // at the edge only one neighbor exists
    let s = rmse_metrics(&[est], &truth, RmseScope::MtdNeighborhood, 1).unwrap();
    assert!((s.mean - (0.64f64 / 2.0).sqrt()).abs() < 1e-12);

    let q = rmse_metrics(&[vec![0.1; 6], vec![0.2; 6], vec![0.3; 6]], &truth, RmseScope::All, 4).unwrap();
    assert!((q.median - 0.1).abs() < 1e-12);
    assert!(q.q25 <= q.median && q.median <= q.q75);

    assert!(rmse_metrics(&[], &truth, RmseScope::All, 4).is_err());
    assert!(rmse_metrics(&[vec![0.1; 5]], &truth, RmseScope::All, 4).is_err());
    assert!(rmse_metrics(std::slice::from_ref(&truth), &truth, RmseScope::All, 7).is_err());
}

#[test]
fn shipped_scenarios_load_and_roundtrip() {
    for name in ["scenario1", "scenario3", "gap"] {
        let cfg = scenario(name);
        let again = ScenarioConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
    assert_eq!(scenario("gap").new_regimens().unwrap().len(), 1);
}

#[test]
fn config_errors_point_at_the_offending_line() {
    let text = "name = \"x\"\ndelta_t = \"high\"\n";
    match ScenarioConfig::from_toml(text) {
        Err(Error::Config(m)) => assert!(m.contains("line 2"), "{m}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    let good = scenario("scenario1").to_toml().unwrap();
    let typo = good.replacen("delta_t", "delta_tt", 1);
    assert!(matches!(ScenarioConfig::from_toml(&typo), Err(Error::Config(_))));
    let bad_delta = good.replacen("delta_t = 0.3", "delta_t = 1.5", 1);
    assert!(matches!(ScenarioConfig::from_toml(&bad_delta), Err(Error::Config(_))));
    assert!(matches!(
        ScenarioConfig::load("/nonexistent/scenario.toml"),
        Err(Error::Config(_))
    ));

    let mut cfg = scenario("scenario1");
    cfg.ground.tau_t = Some(500.0);
    assert!(cfg.validate().is_err(), "threshold and target are exclusive");
    let mut cfg = scenario("scenario1");
    if let Design::Crm(c) = &mut cfg.design {
        c.skeleton.pop();
    }
    assert!(cfg.validate().is_err());
}

#[test]
fn trial_seeds_are_distinct_per_trial_and_attempt() {
    let seeds = [
        trial_seed(7, 0, 0),
        trial_seed(7, 1, 0),
        trial_seed(7, 0, 1),
        trial_seed(8, 0, 0),
    ];
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            assert_ne!(seeds[i], seeds[j]);
        }
    }
    assert_eq!(trial_seed(7, 3, 2), trial_seed(7, 3, 2));
}

#[test]
fn all_safe_scenario_selects_the_top_regimen() {
    let mut cfg = small(1);
    cfg.ground.true_mtd = None;
    cfg.ground.tau_t = Some(1e9);
    let result = run_batch(&cfg).unwrap();
    let top = result.labels.len();
    assert!(result.true_curve.iter().all(|&p| p < 1e-6));
    assert_eq!(result.trials.len(), 1);
    for row in &result.pcs {
        assert_eq!(row.percent[top - 1], 100.0, "{:?}", row.method);
    }
    assert_eq!(result.trials[0].n_toxicities, 0);
}

#[test]
fn batch_aggregates_are_consistent() {
    let cfg = small(3);
    let result = run_batch(&cfg).unwrap();
    assert_eq!(result.trials.len(), 3);
    assert!(result.trials.iter().enumerate().all(|(i, t)| t.trial == i));
    for row in &result.pcs {
        let total = row.percent.iter().sum::<f64>() + row.no_mtd;
        assert!((total - 100.0).abs() < 1e-9, "{:?}: {total}", row.method);
    }
    let total_n: f64 = result.mean_sample_size.iter().sum();
    assert!((total_n - result.mean_n).abs() < 1e-9);
    assert_eq!(result.mean_n, 18.0);
    assert_eq!(result.rmse.len(), 6, "CRM provides its own curve");

    let again = run_batch(&cfg).unwrap();
    assert_eq!(result, again);

    let dir = tempfile::tempdir().unwrap();
    write_batch_outputs(&result, dir.path()).unwrap();
    for f in [
        "batch.json",
        "summary.json",
        "trials.csv",
        "pcs.csv",
        "sample_sizes.csv",
        "rmse.csv",
        "new_regimens.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let trials_csv = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    assert_eq!(trials_csv.lines().count(), 1 + 3 * 3 * result.labels.len());
    let reread: BatchResult =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("batch.json")).unwrap()).unwrap();
    assert_eq!(reread, result);
}

#[test]
fn failed_trials_are_replaced_and_counted() {
    let mut cfg = small(4);
    // a convergence bar this strict fails a fraction of the sampler runs
    cfg.sampler.max_rhat = 1.02;
    cfg.sampler.retries = 0;
    cfg.replacement_budget = 2.0;
    let result = run_batch(&cfg).unwrap();
    assert!(
        result.replacements > 0,
        "fixture should trigger at least one replacement"
    );
    assert_eq!(
        result.replacements,
        result.trials.iter().map(|t| t.replaced).sum::<usize>()
    );
    for t in &result.trials {
        assert_eq!(t.failures.len(), t.replaced);
        assert_eq!(t.seed, trial_seed(cfg.seed, t.trial, t.replaced));
    }
}

#[test]
fn exhausted_replacement_budget_is_a_hard_error() {
    let mut cfg = small(1);
    cfg.sampler.max_rhat = 1.000_000_1;
    cfg.sampler.retries = 0;
    cfg.replacement_budget = 0.0;
    match run_batch(&cfg) {
        Err(Error::ReplacementExhausted { failed, budget, .. }) => {
            assert_eq!(budget, 0);
            assert_eq!(failed, 1);
        }
        other => panic!("expected exhaustion, got {:?}", other.map(|r| r.replacements)),
    }
}
