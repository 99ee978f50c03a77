use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drtox_core::drtox::{Model, PosteriorDraws};
use drtox_core::harness::ScenarioConfig;
use drtox_core::integrate::*;
use drtox_core::mcmc::Diagnostics;
use drtox_core::nlme::NlmeFit;
use drtox_core::pkpd::{reference_peaks, PopulationParams, SimSettings};
use drtox_core::regimen::RegimenPanel;
use drtox_core::stats::{expit, ks_two_sample, logit};
use drtox_core::toxgen::PeakBank;

fn scenario_panel(name: &str) -> RegimenPanel {
    let path = format!("{}/../../scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    ScenarioConfig::load(path).unwrap().panel().unwrap()
}

/// A fit whose population is exactly `pop`.
fn fit_at(pop: &PopulationParams) -> NlmeFit {
    NlmeFit {
        mu_hat: pop.mu,
        omega_hat: pop.omega,
        b_pk: pop.b_pk,
        b_pd: pop.b_pd,
        theta_hat: Vec::new(),
        failed: Vec::new(),
        converged: true,
        iterations: 0,
        objective_trace: Vec::new(),
    }
}

fn draws(model: Model, params: Vec<[f64; 2]>, ref_peak: f64) -> PosteriorDraws {
    PosteriorDraws {
        model,
        params,
        chains: 1,
        ref_peak,
        diagnostics: Diagnostics {
            rhat: Vec::new(),
            ess: Vec::new(),
            acceptance: Vec::new(),
        },
    }
}

#[test]
fn degenerate_population_gives_the_reference_peak() {
    let panel = scenario_panel("scenario1");
    let pop = PopulationParams::reference().without_variability();
    let sim = SimSettings::default();
    let reference = reference_peaks(&pop, &panel, &sim).unwrap();
    let fit = fit_at(&pop);
    for (k, regimen) in panel.regimens().iter().enumerate() {
        let peaks = predict_peak_distribution(&fit, regimen, 5, &sim, 11).unwrap();
        assert_eq!(peaks.len(), 5);
        assert!(
            peaks.iter().all(|&p| p == reference[k]),
            "regimen {k}: {peaks:?} vs {}",
            reference[k]
        );
    }
    let one = predict_peak_distribution(&fit, &panel.regimens()[0], 1, &sim, 11).unwrap();
    assert_eq!(one.len(), 1);
    assert!(predict_peak_distribution(&fit, &panel.regimens()[0], 0, &sim, 11).is_err());
}

#[test]
fn predicted_peaks_match_ground_truth_simulator() {
    let panel = scenario_panel("scenario1");
    let pop = PopulationParams::reference();
    let sim = SimSettings::default();
    let regimen = &panel.regimens()[3];
    let predicted = predict_peak_distribution(&fit_at(&pop), regimen, 2000, &sim, 3).unwrap();
    let single = RegimenPanel::new(vec![regimen.clone()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let bank = PeakBank::simulate(&single, &pop, 2000, &sim, &mut rng).unwrap();
    let d = ks_two_sample(&predicted, &bank.max_peaks[0]);
    assert!(d < 0.05, "KS distance {d}");
}

#[test]
fn single_draw_at_reference_peak_returns_intercept_probability() {
    let d = draws(Model::Logistic, vec![[logit(0.3), 1.0]], 800.0);
    let p = posterior_toxicity(&d, &[800.0], "S").unwrap();
    assert!((p.mean - 0.3).abs() < 1e-12);
    assert_eq!(p.draws.len(), 1);
}

#[test]
fn cross_product_size_and_summary_invariants() {
    let params: Vec<[f64; 2]> = (0..40)
        .map(|i| [-1.0 + 0.02 * i as f64, 0.5 + 0.05 * i as f64])
        .collect();
    let peaks: Vec<f64> = (0..25).map(|j| 300.0 + 40.0 * j as f64).collect();
    for model in [Model::Logistic, Model::Hierarchical] {
        let d = draws(model, params.clone(), 700.0);
        let p = posterior_toxicity(&d, &peaks, "S").unwrap();
        assert_eq!(p.draws.len(), params.len() * peaks.len());
        assert!(p.draws.iter().all(|x| (0.0..=1.0).contains(x)));
        let mean = p.draws.iter().sum::<f64>() / p.draws.len() as f64;
        assert!((p.mean - mean).abs() < 1e-15);
        let (lo, hi) = p.credible_interval;
        assert!(lo <= p.mean && p.mean <= hi);

        // permutation invariance of the mean
        let mut rev_params = params.clone();
        rev_params.reverse();
        let mut rev_peaks = peaks.clone();
        rev_peaks.rotate_left(7);
        let q = posterior_toxicity(&draws(model, rev_params, 700.0), &rev_peaks, "S").unwrap();
        assert!((p.mean - q.mean).abs() < 1e-12);

        // pointwise larger peaks give a larger mean when every slope is positive
        let higher: Vec<f64> = peaks.iter().map(|r| r * 1.2).collect();
        let labels = vec!["low".to_string(), "high".to_string()];
        let curve = posterior_tox_curve(&d, &[peaks.clone(), higher], &labels).unwrap();
        assert!(curve[0].mean < curve[1].mean);
        assert_eq!(curve[1].regimen_label, "high");
    }
}

#[test]
fn logistic_cross_product_matches_direct_sum() {
    let params = vec![[-0.5, 1.5], [0.2, 3.0], [-1.0, 0.7]];
    let peaks = [500.0, 900.0];
    let d = draws(Model::Logistic, params.clone(), 700.0);
    let p = posterior_toxicity(&d, &peaks, "S").unwrap();
    let mut total = 0.0;
    for [a, b] in &params {
        for r in peaks {
            total += expit(a + b * (r / 700.0f64).ln());
        }
    }
    assert!((p.mean - total / 6.0).abs() < 1e-14);
}

#[test]
fn invalid_inputs_are_rejected() {
    let d = draws(Model::Logistic, vec![[0.0, 1.0]], 700.0);
    assert!(posterior_toxicity(&d, &[], "S").is_err());
    assert!(posterior_toxicity(&d, &[100.0, 0.0], "S").is_err());
    assert!(posterior_toxicity(&draws(Model::Logistic, vec![], 700.0), &[100.0], "S").is_err());
    assert!(posterior_tox_curve(&d, &[vec![100.0]], &[]).is_err());
}

#[test]
fn mtd_selection_rules() {
    let means = [0.1, 0.28, 0.5];
    assert_eq!(select_mtd(&means, &[1, 2, 3], 0.3).unwrap(), 2);
    assert_eq!(select_mtd(&means, &[1], 0.3).unwrap(), 1);
    assert_eq!(select_mtd(&[0.25, 0.35], &[1, 2], 0.3).unwrap(), 1);
    assert_eq!(select_mtd(&[0.25, 0.35], &[2, 1], 0.3).unwrap(), 1);
    assert_eq!(select_mtd(&means, &[3, 1], 0.3).unwrap(), 1);
    assert!(select_mtd(&means, &[], 0.3).is_err());
    assert!(select_mtd(&means, &[0], 0.3).is_err());
    assert!(select_mtd(&means, &[4], 0.3).is_err());
}

#[test]
fn panel_regimen_as_new_regimen_reproduces_curve_entry() {
    let panel = scenario_panel("scenario1");
    let pop = PopulationParams::reference();
    let fit = fit_at(&pop);
    let sim = SimSettings::default();
    let seed = 21;
    let samples = panel_peak_samples(&fit, &panel, 50, &sim, seed).unwrap();
    let labels: Vec<String> = panel.regimens().iter().map(|r| r.label().to_string()).collect();
    let d = draws(Model::Hierarchical, vec![[-0.8, 0.6], [-0.6, 0.4], [-1.0, 0.9]], 900.0);
    let curve = posterior_tox_curve(&d, &samples, &labels).unwrap();
    for (k, regimen) in panel.regimens().iter().enumerate() {
        let renamed = regimen.clone().with_label("new");
        let p = predict_new_regimen(&fit, &d, &renamed, 50, &sim, seed).unwrap();
        assert_eq!(p.mean, curve[k].mean);
        assert_eq!(p.regimen_label, "new");
    }
    // monotone panel on a monotone model
    assert!(curve.windows(2).all(|w| w[0].mean <= w[1].mean));
}

#[test]
fn curve_csv_flags_administered_and_selected() {
    let curve = vec![
        ToxicityEstimate {
            label: "S1".into(),
            mean: 0.1,
            lower: 0.05,
            upper: 0.2,
        },
        ToxicityEstimate {
            label: "S2".into(),
            mean: 0.3,
            lower: 0.2,
            upper: 0.4,
        },
    ];
    let mut buf = Vec::new();
    write_curve_csv(&curve, &[1, 2], Some(2), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "regimen,label,p_tox,lower,upper,administered,selected");
    assert_eq!(lines[1], "1,S1,0.1,0.05,0.2,true,false");
    assert_eq!(lines[2], "2,S2,0.3,0.2,0.4,true,true");
}
