use approx::assert_abs_diff_eq;
use rand::Rng;
use rand_distr::StandardNormal;

use drtox_core::mcmc::*;
use drtox_core::rng::substream;

fn gaussian(x: &[f64; 2]) -> f64 {
    // correlated bivariate normal, means (1, -2), sds (1, 0.5), rho 0.8
    let (a, b) = ((x[0] - 1.0) / 1.0, (x[1] + 2.0) / 0.5);
    -(a * a - 1.6 * a * b + b * b) / (2.0 * (1.0 - 0.64))
}

#[test]
fn recovers_correlated_gaussian() {
    let s = sample(
        "test",
        gaussian,
        [0.0, 0.0],
        [1.0, 1.0],
        &SamplerSettings::default(),
        11,
    )
    .unwrap();
    assert_eq!(s.draws.len(), 4000);
    let m0 = s.draws.iter().map(|x| x[0]).sum::<f64>() / 4000.0;
    let m1 = s.draws.iter().map(|x| x[1]).sum::<f64>() / 4000.0;
    assert_abs_diff_eq!(m0, 1.0, epsilon = 0.12);
    assert_abs_diff_eq!(m1, -2.0, epsilon = 0.06);
    let d = &s.diagnostics;
    assert!(d.max_rhat() < 1.05);
    assert!(d.min_ess() > 300.0, "{d:?}");
    for a in &d.acceptance {
        assert!(*a > 0.15 && *a < 0.5, "{a}");
    }
}

#[test]
fn deterministic_for_seed() {
    let a = sample("t", gaussian, [0.0, 0.0], [1.0, 1.0], &SamplerSettings::default(), 5).unwrap();
    let b = sample("t", gaussian, [0.0, 0.0], [1.0, 1.0], &SamplerSettings::default(), 5).unwrap();
    assert_eq!(a.draws, b.draws);
}

#[test]
fn disjoint_chains_fail_rhat() {
    let chains = vec![
        vec![0.0, 0.1, -0.1, 0.05, 0.0, 0.02],
        vec![5.0, 5.1, 4.9, 5.0, 5.05, 4.95],
    ];
    assert!(split_rhat(&chains) > 1.5);
}

#[test]
fn ess_of_iid_is_near_n() {
    let mut rng = substream(3, &[]);
    let chains: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let ess = effective_sample_size(&chains);
    assert!(ess > 3000.0 && ess < 5500.0, "{ess}");
    assert!((split_rhat(&chains) - 1.0).abs() < 0.01);
}

#[test]
fn rejects_invalid_start() {
    let r = sample(
        "t",
        |_: &[f64; 1]| f64::NEG_INFINITY,
        [0.0],
        [1.0],
        &SamplerSettings::default(),
        1,
    );
    assert!(r.is_err());
}
