use approx::assert_abs_diff_eq;

use drtox_core::stats::*;

#[test]
fn normal_cdf_reference_values() {
    assert_abs_diff_eq!(norm_cdf(0.0), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(norm_cdf(1.959963984540054), 0.975, epsilon = 1e-10);
    assert_abs_diff_eq!(norm_ppf(0.975), 1.959963984540054, epsilon = 1e-10);
    assert!(norm_sf(10.0) > 0.0 && norm_sf(10.0) < 1e-22);
}

#[test]
fn interval_uses_stable_tail() {
    let p = norm_interval(8.0, 9.0);
    assert!(p > 6.0e-16 && p < 6.3e-16, "{p}");
    assert_eq!(norm_interval(1.0, 1.0), 0.0);
}

#[test]
fn logistic_helpers() {
    assert_abs_diff_eq!(expit(logit(0.3)), 0.3, epsilon = 1e-15);
    assert_abs_diff_eq!(ln_expit(-800.0), -800.0, epsilon = 1e-9);
    assert_abs_diff_eq!(ln_expit(2.0), expit(2.0).ln(), epsilon = 1e-14);
}

#[test]
fn quantiles_match_type7() {
    let xs = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
    assert_abs_diff_eq!(quantile(&xs, 0.5), 3.5, epsilon = 1e-12);
    assert_abs_diff_eq!(quantile(&xs, 0.0), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(quantile(&xs, 1.0), 9.0, epsilon = 1e-12);
    assert_abs_diff_eq!(quantile(&xs, 0.25), 1.75, epsilon = 1e-12);
}

#[test]
fn beta_matching_uniform() {
    let (a, b) = beta_moment_match(0.5, 1.0 / 12.0).unwrap();
    assert_abs_diff_eq!(a, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(b, 1.0, epsilon = 1e-12);
    assert!(beta_moment_match(0.5, 0.0).is_none());
    assert!(beta_moment_match(0.5, 0.25).is_none());
}

#[test]
fn ks_distances() {
    let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
    assert!(ks_one_sample(&xs, |x| x.clamp(0.0, 1.0)) < 1e-3 + 1e-12);
    assert_eq!(ks_two_sample(&xs, &xs), 0.0);
    let shifted: Vec<f64> = xs.iter().map(|x| x + 0.1).collect();
    assert_abs_diff_eq!(ks_two_sample(&xs, &shifted), 0.1, epsilon = 2e-3);
}
