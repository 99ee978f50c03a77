use approx::assert_abs_diff_eq;

use drtox_core::optim::*;

#[test]
fn golden_section_finds_quadratic_min() {
    let (x, v) = golden_section_min(|x| (x - 1.3).powi(2) + 2.0, -5.0, 5.0, 1e-10);
    assert_abs_diff_eq!(x, 1.3, epsilon = 1e-7);
    assert_abs_diff_eq!(v, 2.0, epsilon = 1e-12);
    let (x, _) = golden_section_max(|x| -(x - 0.25).abs(), 0.0, 1.0, 1e-12);
    assert_abs_diff_eq!(x, 0.25, epsilon = 1e-9);
}

#[test]
fn bisection_brackets() {
    let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-14, 200).unwrap();
    assert_abs_diff_eq!(r, 2f64.sqrt(), epsilon = 1e-12);
    assert!(bisect(|x| x * x + 1.0, -1.0, 1.0, 1e-12, 100).is_none());
}
