use distemb::selftest::{run_all, run_all_with};
use distemb::wasserstein::segment_integral;

#[test]
fn all_suites_pass() {
    let results = run_all();
    assert_eq!(results.len(), 6);
    for r in &results {
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }
}

#[test]
fn perturbed_integral_fails_only_the_quadrature_suite() {
    let faulty = |a: f64, b: f64, lo: f64, hi: f64, p: u32| segment_integral(a, b, lo, hi, p) * (1.0 + 1e-4);
    let results = run_all_with(faulty);
    assert!(!results[0].passed, "{}", results[0].detail);
    assert!(results[1..].iter().all(|r| r.passed));
}
