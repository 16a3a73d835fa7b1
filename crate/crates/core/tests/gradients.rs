use std::time::Instant;

use cmn_core::gradcheck::{standard_suite, SUITE};

#[test]
fn every_family_matches_finite_differences() {
    let start = Instant::now();
    let report = standard_suite(20, 7).unwrap();
    assert_eq!(report.len(), SUITE.len());
    for entry in &report {
        assert!(entry.passed(), "{entry:?}");
        assert!(entry.checked >= 20, "{entry:?}");
    }
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());
}

#[test]
fn suite_is_seed_dependent_but_reproducible() {
    let a = standard_suite(2, 1).unwrap();
    let b = standard_suite(2, 1).unwrap();
    let c = standard_suite(2, 2).unwrap();
    let key = |v: &[cmn_core::gradcheck::SuiteEntry]| v.iter().map(|e| (e.checked, e.max_rel_error.to_bits())).collect::<Vec<_>>();
    assert_eq!(key(&a), key(&b));
    assert_ne!(key(&a), key(&c));
}
