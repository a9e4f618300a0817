mod common;

use scancad::embedspace::confusion_score;

#[test]
fn metrics_match_brute_force() {
    for (metric, mismatches) in common::metric_oracle_trials(120, 7) {
        assert_eq!(mismatches, 0, "{metric}");
    }
}

#[test]
fn confusion_fixtures() {
    assert_eq!(confusion_score(&common::segregated_fixture(), 3).unwrap(), 0.0);
    assert!((confusion_score(&common::balanced_fixture(), 2).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn loss_fixtures() {
    for (name, ok) in common::loss_unit_values() {
        assert!(ok, "{name}");
    }
}
