mod common;

use common::{oracle_balanced_accuracy, oracle_eom, oracle_pqd, random_predictions, records_from_counts, welford};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skinfair::metrics::{
    aggregate_splits, balanced_accuracy, compute_eom, compute_pqd, fairness_report, group_balanced_accuracy,
    tpr_table, MetricOptions,
};

#[test]
fn random_prediction_sets_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..300 {
        let preds = random_predictions(&mut rng);
        let eom = compute_eom(&tpr_table(&preds)).unwrap();
        let bas: Vec<_> = group_balanced_accuracy(&preds, 1).into_values().collect();
        let pqd = compute_pqd(&bas).unwrap();
        let ba = balanced_accuracy(&preds, None).unwrap();
        assert!((eom - oracle_eom(&preds)).abs() <= 1e-9, "case {case}");
        assert!((pqd - oracle_pqd(&preds)).abs() <= 1e-9, "case {case}");
        assert!((ba - oracle_balanced_accuracy(&preds, None).unwrap()).abs() <= 1e-9, "case {case}");
        assert!((0.0..=1.0).contains(&eom) && (0.0..=1.0).contains(&pqd));
    }
}

#[test]
fn report_agrees_with_individual_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let preds = random_predictions(&mut rng);
    let r = fairness_report(&preds, &MetricOptions::default());
    assert_eq!(r.n, preds.len());
    assert!((r.eom.unwrap() - oracle_eom(&preds)).abs() <= 1e-12);
    assert!((r.pqd.unwrap() - oracle_pqd(&preds)).abs() <= 1e-12);
}

#[test]
fn two_by_two_eom_fixture() {
    // TPRs: class 1 (0.9, 0.6), class 0 (0.5, 0.5).
    let preds = records_from_counts(&[(1, 1, 9, 10), (1, 2, 6, 10), (0, 1, 5, 10), (0, 2, 5, 10)]);
    let table = tpr_table(&preds);
    assert_eq!(table.get(1, 1), Some(0.9));
    assert_eq!(table.get(1, 2), Some(0.6));
    let eom = compute_eom(&table).unwrap();
    assert!((eom - 0.8333).abs() < 1e-4, "{eom}");
}

#[test]
fn eom_is_invariant_to_uniform_tpr_scaling() {
    let full = records_from_counts(&[(1, 1, 8, 10), (1, 2, 4, 10), (0, 1, 6, 10), (0, 2, 3, 10)]);
    let half = records_from_counts(&[(1, 1, 4, 10), (1, 2, 2, 10), (0, 1, 3, 10), (0, 2, 3, 20)]);
    let a = compute_eom(&tpr_table(&full)).unwrap();
    let b = compute_eom(&tpr_table(&half)).unwrap();
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    let p = compute_pqd(&[Some(0.8), Some(0.6)]).unwrap();
    let q = compute_pqd(&[Some(0.4), Some(0.3)]).unwrap();
    assert!((p - q).abs() <= 1e-12);
}

#[test]
fn pqd_fixtures() {
    assert!((compute_pqd(&[Some(0.8), Some(0.6)]).unwrap() - 0.75).abs() < 1e-4);
    assert!((compute_pqd(&[None, Some(0.9), Some(0.45)]).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(compute_pqd(&[Some(0.7), Some(0.7), Some(0.7)]).unwrap(), 1.0);
}

#[test]
fn aggregation_matches_welford() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let n = rand::Rng::random_range(&mut rng, 1..=8usize);
        let values: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let got = aggregate_splits(&values).unwrap();
        let (mean, std) = welford(&values);
        assert!((got.mean - mean).abs() <= 1e-12);
        assert_eq!(got.n, n);
        match (got.std, std) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
            (None, None) => {}
            other => panic!("std mismatch {other:?}"),
        }
    }
    assert_eq!(aggregate_splits(&[0.7, 0.8, 0.9]).unwrap().display(), "0.80 ± 0.10");
}
