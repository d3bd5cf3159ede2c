mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use common::label_counts;
use proptest::prelude::*;
use skinfair::ingest::{Condition, ImageRecord, Source, Tone};
use skinfair::split::{
    condition_balanced_batches, make_split_series, stratified_split, BalancePolicy, BatchPlan, Ratios,
};
use skinfair::train::Hyperparameters;

fn records(strata: &[(u8, bool, usize)]) -> Vec<ImageRecord> {
    let mut out = Vec::new();
    for &(tone, malignant, n) in strata {
        for _ in 0..n {
            out.push(ImageRecord {
                image_id: format!("img{}", out.len()),
                image_path: PathBuf::from("unused.png"),
                raw_diagnosis: String::new(),
                condition: if malignant { Condition::Malignant } else { Condition::Benign },
                tone: Tone::new(tone).unwrap(),
                source: Source::Fitzpatrick17k,
            });
        }
    }
    out
}

fn strata_strategy() -> impl Strategy<Value = Vec<(u8, bool, usize)>> {
    prop::collection::btree_map((1u8..=6, any::<bool>()), 0usize..60, 1..12)
        .prop_map(|m| m.into_iter().map(|((t, c), n)| (t, c, n)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn split_respects_ratios_and_covers_disjointly(strata in strata_strategy(), seed in any::<u64>()) {
        let recs = records(&strata);
        let ratios = Ratios::default();
        let p = stratified_split(&recs, &ratios, seed).unwrap();

        let all: Vec<usize> = p.train.iter().chain(&p.val).chain(&p.test).copied().collect();
        let unique: BTreeSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), recs.len());
        prop_assert_eq!(unique.len(), recs.len());

        let mut per: BTreeMap<(Tone, Condition), [usize; 3]> = BTreeMap::new();
        for (k, part) in [&p.train, &p.val, &p.test].into_iter().enumerate() {
            for &i in part {
                per.entry((recs[i].tone, recs[i].condition)).or_default()[k] += 1;
            }
        }
        for counts in per.values() {
            let n: usize = counts.iter().sum();
            if n < 3 {
                prop_assert_eq!(counts[0], n);
                continue;
            }
            for (c, r) in counts.iter().zip([ratios.train, ratios.val, ratios.test]) {
                prop_assert!((*c as f64 - r * n as f64).abs() <= 1.0, "{counts:?} of {n}");
            }
        }
    }

    #[test]
    fn batches_hold_equal_condition_counts(
        sizes in prop::collection::vec(1usize..150, 2..=4),
        per_class in 1usize..=16,
        undersample in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let plan = BatchPlan {
            batch_size: per_class * sizes.len(),
            policy: if undersample { BalancePolicy::Undersample } else { BalancePolicy::Oversample },
        };
        let batches = condition_balanced_batches(&labels, sizes.len(), &plan, seed).unwrap();
        prop_assert!(!batches.is_empty());
        for b in &batches {
            let counts = label_counts(b, &labels);
            prop_assert_eq!(counts.len(), sizes.len());
            prop_assert!(counts.values().all(|&c| c == per_class), "{counts:?}");
        }
        let again = condition_balanced_batches(&labels, sizes.len(), &plan, seed).unwrap();
        prop_assert_eq!(batches, again);
    }
}

#[test]
fn minority_repeats_under_oversampling() {
    let labels: Vec<usize> = std::iter::repeat_n(0, 1000).chain(std::iter::repeat_n(1, 10)).collect();
    let plan = BatchPlan::default();
    let batches = condition_balanced_batches(&labels, 2, &plan, 3).unwrap();
    for b in &batches {
        assert_eq!(label_counts(b, &labels).values().copied().collect::<Vec<_>>(), vec![32, 32]);
    }
    let minority: usize = batches.iter().map(|b| b.iter().filter(|&&i| i >= 1000).count()).sum();
    assert!(minority > 10);
}

#[test]
fn split_series_is_reproducible() {
    let recs = records(&[(1, true, 30), (2, false, 25), (5, true, 12), (6, false, 7)]);
    let a = make_split_series(&recs, 0, &Ratios::default(), false).unwrap();
    let b = make_split_series(&recs, 0, &Ratios::default(), false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seeds, vec![0, 1, 2, 3, 4]);
}

#[test]
fn learning_rate_schedule() {
    let hp = Hyperparameters::default();
    assert_eq!(hp.epochs, 10);
    for e in 0..10 {
        let expected = 0.001 * 0.1f64.powi((e / 2) as i32);
        let got = hp.learning_rate_at(e);
        assert!((got - expected).abs() <= 1e-15 * expected, "epoch {e}: {got} vs {expected}");
    }
}
