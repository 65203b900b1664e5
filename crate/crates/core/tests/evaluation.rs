//! Metrics against a brute-force recount, the vote tie-break chain, fold
//! and ensemble subset bookkeeping, and small end-to-end CV and ensemble
//! runs.

use std::collections::BTreeSet;

use ecgnet::evaluation::{
    accuracies, build_ensemble, cross_validate, ensemble_predict, f1_avg, f1_class, majority_vote, ConfusionMatrix,
    MetricsReport,
};
use ecgnet::network::ModelConfig;
use ecgnet::signal_io::{stratified_partition, Dataset, EcgRecord, Label};
use ecgnet::synthetic::{generate, SyntheticConfig};
use ecgnet::training::TrainConfig;
use proptest::prelude::*;

fn label() -> impl Strategy<Value = Label> {
    (0..4usize).prop_map(|i| Label::from_index(i).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_a_recount_of_raw_pairs(pairs in prop::collection::vec((label(), label()), 0..300)) {
        let cm = ConfusionMatrix::from_pairs(pairs.iter().copied());
        let report = MetricsReport::from_confusion(&cm);
        let count = |f: &dyn Fn(&(Label, Label)) -> bool| pairs.iter().filter(|p| f(p)).count();
        let mut f1 = [0.0; 4];
        for c in Label::ALL {
            let hits = count(&|&(t, p)| t == c && p == c);
            let truths = count(&|&(t, _)| t == c);
            let preds = count(&|&(_, p)| p == c);
            f1[c.index()] = if truths + preds == 0 { 0.0 } else { 2.0 * hits as f64 / (truths + preds) as f64 };
            let recall = if truths == 0 { 0.0 } else { hits as f64 / truths as f64 };
            prop_assert_eq!(f1_class(&cm, c), f1[c.index()]);
            prop_assert_eq!(report.accuracy[c.index()], recall);
        }
        prop_assert_eq!(report.f1_avg, (f1[0] + f1[1] + f1[2]) / 3.0);
        prop_assert_eq!(f1_avg(&cm), report.f1_avg);
        let correct = count(&|&(t, p)| t == p);
        let overall = if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 };
        prop_assert_eq!(accuracies(&cm).overall, overall);
    }

    #[test]
    fn noisy_bookkeeping_does_not_move_f1_avg(pairs in prop::collection::vec((label(), label()), 1..200)) {
        // Confusions among noisy records only and their order are invisible
        // to F1_avg.
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let noisy_only = |v: &[(Label, Label)]| {
            v.iter().filter(|(t, p)| *t != Label::Noisy || *p != Label::Noisy).copied().collect::<Vec<_>>()
        };
        let a = ConfusionMatrix::from_pairs(pairs.iter().copied());
        let b = ConfusionMatrix::from_pairs(noisy_only(&shuffled));
        prop_assert_eq!(f1_avg(&a), f1_avg(&b));
    }
}

#[test]
fn two_two_one_tie_goes_to_larger_summed_probability() {
    let votes = [
        vec![0.60, 0.20, 0.10, 0.10],
        vec![0.60, 0.20, 0.10, 0.10],
        vec![0.15, 0.55, 0.20, 0.10],
        vec![0.15, 0.55, 0.20, 0.10],
        vec![0.11, 0.08, 0.71, 0.10],
    ];
    let sums: Vec<f64> = (0..4).map(|c| votes.iter().map(|v| v[c]).sum()).collect();
    assert!((sums[0] - 1.61).abs() < 1e-12 && (sums[1] - 1.58).abs() < 1e-12);
    let v = majority_vote(&votes);
    assert_eq!(v.votes, [Label::Normal, Label::Normal, Label::Af, Label::Af, Label::Other]);
    assert_eq!(v.label, Label::Normal);

    // Shift probability mass from N to A inside the N voters: A now wins.
    let mut swapped = votes.clone();
    for v in &mut swapped[..2] {
        v[0] = 0.50;
        v[1] = 0.30;
    }
    assert_eq!(majority_vote(&swapped).label, Label::Af);
}

fn corpus(records: usize, seed: u64) -> Dataset {
    let config = SyntheticConfig {
        records,
        min_duration_s: 3.0,
        max_duration_s: 5.0,
        ..SyntheticConfig::default()
    };
    generate(&config, seed).unwrap()
}

fn class_count(ds: &Dataset, ids: &BTreeSet<String>, c: Label) -> usize {
    ids.iter().filter(|id| ds.get(id).unwrap().label == Some(c)).count()
}

#[test]
fn ensemble_subsets_partition_and_training_sets_cover() {
    let ds = corpus(53, 1);
    let all: BTreeSet<String> = ds.records.iter().map(|r| r.id.clone()).collect();
    let subsets = stratified_partition(&ds, 5, 4).unwrap();
    let mut union = BTreeSet::new();
    let mut train_union = BTreeSet::new();
    for i in 0..5 {
        let val = subsets.test_ids(i);
        assert!(union.is_disjoint(&val));
        union.extend(val.iter().cloned());
        let train = subsets.training_portion(i);
        assert!(train.is_disjoint(&val));
        for c in [Label::Normal, Label::Af] {
            let expected = ds.class_counts.get(c) as f64 * 4.0 / 5.0;
            let got = class_count(&ds, &train, c) as f64;
            assert!((got - expected).abs() <= 1.0, "member {i} {c}: {got} vs {expected}");
        }
        train_union.extend(train);
    }
    assert_eq!(union, all);
    assert_eq!(train_union, all);
}

fn tiny() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        layers_per_block: 2,
        ..ModelConfig::cnn()
    }
    .with_scale(0.0625)
}

fn quick() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        patience_epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn cross_validation_scores_every_record_once() {
    let ds = corpus(18, 2);
    let serial = cross_validate::<f32>(&tiny(), &quick(), &ds, 3, 5, false).unwrap();
    let ids: Vec<&str> = serial.predictions.iter().map(|p| p.id.as_str()).collect();
    let expected: Vec<&str> = ds.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, expected);
    let mut merged = ConfusionMatrix::new();
    for f in &serial.folds {
        merged.merge(&f.report.confusion);
        assert_eq!(f.n_train + f.n_val + f.n_test, ds.len());
        assert!(!f.histories.is_empty() && f.histories[0].epochs.len() <= 2);
    }
    assert_eq!(merged, serial.pooled.confusion);

    let parallel = cross_validate::<f32>(&tiny(), &quick(), &ds, 3, 5, true).unwrap();
    assert_eq!(parallel, serial);
}

#[test]
fn ensemble_votes_are_seed_deterministic() {
    let ds = corpus(15, 3);
    let records: Vec<&EcgRecord> = ds.records.iter().collect();
    let run = |parallel: bool| {
        let members = build_ensemble::<f32>(&tiny(), &quick(), &ds, 3, 6, parallel).unwrap();
        let mut union = BTreeSet::new();
        for m in &members {
            assert!(m.val_ids.is_disjoint(&m.train_ids));
            union.extend(m.val_ids.iter().cloned());
        }
        assert_eq!(union.len(), ds.len());
        let mut models: Vec<_> = members.into_iter().map(|m| m.model).collect();
        ensemble_predict(&mut models, &records, &quick().preprocess, 4).unwrap()
    };
    let votes = run(false);
    assert_eq!(votes.len(), records.len());
    assert!(votes.iter().all(|v| v.votes.len() == 3));
    assert_eq!(run(false), votes);
    assert_eq!(run(true), votes);
}
