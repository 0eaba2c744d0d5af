mod common;

use common::brute_force_auc;
use dfcformer::dfc::{FeatureMatrices, Label};
use dfcformer::evaluation::{
    aggregate, auc, confusion_metrics, kfold_split, run_ablation, run_cv, subjects_of, Confusion, Metrics,
};
use dfcformer::model::{ModelConfig, Variant};
use dfcformer::numerics::Tensor;
use dfcformer::training::{Sample, TrainConfig};
use dfcformer::Error;
use num_rational::Ratio;
use num_traits::ToPrimitive;
use proptest::prelude::*;
use std::collections::BTreeSet;
use Label::{Mci, Nc};

fn subjects(n_nc: usize, n_mci: usize) -> Vec<(String, Label)> {
    (0..n_nc).map(|i| (format!("nc{i:02}"), Nc)).chain((0..n_mci).map(|i| (format!("mci{i:02}"), Mci))).collect()
}

#[test]
fn kfold_examples() {
    let split = kfold_split(&subjects(5, 5), 5, 3).unwrap();
    for f in 0..5 {
        let test = split.test_subjects(f);
        assert_eq!(test.len(), 2);
        assert_eq!(test.iter().filter(|s| s.starts_with("mci")).count(), 1);
    }
    let sixty = kfold_split(&subjects(30, 30), 5, 0).unwrap();
    for f in 0..5 {
        assert_eq!(sixty.test_subjects(f).len(), 12);
    }
    assert!(matches!(kfold_split(&subjects(4, 10), 5, 0), Err(Error::Data(_))));
    assert!(matches!(kfold_split(&subjects(10, 10), 1, 0), Err(Error::Config(_))));
    assert_eq!(kfold_split(&subjects(9, 7), 3, 42).unwrap(), kfold_split(&subjects(9, 7), 3, 42).unwrap());
}

#[test]
fn confusion_examples() {
    let m = confusion_metrics(&[Mci, Nc, Mci, Nc], &[Mci, Nc, Mci, Nc]).unwrap();
    assert_eq!((m.acc, m.sen, m.spe, m.f1), (1.0, Some(1.0), Some(1.0), Some(1.0)));
    let m = confusion_metrics(&[Nc, Nc, Nc], &[Mci, Nc, Mci]).unwrap();
    assert_eq!((m.sen, m.spe), (Some(0.0), Some(1.0)));
    let m = Metrics::from_confusion(Confusion { tp: 3, tn: 4, fp: 1, fn_: 2 }).unwrap();
    assert!((m.acc - 0.7).abs() < 1e-15);
    assert!((m.sen.unwrap() - 0.6).abs() < 1e-15);
    assert!((m.spe.unwrap() - 0.8).abs() < 1e-15);
    assert!((m.f1.unwrap() - 6.0 / 9.0).abs() < 1e-15);
    // No negatives: specificity is undefined rather than 0/0.
    assert_eq!(confusion_metrics(&[Mci], &[Mci]).unwrap().spe, None);
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[Nc, Nc, Mci, Mci]).unwrap(), 1.0);
    assert_eq!(auc(&[0.5; 6], &[Nc, Mci, Nc, Mci, Nc, Mci]).unwrap(), 0.5);
    assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[Nc, Nc, Mci, Mci]).unwrap(), 0.75);
    assert!(auc(&[0.1, 0.2], &[Nc, Nc]).is_err());
}

fn constant_feature_samples(n_per_group: usize, scans: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    for (g, label) in [Nc, Mci].into_iter().enumerate() {
        for s in 0..n_per_group {
            for k in 0..scans {
                // The label flips the sign pattern across ROIs; a pure rescaling
                // would be cancelled by layer normalization.
                let sign = if label == Mci { 1.0 } else { -1.0 };
                let jitter = 0.01 * (s * scans + k) as f64;
                let values = (0..48)
                    .map(|i| {
                        let (t, j) = (i / 6, i % 6);
                        let alt = if j % 2 == 0 { 1.0 } else { -1.0 };
                        sign * alt * 0.5 + 0.02 * t as f64 + jitter
                    })
                    .collect();
                let temporal = Tensor::from_vec(8, 6, values).unwrap();
                let mut fc = Tensor::identity(6);
                fc.set(0, 1, 0.5 * sign);
                fc.set(1, 0, 0.5 * sign);
                out.push(Sample {
                    subject_id: format!("g{g}s{s:02}"),
                    scan_id: format!("g{g}s{s:02}_{k}"),
                    label,
                    features: FeatureMatrices { spatial: temporal.transpose(), temporal },
                    static_fc: fc,
                });
            }
        }
    }
    out
}

#[test]
fn label_leaked_into_input_is_learned_perfectly() {
    let samples = constant_feature_samples(10, 1);
    let train = TrainConfig { epochs: 25, lr: 3e-3, ..TrainConfig::default() };
    let cv = run_cv(&samples, &ModelConfig::default(), &train, 5, 0).unwrap();
    assert_eq!(cv.folds.len(), 5);
    for f in &cv.folds {
        assert_eq!(f.metrics.acc, 1.0, "fold {}", f.fold);
        assert_eq!(f.test_scans, 4);
    }
    assert_eq!(cv.mean.acc, Some(1.0));
    assert_eq!(cv.std.acc, Some(0.0));
}

#[test]
fn cv_keeps_subjects_whole_and_is_deterministic() {
    let samples = constant_feature_samples(5, 2);
    let train = TrainConfig { epochs: 2, lr: 1e-3, ..TrainConfig::default() };
    let a = run_cv(&samples, &ModelConfig::default(), &train, 5, 7).unwrap();
    let b = run_cv(&samples, &ModelConfig::default(), &train, 5, 7).unwrap();
    assert_eq!(a, b);
    for f in &a.folds {
        assert_eq!(f.test_scans, 4);
        let test_subjects: BTreeSet<&str> = f.predictions.iter().map(|p| p.subject_id.as_str()).collect();
        assert_eq!(test_subjects.len(), 2);
        let (train_idx, _) = a.split.partition(f.fold, &samples).unwrap();
        assert!(train_idx.iter().all(|&i| !test_subjects.contains(samples[i].subject_id.as_str())));
    }
    let (mean, _) = aggregate(&a.folds);
    assert_eq!(mean, a.mean);
}

#[test]
fn ablation_shares_folds_and_seeds() {
    let samples = constant_feature_samples(5, 1);
    let train = TrainConfig { epochs: 1, lr: 1e-3, ..TrainConfig::default() };
    let table = run_ablation(&samples, &ModelConfig::default(), &train, 5, 3, &Variant::ALL).unwrap();
    assert_eq!(table.rows.len(), 4);
    let reference = &table.row(Variant::Full).unwrap();
    for row in &table.rows {
        assert_eq!(row.split, reference.split);
        let seeds: Vec<u64> = row.folds.iter().map(|f| f.seed).collect();
        assert_eq!(seeds, reference.folds.iter().map(|f| f.seed).collect::<Vec<_>>());
    }
}

#[test]
fn conflicting_subject_labels_are_rejected() {
    let mut samples = constant_feature_samples(3, 1);
    samples[0].subject_id = samples[4].subject_id.clone();
    assert!(matches!(subjects_of(&samples), Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metric_identities(tp in 0usize..50, tn in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        prop_assume!(tp + tn + fp + fn_ > 0);
        let m = Metrics::from_confusion(Confusion { tp, tn, fp, fn_ }).unwrap();
        let r = |n: usize, d: usize| (d > 0).then(|| Ratio::new(n as i64, d as i64).to_f64().unwrap());
        prop_assert_eq!(Some(m.acc), r(tp + tn, tp + tn + fp + fn_));
        prop_assert_eq!(m.sen, r(tp, tp + fn_));
        prop_assert_eq!(m.spe, r(tn, tn + fp));
        prop_assert_eq!(m.f1, r(2 * tp, 2 * tp + fp + fn_));
        prop_assert_eq!(m.confusion.total(), tp + tn + fp + fn_);
    }

    #[test]
    fn split_is_a_stratified_partition(n_nc in 3usize..25, n_mci in 3usize..25, k in 2usize..4, seed in any::<u64>()) {
        let subs = subjects(n_nc, n_mci);
        let split = kfold_split(&subs, k, seed).unwrap();
        let mut union = BTreeSet::new();
        for f in 0..k {
            let test = split.test_subjects(f);
            let train = split.train_subjects(f);
            prop_assert!(test.is_disjoint(&train));
            prop_assert_eq!(test.len() + train.len(), subs.len());
            union.extend(test);
        }
        prop_assert_eq!(union.len(), subs.len());
        for class in ["nc", "mci"] {
            let sizes: Vec<usize> = (0..k).map(|f| split.test_subjects(f).iter().filter(|s| s.starts_with(class)).count()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn auc_equals_pair_counting(
        data in prop::collection::vec((0u8..12, any::<bool>()), 2..200)
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 4.0).collect();
        let labels: Vec<Label> = data.iter().map(|(_, b)| Label::from_bit(*b)).collect();
        let both = labels.contains(&Nc) && labels.contains(&Mci);
        match auc(&scores, &labels) {
            Ok(a) => { prop_assert!(both); prop_assert_eq!(a, brute_force_auc(&scores, &labels)); }
            Err(_) => prop_assert!(!both),
        }
    }
}
