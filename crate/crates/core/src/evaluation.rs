//! Subject-level cross-validation and its metrics, plus the ablation runner. MCI is the positive class throughout.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dfc::Label;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::numerics::sigmoid;
use crate::objective::LossWeights;
use crate::seed::mix;
use crate::training::{fit, EpochRecord, Sample, TrainConfig};

/// Fold assignment of every subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn test_subjects(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment.iter().filter(|&(_, &f)| f == fold).map(|(s, _)| s.as_str()).collect()
    }

    pub fn train_subjects(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment.iter().filter(|&(_, &f)| f != fold).map(|(s, _)| s.as_str()).collect()
    }

    /// Indices of `samples` on the training and test side of `fold`.
    pub fn partition(&self, fold: usize, samples: &[Sample]) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let f = self
                .assignment
                .get(&s.subject_id)
                .ok_or_else(|| Error::data(format!("subject {} has no fold assignment", s.subject_id)))?;
            if *f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, test))
    }
}

/// Unique subjects with their label; scans of one subject must agree.
pub fn subjects_of(samples: &[Sample]) -> Result<Vec<(String, Label)>> {
    let mut seen: BTreeMap<&str, Label> = BTreeMap::new();
    for s in samples {
        match seen.get(s.subject_id.as_str()) {
            Some(&l) if l != s.label => {
                return Err(Error::data(format!("subject {} has scans with different labels", s.subject_id)));
            }
            Some(_) => {}
            None => {
                seen.insert(&s.subject_id, s.label);
            }
        }
    }
    Ok(seen.into_iter().map(|(s, l)| (s.to_string(), l)).collect())
}

/// Stratified subject-level split: each class is shuffled with its own seed
/// stream and dealt round-robin over the folds.
pub fn kfold_split(subjects: &[(String, Label)], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::config(format!("cross-validation needs at least 2 folds, got {k}")));
    }
    let mut assignment = BTreeMap::new();
    let mut offset = 0;
    for (class_idx, label) in [Label::Nc, Label::Mci].into_iter().enumerate() {
        let mut ids: Vec<&str> = subjects.iter().filter(|(_, l)| *l == label).map(|(s, _)| s.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < k {
            return Err(Error::data(format!("{} {label} subjects is fewer than {k} folds", ids.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, class_idx as u64));
        ids.shuffle(&mut rng);
        for (pos, id) in ids.iter().enumerate() {
            if assignment.insert(id.to_string(), (pos + offset) % k).is_some() {
                return Err(Error::data(format!("subject {id} appears with both labels")));
            }
        }
        offset = (offset + ids.len()) % k;
    }
    Ok(FoldSplit { k, assignment })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Undefined ratios (zero denominators) are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub acc: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        let total = c.total();
        if total == 0 {
            return Err(Error::contract("metrics of an empty prediction set"));
        }
        Ok(Metrics {
            acc: (c.tp + c.tn) as f64 / total as f64,
            sen: ratio(c.tp, c.tp + c.fn_),
            spe: ratio(c.tn, c.tn + c.fp),
            auc: None,
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            confusion: c,
        })
    }
}

pub fn confusion_metrics(predictions: &[Label], labels: &[Label]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape { op: "confusion_metrics", lhs: (predictions.len(), 1), rhs: (labels.len(), 1) });
    }
    let mut c = Confusion::default();
    for (p, y) in predictions.iter().zip(labels) {
        match (p, y) {
            (Label::Mci, Label::Mci) => c.tp += 1,
            (Label::Nc, Label::Nc) => c.tn += 1,
            (Label::Mci, Label::Nc) => c.fp += 1,
            (Label::Nc, Label::Mci) => c.fn_ += 1,
        }
    }
    Metrics::from_confusion(c)
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half, via the Mann-Whitney rank sum with averaged tie ranks.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape { op: "auc", lhs: (scores.len(), 1), rhs: (labels.len(), 1) });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("auc scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l == Label::Mci).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract("auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps averaged tie ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged: (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u64;
        let pos_in_tie = order[i..=j].iter().filter(|&&o| labels[o] == Label::Mci).count() as u64;
        twice_rank_sum += twice_avg * pos_in_tie;
        i = j + 1;
    }
    let np = n_pos as u64;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub scan_id: String,
    pub subject_id: String,
    pub label: Label,
    pub logit: f64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub train_scans: usize,
    pub test_scans: usize,
    pub metrics: Metrics,
    pub loss_weights: LossWeights,
    pub predictions: Vec<Prediction>,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricValues {
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvResult {
    pub variant: Variant,
    pub k: usize,
    pub seed: u64,
    pub split: FoldSplit,
    pub folds: Vec<FoldResult>,
    pub mean: MetricValues,
    pub std: MetricValues,
}

fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return (None, None);
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let std = (defined.len() > 1)
        .then(|| (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Unweighted mean and sample standard deviation across folds, skipping
/// folds where a metric is undefined.
pub fn aggregate(folds: &[FoldResult]) -> (MetricValues, MetricValues) {
    let pick = |f: fn(&Metrics) -> Option<f64>| mean_std(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    let (acc_m, acc_s) = pick(|m| Some(m.acc));
    let (sen_m, sen_s) = pick(|m| m.sen);
    let (spe_m, spe_s) = pick(|m| m.spe);
    let (auc_m, auc_s) = pick(|m| m.auc);
    let (f1_m, f1_s) = pick(|m| m.f1);
    (
        MetricValues { acc: acc_m, sen: sen_m, spe: spe_m, auc: auc_m, f1: f1_m },
        MetricValues { acc: acc_s, sen: sen_s, spe: spe_s, auc: auc_s, f1: f1_s },
    )
}

fn run_fold(
    fold: usize,
    split: &FoldSplit,
    samples: &[Sample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<FoldResult> {
    let (train_idx, test_idx) = split.partition(fold, samples)?;
    if test_idx.is_empty() {
        return Err(Error::data("empty test fold"));
    }
    let train: Vec<Sample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let seed = mix(train_cfg.seed, 1000 + fold as u64);
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let fitted = fit(&train, &cfg, model_cfg)?;

    let mut predictions = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        let s = &samples[i];
        let (logit, _) = fitted.model.predict(s.input(model_cfg.variant))?;
        predictions.push(Prediction {
            scan_id: s.scan_id.clone(),
            subject_id: s.subject_id.clone(),
            label: s.label,
            logit,
            probability: sigmoid(logit),
        });
    }
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    let predicted: Vec<Label> = predictions.iter().map(|p| Label::from_bit(p.probability >= 0.5)).collect();
    let logits: Vec<f64> = predictions.iter().map(|p| p.logit).collect();
    let mut metrics = confusion_metrics(&predicted, &labels)?;
    metrics.auc = auc(&logits, &labels).ok();

    Ok(FoldResult {
        fold,
        seed,
        train_subjects: split.train_subjects(fold).len(),
        test_subjects: split.test_subjects(fold).len(),
        train_scans: train_idx.len(),
        test_scans: test_idx.len(),
        metrics,
        loss_weights: fitted.loss_weights,
        predictions,
        history: fitted.history.epochs,
    })
}

/// Cross-validates one model configuration on a precomputed split. Folds run
/// in parallel and are reported in fold order.
pub fn run_cv_with_split(
    samples: &[Sample],
    split: &FoldSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<CvResult> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let folds: Vec<FoldResult> = (0..split.k)
        .into_par_iter()
        .map(|fold| {
            run_fold(fold, split, samples, model_cfg, train_cfg)
                .map_err(|e| Error::Fold { fold, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let (mean, std) = aggregate(&folds);
    Ok(CvResult { variant: model_cfg.variant, k: split.k, seed, split: split.clone(), folds, mean, std })
}

pub fn run_cv(samples: &[Sample], model_cfg: &ModelConfig, train_cfg: &TrainConfig, k: usize, seed: u64) -> Result<CvResult> {
    let split = kfold_split(&subjects_of(samples)?, k, seed)?;
    run_cv_with_split(samples, &split, model_cfg, train_cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<CvResult>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&CvResult> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Runs every variant on the same folds with the same per-fold seeds.
pub fn run_ablation(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    k: usize,
    seed: u64,
    variants: &[Variant],
) -> Result<AblationTable> {
    let split = kfold_split(&subjects_of(samples)?, k, seed)?;
    let rows = variants
        .par_iter()
        .map(|&v| run_cv_with_split(samples, &split, &model_cfg.with_variant(v), train_cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Mci, Nc};

    fn subjects(n_nc: usize, n_mci: usize) -> Vec<(String, Label)> {
        (0..n_nc).map(|i| (format!("nc{i}"), Nc)).chain((0..n_mci).map(|i| (format!("mci{i}"), Mci))).collect()
    }

    #[test]
    fn exact_division_gives_one_per_class_per_fold() {
        let subs = subjects(5, 5);
        let split = kfold_split(&subs, 5, 3).unwrap();
        for f in 0..5 {
            let test = split.test_subjects(f);
            assert_eq!(test.len(), 2);
            assert_eq!(test.iter().filter(|s| s.starts_with("nc")).count(), 1);
        }
    }

    #[test]
    fn too_few_subjects_rejected() {
        assert!(kfold_split(&subjects(4, 10), 5, 0).is_err());
        assert!(kfold_split(&subjects(5, 5), 1, 0).is_err());
    }

    #[test]
    fn confusion_example() {
        let c = Confusion { tp: 3, tn: 4, fp: 1, fn_: 2 };
        let m = Metrics::from_confusion(c).unwrap();
        assert!((m.acc - 0.7).abs() < 1e-15);
        assert!((m.sen.unwrap() - 0.6).abs() < 1e-15);
        assert!((m.spe.unwrap() - 0.8).abs() < 1e-15);
        assert!((m.f1.unwrap() - 6.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_all_negative_predictions() {
        let labels = [Mci, Nc, Mci, Nc];
        let m = confusion_metrics(&labels, &labels).unwrap();
        assert_eq!((m.acc, m.sen, m.spe, m.f1), (1.0, Some(1.0), Some(1.0), Some(1.0)));
        let m = confusion_metrics(&[Nc; 4], &labels).unwrap();
        assert_eq!((m.sen, m.spe), (Some(0.0), Some(1.0)));
        let m = confusion_metrics(&[Nc; 2], &[Nc; 2]).unwrap();
        assert_eq!((m.sen, m.f1), (None, None));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[Nc, Nc, Mci, Mci]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[Nc, Mci, Nc, Mci]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[Nc, Nc, Mci, Mci]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[Nc, Nc]).is_err());
    }

    #[test]
    fn mean_std_skips_undefined() {
        let (m, s) = mean_std(&[Some(1.0), None, Some(3.0)]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[None]), (None, None));
    }
}
