use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dfc::{build_dfc, build_features, static_fc, BoldSeries, FeatureMatrices, Label, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{model_forward, FeatureDims, Model, ModelConfig, ModelInput, Variant};
use crate::numerics::{Graph, Tensor, Var};
use crate::objective::{total_loss_graph, LossWeights, WeightMode, WeightVars};
use crate::seed::mix;

/// One scan after feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub scan_id: String,
    pub label: Label,
    pub features: FeatureMatrices,
    pub static_fc: Tensor,
}

impl Sample {
    pub fn from_series(series: &BoldSeries, spec: WindowSpec) -> Result<Self> {
        let dfc = build_dfc(series, spec)?;
        Ok(Sample {
            subject_id: series.subject_id.clone(),
            scan_id: series.scan_id.clone(),
            label: series.label,
            features: build_features(&dfc)?,
            static_fc: static_fc(series)?,
        })
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims { n_rois: self.features.n_rois(), n_windows: self.features.n_windows() }
    }

    /// The input a variant is allowed to consume.
    pub fn input(&self, variant: Variant) -> ModelInput<'_> {
        match variant {
            Variant::OsFc => ModelInput::StaticFc(&self.static_fc),
            _ => ModelInput::Dynamic(&self.features),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 64,
            batch_size: 8,
            lr: 2e-6,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size must be at least 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train.lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay must be finite and non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps must be positive"));
        }
        self.loss.validate()
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState { m: Tensor::zeros(rows, cols), v: Tensor::zeros(rows, cols), step: 0 }
    }

    pub fn for_tensor(t: &Tensor) -> Self {
        AdamState::new(t.rows(), t.cols())
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·λ·θ`.
pub fn adamw_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, opt: &AdamW) {
    assert_eq!(param.shape(), grad.shape(), "adamw_step: gradient shape mismatch");
    state.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.step as i32);
    let (m, v) = (state.m.values_mut(), state.v.values_mut());
    for (i, (p, &g)) in param.values_mut().iter_mut().zip(grad.values()).enumerate() {
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= opt.lr * (m_hat / (v_hat.sqrt() + opt.eps)) + opt.lr * opt.weight_decay * *p;
    }
}

/// Shuffles sample indices with a `(seed, epoch)`-keyed generator and cuts
/// them into batches. A short final batch survives only if it holds both
/// classes and at least one same-label pair; otherwise it is folded into the
/// batch before it.
pub fn make_batches(labels: &[Label], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if batch_size < 2 {
        return Err(Error::config("batch size must be at least 2"));
    }
    let n_mci = labels.iter().filter(|&&l| l == Label::Mci).count();
    if n_mci == 0 || n_mci == labels.len() {
        return Err(Error::data("training set contains a single class; the contrastive loss needs both"));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
    order.shuffle(&mut rng);

    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 {
        let last = batches.last().expect("non-empty");
        let mci = last.iter().filter(|&&i| labels[i] == Label::Mci).count();
        let nc = last.len() - mci;
        let keep = last.len() == batch_size || (last.len() >= 2 && mci > 0 && nc > 0 && (mci >= 2 || nc >= 2));
        if !keep {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("at least one batch").extend(tail);
        }
    }
    Ok(batches)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub contrastive_loss: f64,
    pub cross_entropy: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: Model,
    pub history: TrainHistory,
    /// Final α, β (changed only in learnable mode).
    pub loss_weights: LossWeights,
}

/// Batch sums of one epoch, turned into an [`EpochRecord`] at the end.
#[derive(Default)]
struct EpochTotals {
    seen: usize,
    correct: usize,
    total: f64,
    contrastive: f64,
    cross_entropy: f64,
}

/// Trains a freshly initialised model with AdamW on the joint objective.
pub fn fit(train: &[Sample], cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<Fitted> {
    fit_from(None, train, cfg, model_cfg)
}

/// As [`fit`], optionally starting from given parameters instead of the seeded initialisation.
pub fn fit_from(start: Option<Model>, train: &[Sample], cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<Fitted> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::data("training set is empty"))?;
    let dims = first.dims();
    if let Some(bad) = train.iter().find(|s| s.dims() != dims) {
        return Err(Error::data(format!("scan {} has feature dims {:?}, expected {:?}", bad.scan_id, bad.dims(), dims)));
    }
    let mut model = match start {
        Some(m) => m,
        None => Model::init(cfg.seed, model_cfg.clone(), dims)?,
    };
    let opt = cfg.optimizer();
    let mut states: Vec<AdamState> = model.params.named().iter().map(|(_, t)| AdamState::for_tensor(t)).collect();

    let learnable = cfg.loss.mode == WeightMode::Learnable;
    let (ax, by) = cfg.loss.raw();
    let mut raw = [Tensor::scalar(ax), Tensor::scalar(by)];
    let mut raw_states = [AdamState::new(1, 1), AdamState::new(1, 1)];

    let labels: Vec<Label> = train.iter().map(|s| s.label).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let batches = make_batches(&labels, cfg.batch_size, cfg.seed, epoch)?;
        let mut totals = EpochTotals::default();
        for (b, batch) in batches.iter().enumerate() {
            let wrap = |e: Error| Error::Training { epoch, batch: b, source: Box::new(e) };
            let mut g = Graph::new();
            let vars = model.bind(&mut g).map_err(wrap)?;
            let weight_vars = if learnable {
                let alpha_raw = g.param(raw[0].clone()).map_err(wrap)?;
                let beta_raw = g.param(raw[1].clone()).map_err(wrap)?;
                WeightVars::Learnable { alpha_raw, beta_raw }
            } else {
                WeightVars::Fixed { alpha: cfg.loss.alpha, beta: cfg.loss.beta }
            };
            let batch_labels: Vec<Label> = batch.iter().map(|&i| labels[i]).collect();
            let mut embeddings = Vec::with_capacity(batch.len());
            let mut logits = Vec::with_capacity(batch.len());
            for &i in batch {
                let out = model_forward(&mut g, &vars, &model.config, train[i].input(model.config.variant)).map_err(wrap)?;
                embeddings.push(out.embedding);
                logits.push(out.logit);
            }
            let emb = g.concat_rows(&embeddings).map_err(wrap)?;
            let logit_col = g.concat_rows(&logits).map_err(wrap)?;
            let loss = total_loss_graph(&mut g, emb, logit_col, &batch_labels, cfg.loss.tau, weight_vars).map_err(wrap)?;
            g.backward(loss.total).map_err(wrap)?;

            let grads = collect_grads(&g, &vars).map_err(wrap)?;
            for (((_, param), grad), state) in model.params.named_mut().into_iter().zip(&grads).zip(&mut states) {
                adamw_step(param, grad, state, &opt);
            }
            if let WeightVars::Learnable { alpha_raw, beta_raw } = weight_vars {
                for ((r, st), v) in raw.iter_mut().zip(&mut raw_states).zip([alpha_raw, beta_raw]) {
                    adamw_step(r, &g.grad_or_zero(v), st, &opt);
                }
            }
            if !model.params.is_finite() {
                return Err(wrap(Error::NonFinite { op: "adamw_step".into() }));
            }

            let n = batch.len();
            totals.seen += n;
            totals.total += g.value(loss.total).values()[0] * n as f64;
            totals.cross_entropy += g.value(loss.cross_entropy).values()[0] * n as f64;
            if let Some(c) = loss.contrastive {
                totals.contrastive += g.value(c).values()[0] * n as f64;
            }
            totals.correct += g
                .value(logit_col)
                .values()
                .iter()
                .zip(&batch_labels)
                .filter(|(&z, &y)| Label::from_bit(z >= 0.0) == y)
                .count();
        }
        let n = totals.seen as f64;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            total_loss: totals.total / n,
            contrastive_loss: totals.contrastive / n,
            cross_entropy: totals.cross_entropy / n,
            train_accuracy: totals.correct as f64 / n,
        });
    }
    let loss_weights = if learnable { cfg.loss.from_raw(raw[0].values()[0], raw[1].values()[0]) } else { cfg.loss };
    Ok(Fitted { model, history, loss_weights })
}

/// Gradients in `named()` order; a parameter the backward pass never reached
/// is an error.
fn collect_grads(g: &Graph, vars: &crate::model::Params<Var>) -> Result<Vec<Tensor>> {
    vars.named()
        .into_iter()
        .map(|(name, &v)| {
            g.grad(v).cloned().ok_or_else(|| Error::contract(format!("parameter {name} received no gradient")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(lr: f64, wd: f64) -> AdamW {
        AdamW { lr, weight_decay: wd, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = Tensor::scalar(1.5);
        let mut st = AdamState::new(1, 1);
        adamw_step(&mut p, &Tensor::scalar(0.0), &mut st, &opt(0.01, 0.0));
        assert_eq!(p.values()[0], 1.5);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(1, 1);
        adamw_step(&mut p, &Tensor::scalar(0.0), &mut st, &opt(0.01, 0.2));
        assert!((p.values()[0] - 0.998).abs() < 1e-15);
    }

    #[test]
    fn first_step_unrolled() {
        let o = opt(1e-3, 0.0);
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(1, 1);
        adamw_step(&mut p, &Tensor::scalar(1.0), &mut st, &o);
        let m = (1.0 - 0.9) * 1.0;
        let v = (1.0 - 0.999) * 1.0;
        let m_hat = m / (1.0 - 0.9);
        let v_hat: f64 = v / (1.0 - 0.999);
        let expected = -1e-3 * (m_hat / (v_hat.sqrt() + 1e-8));
        assert!((p.values()[0] - expected).abs() < 1e-18);
        assert!((p.values()[0] + 1e-3).abs() < 1e-10);
        assert_eq!(st.step, 1);
    }

    fn alternating(n: usize) -> Vec<Label> {
        (0..n).map(|i| Label::from_bit(i % 2 == 1)).collect()
    }

    #[test]
    fn batches_partition_the_set() {
        let b = make_batches(&alternating(16), 8, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8]);
        for n in [17, 18, 19, 23, 9] {
            let b = make_batches(&alternating(n), 8, 3, 2).unwrap();
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(b.iter().all(|x| x.len() >= 2));
        }
    }

    #[test]
    fn batches_deterministic() {
        let labels = alternating(30);
        assert_eq!(make_batches(&labels, 8, 5, 4).unwrap(), make_batches(&labels, 8, 5, 4).unwrap());
        assert_ne!(make_batches(&labels, 8, 5, 4).unwrap(), make_batches(&labels, 8, 5, 5).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        assert!(make_batches(&[Label::Nc; 10], 4, 0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
    }
}
