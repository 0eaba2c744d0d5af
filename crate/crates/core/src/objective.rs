//! Supervised contrastive loss over diagnosis-defined pairs, binary
//! cross-entropy, and their weighted sum.
//!
//! Plain-value functions are used for reporting and as references; the
//! `*_graph` variants build the same quantities on a [`Graph`] for training.

use serde::{Deserialize, Serialize};

use crate::dfc::Label;
use crate::error::{Error, Result};
use crate::numerics::{bce_term, contrastive_nll_value, softplus, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Fixed,
    /// `α = softplus(x)`, `β = softplus(y)` with `x, y` optimized.
    Learnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub mode: WeightMode,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, mode: WeightMode::Learnable, tau: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) {
            return Err(Error::config("loss.alpha and loss.beta must be finite and non-negative"));
        }
        if self.mode == WeightMode::Learnable && (self.alpha == 0.0 || self.beta == 0.0) {
            return Err(Error::config("learnable loss weights must start strictly positive"));
        }
        Ok(())
    }

    /// Free parameters `(x, y)` with `softplus(x) = α`, `softplus(y) = β`.
    pub fn raw(&self) -> (f64, f64) {
        (inverse_softplus(self.alpha), inverse_softplus(self.beta))
    }

    /// Weights implied by free parameters.
    pub fn from_raw(&self, x: f64, y: f64) -> LossWeights {
        LossWeights { alpha: softplus(x), beta: softplus(y), ..*self }
    }
}

fn inverse_softplus(v: f64) -> f64 {
    // ln(e^v − 1), rewritten to stay accurate for large v.
    v + (-(-v).exp_m1()).ln()
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape { op: "cosine_sim", lhs: (1, u.len()), rhs: (1, v.len()) });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::contract("cosine similarity of a zero-norm vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `mask[i][j]` is true iff `i ≠ j` and both carry the same diagnosis.
pub fn pair_mask(labels: &[Label]) -> Vec<Vec<bool>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, a)| labels.iter().enumerate().map(|(j, b)| i != j && a == b).collect())
        .collect()
}

/// Positive indices per anchor.
pub fn positives(labels: &[Label]) -> Vec<Vec<usize>> {
    pair_mask(labels)
        .into_iter()
        .map(|row| row.into_iter().enumerate().filter_map(|(j, m)| m.then_some(j)).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveValue {
    pub value: f64,
    /// Number of (anchor, positive) terms averaged.
    pub pairs: usize,
    /// Anchors without any positive in the batch.
    pub skipped_anchors: usize,
}

/// Mean over (anchor i, positive p) of
/// `−log( exp(d(V_i,V_p)/τ) / Σ_{k≠i} exp(d(V_i,V_k)/τ) )`.
pub fn contrastive_loss(batch: &BatchEmbeddings, tau: f64) -> Result<ContrastiveValue> {
    let b = batch.embeddings.len();
    if b < 2 || batch.labels.len() != b {
        return Err(Error::contract(format!("contrastive loss needs at least 2 labelled embeddings, got {b}")));
    }
    let mut sim = Tensor::identity(b);
    for i in 0..b {
        for j in (i + 1)..b {
            let s = cosine_sim(&batch.embeddings[i], &batch.embeddings[j])?;
            sim.set(i, j, s);
            sim.set(j, i, s);
        }
    }
    let pos = positives(&batch.labels);
    let skipped_anchors = pos.iter().filter(|p| p.is_empty()).count();
    let (value, pairs) = contrastive_nll_value(&sim, &pos, tau)?;
    Ok(ContrastiveValue { value, pairs, skipped_anchors })
}

/// Mean binary cross-entropy of `sigmoid(logit)` in the stable logit form.
pub fn cross_entropy(logits: &[f64], labels: &[Label]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape { op: "cross_entropy", lhs: (logits.len(), 1), rhs: (labels.len(), 1) });
    }
    Ok(logits.iter().zip(labels).map(|(&z, y)| bce_term(z, y.as_f64())).sum::<f64>() / logits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: f64,
    pub cross_entropy: f64,
}

/// `α · contrastive + β · cross-entropy`. The contrastive term is skipped
/// entirely when `α = 0`.
pub fn total_loss(batch: &BatchEmbeddings, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let ce = cross_entropy(&batch.logits, &batch.labels)?;
    let contrastive = if weights.alpha == 0.0 { 0.0 } else { contrastive_loss(batch, weights.tau)?.value };
    Ok(LossBreakdown { total: weights.alpha * contrastive + weights.beta * ce, contrastive, cross_entropy: ce })
}

/// Contrastive loss of the rows of `embeddings` (B × dim).
pub fn contrastive_loss_graph(g: &mut Graph, embeddings: Var, labels: &[Label], tau: f64) -> Result<Var> {
    if g.shape(embeddings).0 != labels.len() || labels.len() < 2 {
        return Err(Error::contract(format!(
            "contrastive loss needs one label per embedding row (B >= 2), got {} rows and {} labels",
            g.shape(embeddings).0,
            labels.len()
        )));
    }
    let unit = g.row_l2_normalize(embeddings)?;
    let unit_t = g.transpose(unit)?;
    let sim = g.matmul(unit, unit_t)?;
    g.contrastive_nll(sim, positives(labels), tau)
}

pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[Label]) -> Result<Var> {
    let y: Vec<f64> = labels.iter().map(|l| l.as_f64()).collect();
    g.bce_with_logits(logits, &y)
}

/// How `α` and `β` enter the graph.
#[derive(Clone, Copy, Debug)]
pub enum WeightVars {
    Fixed { alpha: f64, beta: f64 },
    /// Leaves holding the free parameters behind `α` and `β`.
    Learnable { alpha_raw: Var, beta_raw: Var },
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub contrastive: Option<Var>,
    pub cross_entropy: Var,
}

pub fn total_loss_graph(
    g: &mut Graph,
    embeddings: Var,
    logits: Var,
    labels: &[Label],
    tau: f64,
    weights: WeightVars,
) -> Result<LossVars> {
    let ce = cross_entropy_graph(g, logits, labels)?;
    let (contrastive, total) = match weights {
        WeightVars::Fixed { alpha, beta } => {
            let weighted_ce = g.scale(ce, beta)?;
            if alpha == 0.0 {
                (None, weighted_ce)
            } else {
                let c = contrastive_loss_graph(g, embeddings, labels, tau)?;
                let weighted_c = g.scale(c, alpha)?;
                (Some(c), g.add(weighted_c, weighted_ce)?)
            }
        }
        WeightVars::Learnable { alpha_raw, beta_raw } => {
            let c = contrastive_loss_graph(g, embeddings, labels, tau)?;
            let alpha = g.softplus(alpha_raw)?;
            let beta = g.softplus(beta_raw)?;
            let weighted_c = g.mul(alpha, c)?;
            let weighted_ce = g.mul(beta, ce)?;
            (Some(c), g.add(weighted_c, weighted_ce)?)
        }
    };
    Ok(LossVars { total, contrastive, cross_entropy: ce })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Mci, Nc};

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert!((cosine_sim(&v, &v2).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &v[..2]).is_err());
    }

    #[test]
    fn pair_mask_examples() {
        let m = pair_mask(&[Nc, Nc, Mci]);
        assert_eq!(m, vec![vec![false, true, false], vec![true, false, false], vec![false, false, false]]);
        let all = pair_mask(&[Mci; 3]);
        assert!((0..3).all(|i| (0..3).all(|j| all[i][j] == (i != j))));
        assert_eq!(positives(&[Nc, Mci, Nc, Mci]), vec![vec![2], vec![3], vec![0], vec![1]]);
    }

    #[test]
    fn uniform_similarity_gives_log_b_minus_one() {
        // Three identical embeddings: every similarity is 1.
        let batch = BatchEmbeddings {
            embeddings: vec![vec![1.0, 2.0]; 3],
            labels: vec![Nc, Nc, Mci],
            logits: vec![0.0; 3],
        };
        let c = contrastive_loss(&batch, 0.5).unwrap();
        assert!((c.value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(c.skipped_anchors, 1);
        assert_eq!(c.pairs, 2);
    }

    #[test]
    fn large_temperature_washes_out_similarity() {
        let batch = BatchEmbeddings {
            embeddings: vec![vec![1.0, 0.0], vec![0.2, 1.0], vec![-1.0, 0.3], vec![0.5, -0.5]],
            labels: vec![Nc, Mci, Nc, Mci],
            logits: vec![0.0; 4],
        };
        let c = contrastive_loss(&batch, 1e9).unwrap();
        assert!((c.value - 3f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn degenerate_batch_rejected() {
        let batch = BatchEmbeddings { embeddings: vec![vec![1.0], vec![2.0]], labels: vec![Nc, Mci], logits: vec![0.0; 2] };
        assert!(contrastive_loss(&batch, 0.5).is_err());
        let same = BatchEmbeddings { labels: vec![Nc, Nc], ..batch };
        assert!(contrastive_loss(&same, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0], &[Mci]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[50.0], &[Mci]).unwrap() < 1e-20);
        let expected = ((1.0 + (-1f64).exp()).ln() + (1.0 + (-0.5f64).exp()).ln()) / 2.0;
        assert!((cross_entropy(&[1.0, -0.5], &[Mci, Nc]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn alpha_zero_is_weighted_ce() {
        let batch = BatchEmbeddings {
            embeddings: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            labels: vec![Nc, Mci],
            logits: vec![1.0, -0.5],
        };
        let w = LossWeights { alpha: 0.0, beta: 2.0, mode: WeightMode::Fixed, ..Default::default() };
        let l = total_loss(&batch, &w).unwrap();
        assert_eq!(l.total, 2.0 * cross_entropy(&batch.logits, &batch.labels).unwrap());
    }

    #[test]
    fn inverse_softplus_round_trip() {
        for v in [1e-3, 0.5, 1.0, 3.0, 40.0] {
            assert!((softplus(inverse_softplus(v)) - v).abs() < 1e-12 * v.max(1.0));
        }
        let w = LossWeights { alpha: 0.7, beta: 1.3, mode: WeightMode::Learnable, tau: 0.5 };
        let (x, y) = w.raw();
        let back = w.from_raw(x, y);
        assert!((back.alpha - 0.7).abs() < 1e-12 && (back.beta - 1.3).abs() < 1e-12);
    }
}
