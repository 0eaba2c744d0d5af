use std::ops::Range;

use super::config::{ModelConfig, Variant};
use super::params::{FusionParams, Params, StreamParams};
use crate::dfc::FeatureMatrices;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var, LN_EPS};

/// What a variant is allowed to see. The static-FC baseline only ever
/// receives the whole-scan correlation matrix.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Dynamic(&'a FeatureMatrices),
    StaticFc(&'a Tensor),
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// 1×1
    pub logit: Var,
    /// 1×embed_dim, the vector compared by the contrastive loss.
    pub embedding: Var,
    /// Token sequence entering the global attention pool.
    pub tokens: Var,
    /// Rows of `tokens` contributed by the spatial stream, if any.
    pub spatial_tokens: Option<Range<usize>>,
    /// Per-head attention weight matrices of every transformer layer.
    pub attention: Vec<Var>,
    /// 1×tokens pooling weights.
    pub pool_weights: Var,
}

/// Multi-head self-attention: per head `softmax(Q_i K_iᵀ / √d_k) V_i`,
/// heads concatenated along features and projected by `w_o`.
pub fn mhsa(g: &mut Graph, x: Var, w_q: Var, w_k: Var, w_v: Var, w_o: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let d_model = g.shape(w_q).1;
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::config(format!("d_model {d_model} is not divisible by {heads} heads")));
    }
    let d_k = d_model / heads;
    let q = g.matmul(x, w_q)?;
    let k = g.matmul(x, w_k)?;
    let v = g.matmul(x, w_v)?;
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * d_k, d_k)?;
        let kh = g.slice_cols(k, h * d_k, d_k)?;
        let vh = g.slice_cols(v, h * d_k, d_k)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let attn = g.softmax_rows(scores, (d_k as f64).sqrt())?;
        outputs.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let concat = g.concat_cols(&outputs)?;
    Ok((g.matmul(concat, w_o)?, weights))
}

/// `ReLU(x W₁ + b₁) W₂ + b₂`, row-wise.
pub fn ffn(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

/// Input projection, then post-norm residual attention and feed-forward
/// sublayers. Returns the layer output and the attention weights.
pub fn transformer_layer(g: &mut Graph, input: Var, p: &StreamParams<Var>, heads: usize) -> Result<(Var, Vec<Var>)> {
    if g.shape(input).1 != g.shape(p.w_in).0 {
        return Err(Error::Shape { op: "transformer_layer", lhs: g.shape(input), rhs: g.shape(p.w_in) });
    }
    let x0 = g.matmul(input, p.w_in)?;
    let (attn_out, weights) = mhsa(g, x0, p.w_q, p.w_k, p.w_v, p.w_o, heads)?;
    let r1 = g.add(x0, attn_out)?;
    let x1 = g.layer_norm(r1, p.ln1_gamma, p.ln1_beta, LN_EPS)?;
    let f = ffn(g, x1, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)?;
    let r2 = g.add(x1, f)?;
    let x2 = g.layer_norm(r2, p.ln2_gamma, p.ln2_beta, LN_EPS)?;
    Ok((x2, weights))
}

/// Transformer layer followed by a ReLU-activated valid convolution.
pub fn stream_forward(g: &mut Graph, features: Var, p: &StreamParams<Var>, cfg: &ModelConfig) -> Result<(Var, Vec<Var>)> {
    let tokens = g.shape(features).0;
    if tokens < cfg.conv_kernel {
        return Err(Error::Shape { op: "stream_forward", lhs: g.shape(features), rhs: (cfg.conv_kernel, 0) });
    }
    let (h, weights) = transformer_layer(g, features, p, cfg.heads)?;
    let c = g.conv1d(h, p.conv_kernel, p.conv_bias, cfg.conv_kernel, cfg.conv_stride)?;
    Ok((g.relu(c)?, weights))
}

/// Scores `s_i = w_aᵀ tanh(W_a h_i)`, softmax over tokens, weighted sum of rows.
/// Returns the pooled `1×c` vector and the `1×tokens` weights.
pub fn global_attention_pool(g: &mut Graph, h: Var, att_w: Var, att_v: Var) -> Result<(Var, Var)> {
    let proj = g.matmul(h, att_w)?;
    let act = g.tanh(proj)?;
    let scores = g.matmul(act, att_v)?;
    let scores = g.transpose(scores)?;
    let weights = g.softmax_rows(scores, 1.0)?;
    let pooled = g.matmul(weights, h)?;
    Ok((pooled, weights))
}

fn tail(g: &mut Graph, tokens: Var, fusion: &FusionParams<Var>, head_w: Var, head_b: Var) -> Result<(Var, Var, Var)> {
    let (pooled, weights) = global_attention_pool(g, tokens, fusion.att_w, fusion.att_v)?;
    let e = g.matmul(pooled, fusion.proj_w)?;
    let e = g.add_row(e, fusion.proj_b)?;
    let embedding = g.tanh(e)?;
    let logit = g.matmul(embedding, head_w)?;
    let logit = g.add(logit, head_b)?;
    Ok((logit, embedding, weights))
}

fn missing(group: &str, variant: Variant) -> Error {
    Error::contract(format!("variant {variant} needs {group} parameters"))
}

pub fn model_forward(g: &mut Graph, p: &Params<Var>, cfg: &ModelConfig, input: ModelInput<'_>) -> Result<ForwardOutput> {
    let mut attention = Vec::new();
    let mut spatial_tokens = None;
    let tokens = match (cfg.variant, input) {
        (Variant::OsFc, ModelInput::StaticFc(fc)) => {
            let conv = p.static_conv.as_ref().ok_or_else(|| missing("static_conv", cfg.variant))?;
            let x = g.constant(fc.clone())?;
            let c = g.conv1d(x, conv.kernel, conv.bias, cfg.conv_kernel, cfg.conv_stride)?;
            g.relu(c)?
        }
        (Variant::OsFc, ModelInput::Dynamic(_)) => {
            return Err(Error::contract("os-fc variant accepts only a static FC matrix"));
        }
        (variant, ModelInput::Dynamic(feat)) => {
            let mut parts = Vec::new();
            if variant.uses_temporal() {
                let s = p.temporal.as_ref().ok_or_else(|| missing("temporal", variant))?;
                let x = g.constant(feat.temporal.clone())?;
                let (out, w) = stream_forward(g, x, s, cfg)?;
                attention.extend(w);
                parts.push(out);
            }
            if variant.uses_spatial() {
                let s = p.spatial.as_ref().ok_or_else(|| missing("spatial", variant))?;
                let x = g.constant(feat.spatial.clone())?;
                let (out, w) = stream_forward(g, x, s, cfg)?;
                attention.extend(w);
                let offset: usize = parts.iter().map(|&v| g.shape(v).0).sum();
                spatial_tokens = Some(offset..offset + g.shape(out).0);
                parts.push(out);
            }
            if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_rows(&parts)?
            }
        }
        (variant, ModelInput::StaticFc(_)) => {
            return Err(Error::contract(format!("variant {variant} needs dynamic feature matrices")));
        }
    };
    let (logit, embedding, pool_weights) = tail(g, tokens, &p.fusion, p.head.weight, p.head.bias)?;
    Ok(ForwardOutput { logit, embedding, tokens, spatial_tokens, attention, pool_weights })
}
