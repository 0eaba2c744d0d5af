use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FeatureDims, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)+
        }

        impl<T> $name<T> {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &self.$field));)+
            }

            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &mut self.$field));)+
            }

            fn try_map<U, F>(&self, prefix: &str, f: &mut F) -> Result<$name<U>>
            where
                F: FnMut(&str, &T) -> Result<U>,
            {
                Ok($name {
                    $($field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field)?,)+
                })
            }
        }
    };
}

param_group!(
    /// One transformer layer plus its convolution.
    StreamParams {
        w_in, w_q, w_k, w_v, w_o,
        ffn_w1, ffn_b1, ffn_w2, ffn_b2,
        ln1_gamma, ln1_beta, ln2_gamma, ln2_beta,
        conv_kernel, conv_bias,
    }
);

param_group!(
    /// Convolution applied directly to static FC rows.
    ConvParams { kernel, bias }
);

param_group!(
    /// Attention pooling (`att_w`, `att_v`) and the embedding projection.
    FusionParams { att_w, att_v, proj_w, proj_b }
);

param_group!(HeadParams { weight, bias });

/// All learnable tensors of one model. Generic over the element so the same
/// layout holds values as well as graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub temporal: Option<StreamParams<T>>,
    pub spatial: Option<StreamParams<T>>,
    pub static_conv: Option<ConvParams<T>>,
    pub fusion: FusionParams<T>,
    pub head: HeadParams<T>,
}

pub type ModelParams = Params<Tensor>;

impl<T> Params<T> {
    /// Every tensor with its dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        if let Some(s) = &self.temporal {
            s.collect("temporal", &mut out);
        }
        if let Some(s) = &self.spatial {
            s.collect("spatial", &mut out);
        }
        if let Some(c) = &self.static_conv {
            c.collect("static_conv", &mut out);
        }
        self.fusion.collect("fusion", &mut out);
        self.head.collect("head", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        if let Some(s) = &mut self.temporal {
            s.collect_mut("temporal", &mut out);
        }
        if let Some(s) = &mut self.spatial {
            s.collect_mut("spatial", &mut out);
        }
        if let Some(c) = &mut self.static_conv {
            c.collect_mut("static_conv", &mut out);
        }
        self.fusion.collect_mut("fusion", &mut out);
        self.head.collect_mut("head", &mut out);
        out
    }

    pub fn try_map<U, F>(&self, mut f: F) -> Result<Params<U>>
    where
        F: FnMut(&str, &T) -> Result<U>,
    {
        Ok(Params {
            temporal: self.temporal.as_ref().map(|s| s.try_map("temporal", &mut f)).transpose()?,
            spatial: self.spatial.as_ref().map(|s| s.try_map("spatial", &mut f)).transpose()?,
            static_conv: self.static_conv.as_ref().map(|c| c.try_map("static_conv", &mut f)).transpose()?,
            fusion: self.fusion.try_map("fusion", &mut f)?,
            head: self.head.try_map("head", &mut f)?,
        })
    }
}

impl ModelParams {
    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Concatenation of every value in `named()` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named().iter().flat_map(|(_, t)| t.values().iter().copied()).collect()
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.parameter_count();
        if flat.len() != total {
            return Err(Error::Shape { op: "assign_flat", lhs: (total, 1), rhs: (flat.len(), 1) });
        }
        let mut offset = 0;
        for (_, t) in self.named_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, values).expect("glorot shape")
}

fn init_stream(rng: &mut ChaCha8Rng, feature_dim: usize, cfg: &ModelConfig) -> StreamParams<Tensor> {
    let d = cfg.d_model;
    StreamParams {
        w_in: glorot(rng, feature_dim, d),
        w_q: glorot(rng, d, d),
        w_k: glorot(rng, d, d),
        w_v: glorot(rng, d, d),
        w_o: glorot(rng, d, d),
        ffn_w1: glorot(rng, d, cfg.ffn_hidden),
        ffn_b1: Tensor::zeros(1, cfg.ffn_hidden),
        ffn_w2: glorot(rng, cfg.ffn_hidden, d),
        ffn_b2: Tensor::zeros(1, d),
        ln1_gamma: Tensor::filled(1, d, 1.0),
        ln1_beta: Tensor::zeros(1, d),
        ln2_gamma: Tensor::filled(1, d, 1.0),
        ln2_beta: Tensor::zeros(1, d),
        conv_kernel: glorot(rng, cfg.conv_kernel * d, cfg.conv_channels),
        conv_bias: Tensor::zeros(1, cfg.conv_channels),
    }
}

/// Glorot-uniform weights; biases and layer-norm shifts start at zero, gains at one.
pub fn init_params(seed: u64, cfg: &ModelConfig, dims: FeatureDims) -> Result<ModelParams> {
    cfg.validate_for(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let temporal = cfg.variant.uses_temporal().then(|| init_stream(&mut rng, dims.n_rois, cfg));
    let spatial = cfg.variant.uses_spatial().then(|| init_stream(&mut rng, dims.n_windows, cfg));
    let static_conv = (cfg.variant == Variant::OsFc).then(|| ConvParams {
        kernel: glorot(&mut rng, cfg.conv_kernel * dims.n_rois, cfg.conv_channels),
        bias: Tensor::zeros(1, cfg.conv_channels),
    });
    let c = cfg.conv_channels;
    let fusion = FusionParams {
        att_w: glorot(&mut rng, c, c),
        att_v: glorot(&mut rng, c, 1),
        proj_w: glorot(&mut rng, c, cfg.embed_dim),
        proj_b: Tensor::zeros(1, cfg.embed_dim),
    };
    let head = HeadParams { weight: glorot(&mut rng, cfg.embed_dim, 1), bias: Tensor::zeros(1, 1) };
    Ok(Params { temporal, spatial, static_conv, fusion, head })
}
