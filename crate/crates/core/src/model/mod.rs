//! Dual-stream spatio-temporal transformer.
//!
//! The temporal stream treats sliding windows as tokens, the spatial stream
//! treats ROIs as tokens. Each is one transformer layer plus a strided
//! convolution; their token sequences are concatenated and pooled by global
//! attention into an embedding, and a linear head maps that to a logit.

mod config;
mod forward;
mod params;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{FeatureDims, ModelConfig, Variant};
pub use forward::{ffn, global_attention_pool, mhsa, model_forward, stream_forward, transformer_layer, ForwardOutput, ModelInput};
pub use params::{init_params, ConvParams, FusionParams, HeadParams, ModelParams, Params, StreamParams};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

const FORMAT: &str = "dfcformer-model/1";

/// A configured model with concrete parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: FeatureDims,
    pub params: ModelParams,
}

impl Model {
    pub fn init(seed: u64, config: ModelConfig, dims: FeatureDims) -> Result<Self> {
        let params = init_params(seed, &config, dims)?;
        Ok(Model { config, dims, params })
    }

    /// Inserts every parameter into `g` as a tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<Params<Var>> {
        self.params.try_map(|_, t| g.param(t.clone()))
    }

    /// Forward pass without gradient tracking: `(logit, embedding)`.
    pub fn predict(&self, input: ModelInput<'_>) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = self.params.try_map(|_, t| g.constant(t.clone()))?;
        let out = model_forward(&mut g, &vars, &self.config, input)?;
        Ok((g.value(out.logit).item()?, g.value(out.embedding).values().to_vec()))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            dims: self.dims,
            params: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor { name, shape: [t.rows(), t.cols()], values: t.values().to_vec() })
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::data(format!("serializing model: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::data(format!("parsing model file: {e}")))?;
        if file.format != FORMAT {
            return Err(Error::data(format!("unsupported model format {:?}", file.format)));
        }
        let mut model = Model::init(0, file.config, file.dims)?;
        let mut stored = file.params.into_iter();
        for (name, slot) in model.params.named_mut() {
            let entry = stored.next().ok_or_else(|| Error::data(format!("model file is missing {name}")))?;
            if entry.name != name {
                return Err(Error::data(format!("expected parameter {name}, found {}", entry.name)));
            }
            if entry.shape != [slot.rows(), slot.cols()] {
                return Err(Error::data(format!(
                    "{name} has shape {:?}, expected {:?}",
                    entry.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::from_vec(entry.shape[0], entry.shape[1], entry.values)?;
        }
        if let Some(extra) = stored.next() {
            return Err(Error::data(format!("unexpected parameter {}", extra.name)));
        }
        if !model.params.is_finite() {
            return Err(Error::data("model file contains non-finite values"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Model::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    config: ModelConfig,
    dims: FeatureDims,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}
