use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which streams the classifier uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Temporal and spatial streams fused by global attention.
    Full,
    /// Spatial stream only (ROIs as tokens).
    SOnly,
    /// Temporal stream only (windows as tokens).
    TOnly,
    /// Convolution over the static FC matrix.
    OsFc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::OsFc, Variant::SOnly, Variant::TOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SOnly => "s-only",
            Variant::TOnly => "t-only",
            Variant::OsFc => "os-fc",
        }
    }

    pub fn uses_temporal(self) -> bool {
        matches!(self, Variant::Full | Variant::TOnly)
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, Variant::Full | Variant::SOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?} (expected full, s-only, t-only or os-fc)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_channels: usize,
    pub embed_dim: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 4,
            ffn_hidden: 64,
            conv_kernel: 3,
            conv_stride: 2,
            conv_channels: 16,
            embed_dim: 16,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelConfig { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("conv_channels", self.conv_channels),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Checks that every stream the variant uses has at least `conv_kernel` tokens.
    pub fn validate_for(&self, dims: FeatureDims) -> Result<()> {
        self.validate()?;
        if dims.n_rois < 2 || dims.n_windows < 1 {
            return Err(Error::config(format!("feature dims {dims:?} are too small")));
        }
        let token_counts: Vec<(&str, usize)> = match self.variant {
            Variant::Full => vec![("windows", dims.n_windows), ("ROIs", dims.n_rois)],
            Variant::TOnly => vec![("windows", dims.n_windows)],
            Variant::SOnly | Variant::OsFc => vec![("ROIs", dims.n_rois)],
        };
        for (what, tokens) in token_counts {
            if tokens < self.conv_kernel {
                return Err(Error::config(format!(
                    "{tokens} {what} is fewer than the conv kernel width {}",
                    self.conv_kernel
                )));
            }
        }
        Ok(())
    }
}

/// Input sizes the parameter shapes depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDims {
    pub n_rois: usize,
    pub n_windows: usize,
}
