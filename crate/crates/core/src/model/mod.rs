//! Toy vision transformer: pre-LayerNorm blocks around any attention
//! variant, a patch classifier, a synthetic dataset and an Adam trainer.

mod checkpoint;
mod data;
mod layers;
mod params;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, ChannelNorm, OrderingPolicy, Variant};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{make_synthetic_dataset, Dataset, Sample};
pub use layers::{
    attention_score_magnitude, block_forward, classifier_forward, ffn_forward, traced_block,
    traced_classifier, ClassifierTrace, LayerTrace,
};
pub use params::{BlockWeights, BoundParams, ParamStore, INIT_STD};
pub use train::{
    evaluate, parameter_grad_check, train_toy, train_toy_with, write_trace_csv, StepRecord,
    TrainOptions, TrainOutcome, TrainState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pooling {
    #[default]
    MeanPool,
    ClsToken,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::Config(format!(
                "unknown activation {s:?} (gelu, relu)"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub activation: Activation,
    pub variant: Variant,
    pub pooling: Pooling,
    pub normalization: ChannelNorm,
    /// Patches per image side; the token count is `patch_grid²`.
    pub patch_grid: usize,
    /// Features per patch.
    pub d_in: usize,
    pub num_classes: usize,
    pub qkv_bias: bool,
    pub ordering: OrderingPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 32,
            heads: 4,
            ffn_ratio: 4,
            activation: Activation::Gelu,
            variant: Variant::SimA,
            pooling: Pooling::MeanPool,
            normalization: ChannelNorm::L1,
            patch_grid: 4,
            d_in: 16,
            num_classes: 2,
            qkv_bias: false,
            ordering: OrderingPolicy::Auto,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn_ratio must be at least 1".into()));
        }
        if self.patch_grid == 0 || self.d_in == 0 {
            return Err(Error::Config("patch_grid and d_in must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        self.attention().map(|_| ())
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        Ok(AttentionConfig::new(self.dim, self.heads, self.variant)?
            .with_ordering(self.ordering)
            .with_qkv_bias(self.qkv_bias)
            .with_normalization(self.normalization))
    }

    pub fn ffn_hidden(&self) -> usize {
        self.dim * self.ffn_ratio
    }

    /// Patch tokens per sample (without CLS).
    pub fn num_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    /// Tokens inside the blocks (with CLS when pooling by it).
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.pooling == Pooling::ClsToken)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            depth: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let cls = ModelConfig {
            pooling: Pooling::ClsToken,
            patch_grid: 2,
            ..Default::default()
        };
        assert_eq!(cls.num_tokens(), 5);
        assert_eq!("ReLU".parse::<Activation>().unwrap(), Activation::Relu);
    }
}
