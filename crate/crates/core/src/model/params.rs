use std::collections::{BTreeMap, HashMap};

use crate::attention::traced::AttentionVars;
use crate::attention::AttentionWeights;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{ModelConfig, Pooling};

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors of a classifier, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Weights of one transformer block, detached from the store.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub attn: AttentionWeights,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub fc1: Tensor,
    pub fc1_bias: Tensor,
    pub fc2: Tensor,
    pub fc2_bias: Tensor,
}

pub(crate) fn block_key(layer: usize, name: &str) -> String {
    format!("blocks.{layer}.{name}")
}

impl ParamStore {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Truncated-normal projections and CLS token, unit LayerNorm gains,
    /// zero biases, zero classification head.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, hidden) = (cfg.dim, cfg.ffn_hidden());
        let mut t = BTreeMap::new();
        let mut normal = |shape: &[usize]| -> Tensor { rng.trunc_normal_tensor(shape, INIT_STD) };
        t.insert("embed.weight".into(), normal(&[cfg.d_in, d]));
        t.insert("embed.bias".into(), Tensor::zeros(&[d]));
        if cfg.pooling == Pooling::ClsToken {
            t.insert("cls".into(), normal(&[1, d]));
        }
        for l in 0..cfg.depth {
            t.insert(block_key(l, "norm1.gain"), Tensor::ones(&[d]));
            t.insert(block_key(l, "norm1.bias"), Tensor::zeros(&[d]));
            t.insert(block_key(l, "attn.qkv"), normal(&[d, 3 * d]));
            if cfg.qkv_bias {
                t.insert(block_key(l, "attn.qkv_bias"), Tensor::zeros(&[3 * d]));
            }
            t.insert(block_key(l, "attn.proj"), normal(&[d, d]));
            t.insert(block_key(l, "attn.proj_bias"), Tensor::zeros(&[d]));
            t.insert(block_key(l, "norm2.gain"), Tensor::ones(&[d]));
            t.insert(block_key(l, "norm2.bias"), Tensor::zeros(&[d]));
            t.insert(block_key(l, "ffn.fc1"), normal(&[d, hidden]));
            t.insert(block_key(l, "ffn.fc1_bias"), Tensor::zeros(&[hidden]));
            t.insert(block_key(l, "ffn.fc2"), normal(&[hidden, d]));
            t.insert(block_key(l, "ffn.fc2_bias"), Tensor::zeros(&[d]));
        }
        t.insert("norm.gain".into(), Tensor::ones(&[d]));
        t.insert("norm.bias".into(), Tensor::zeros(&[d]));
        t.insert("head.weight".into(), Tensor::zeros(&[d, cfg.num_classes]));
        t.insert("head.bias".into(), Tensor::zeros(&[cfg.num_classes]));
        Ok(Self { tensors: t })
    }

    /// Overwrites every parameter with `N(0, std²)` noise (gains get `1 +`
    /// noise). Useful to leave the degenerate zero-initialized regime.
    pub fn randomize(&mut self, rng: &mut Rng, std: f64) {
        for (name, t) in self.tensors.iter_mut() {
            let noise: Tensor = rng.normal_tensor(t.shape(), std);
            *t = if name.ends_with("gain") {
                noise.map(|v| 1.0 + v)
            } else {
                noise
            };
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set parameter",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn block(&self, layer: usize) -> Result<BlockWeights> {
        let g = |n: &str| self.get(&block_key(layer, n)).cloned();
        Ok(BlockWeights {
            norm1_gain: g("norm1.gain")?,
            norm1_bias: g("norm1.bias")?,
            attn: AttentionWeights {
                qkv: g("attn.qkv")?,
                qkv_bias: self
                    .tensors
                    .get(&block_key(layer, "attn.qkv_bias"))
                    .cloned(),
                proj: g("attn.proj")?,
                proj_bias: g("attn.proj_bias")?,
            },
            norm2_gain: g("norm2.gain")?,
            norm2_bias: g("norm2.bias")?,
            fc1: g("ffn.fc1")?,
            fc1_bias: g("ffn.fc1_bias")?,
            fc2: g("ffn.fc2")?,
            fc2_bias: g("ffn.fc2_bias")?,
        })
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.bind_with(tape, None)
    }

    /// Like [`bind`](Self::bind) but uses `var` for the parameter `name`.
    pub fn bind_with(&self, tape: &mut Tape, replace: Option<(&str, Var)>) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = match replace {
                    Some((r, var)) if r == name => var,
                    _ => tape.leaf(t.clone()),
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn maybe(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub(crate) fn attention(&self, layer: usize) -> Result<AttentionVars> {
        Ok(AttentionVars {
            qkv: self.var(&block_key(layer, "attn.qkv"))?,
            qkv_bias: self.maybe(&block_key(layer, "attn.qkv_bias")),
            proj: self.var(&block_key(layer, "attn.proj"))?,
            proj_bias: self.var(&block_key(layer, "attn.proj_bias"))?,
        })
    }
}
