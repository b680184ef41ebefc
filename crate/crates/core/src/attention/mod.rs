//! Multi-head attention: SimA and the softmax / kernel baselines.
//!
//! All variants share the same surrounding block (fused QKV projection,
//! split into heads, per-head kernel, concatenation, output projection) and
//! differ only in the per-head kernel in [`heads`].

mod cost_model;
mod heads;
pub mod traced;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{Cost, ProductOrder};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul, Element, Tensor};

pub use cost_model::{
    cosformer_flops_factor, cosformer_mul_adds, count_exp_ops, flops_estimate, product_mul_adds,
    CosFormerFactor, ExpOpCount, ReweightTerm, Trig, SIMA_FLOPS_FACTOR,
};
pub(crate) use heads::elu_feature_scalar;
pub use heads::{
    choose_ordering, elu_feature, elu_linear_head_forward, l1_normalize_columns,
    l2_normalize_columns, msa_head_forward, normalize_columns, sima_head_forward,
    sima_head_forward_with_norm, xca_head_forward,
};

/// Default clamp for the column-norm denominator.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    SimA,
    Msa,
    Xca,
    EluLinear,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SimA,
        Variant::Msa,
        Variant::Xca,
        Variant::EluLinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SimA => "sima",
            Variant::Msa => "msa",
            Variant::Xca => "xca",
            Variant::EluLinear => "elu",
        }
    }

    /// Grouping forced by the kernel itself, if any. MSA builds an `N x N`
    /// matrix, XCA a `d x d` one; SimA and EluLinear can go either way.
    pub fn native_order(self) -> Option<ProductOrder> {
        match self {
            Variant::Msa => Some(ProductOrder::TokensFirst),
            Variant::Xca => Some(ProductOrder::ChannelsFirst),
            Variant::SimA | Variant::EluLinear => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attention variant {s:?} (supported: sima, msa, xca, elu)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OrderingPolicy {
    #[default]
    Auto,
    TokensFirst,
    ChannelsFirst,
}

impl From<ProductOrder> for OrderingPolicy {
    fn from(o: ProductOrder) -> Self {
        match o {
            ProductOrder::TokensFirst => OrderingPolicy::TokensFirst,
            ProductOrder::ChannelsFirst => OrderingPolicy::ChannelsFirst,
        }
    }
}

/// Column normalization applied to Q and K by SimA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ChannelNorm {
    #[default]
    L1,
    L2,
    None,
}

/// Product grouping a head of `variant` will use for `n` tokens and head
/// width `d_head`. Variants with a native grouping ignore the policy.
pub fn resolve_order(
    variant: Variant,
    policy: OrderingPolicy,
    n: usize,
    d_head: usize,
) -> ProductOrder {
    if let Some(native) = variant.native_order() {
        return native;
    }
    match policy {
        OrderingPolicy::Auto => choose_ordering(n, d_head),
        OrderingPolicy::TokensFirst => ProductOrder::TokensFirst,
        OrderingPolicy::ChannelsFirst => ProductOrder::ChannelsFirst,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub variant: Variant,
    pub ordering: OrderingPolicy,
    pub norm_eps: f64,
    pub qkv_bias: bool,
    pub normalization: ChannelNorm,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, variant: Variant) -> Result<Self> {
        let cfg = Self {
            dim,
            heads,
            variant,
            ordering: OrderingPolicy::Auto,
            norm_eps: NORM_EPS,
            qkv_bias: false,
            normalization: ChannelNorm::L1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_ordering(mut self, ordering: OrderingPolicy) -> Self {
        self.ordering = ordering;
        self
    }

    pub fn with_qkv_bias(mut self, qkv_bias: bool) -> Self {
        self.qkv_bias = qkv_bias;
        self
    }

    pub fn with_normalization(mut self, normalization: ChannelNorm) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(Error::Config(format!(
                "norm_eps must be positive, got {}",
                self.norm_eps
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Fused QKV projection `[D, 3D]` and output projection `[D, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T = f64> {
    pub qkv: Tensor<T>,
    pub qkv_bias: Option<Tensor<T>>,
    pub proj: Tensor<T>,
    pub proj_bias: Tensor<T>,
}

impl<T: Element> AttentionWeights<T> {
    /// Truncated-normal projections, zero biases.
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng, std: f64) -> Self {
        let d = cfg.dim;
        Self {
            qkv: rng.trunc_normal_tensor(&[d, 3 * d], std),
            qkv_bias: cfg.qkv_bias.then(|| Tensor::zeros(&[3 * d])),
            proj: rng.trunc_normal_tensor(&[d, d], std),
            proj_bias: Tensor::zeros(&[d]),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        let bias_ok = self.qkv_bias.as_ref().is_none_or(|b| b.len() == 3 * d);
        if self.qkv.shape() != [d, 3 * d]
            || self.proj.shape() != [d, d]
            || self.proj_bias.len() != d
            || !bias_ok
        {
            return Err(Error::Shape(format!(
                "attention weights do not match dim {d}: qkv {:?}, proj {:?}",
                self.qkv.shape(),
                self.proj.shape()
            )));
        }
        Ok(())
    }
}

/// Query, key and value matrices `[N, D]` from the fused projection.
pub fn project_qkv<T: Element>(
    x: &Tensor<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights<T>,
    cost: &mut Cost,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, cols) = x.dims2()?;
    if cols != cfg.dim {
        return Err(Error::Shape(format!(
            "input has {cols} columns, attention expects {}",
            cfg.dim
        )));
    }
    w.check(cfg.dim)?;
    let mut qkv = matmul(x, &w.qkv, cost)?;
    if let Some(b) = &w.qkv_bias {
        qkv = qkv.add_row(b)?;
    }
    let d = cfg.dim;
    Ok((
        qkv.slice_cols(0, d)?,
        qkv.slice_cols(d, d)?,
        qkv.slice_cols(2 * d, d)?,
    ))
}

/// Runs the configured kernel on one head.
pub fn head_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    cost: &mut Cost,
) -> Result<Tensor<T>> {
    let (n, d) = q.dims2()?;
    let order = resolve_order(cfg.variant, cfg.ordering, n, d);
    match cfg.variant {
        Variant::SimA => sima_head_forward_with_norm(
            q,
            k,
            v,
            cfg.normalization,
            order,
            T::from_f64(cfg.norm_eps),
            cost,
        ),
        Variant::Msa => msa_head_forward(q, k, v, cost),
        Variant::Xca => xca_head_forward(q, k, v, cost),
        Variant::EluLinear => elu_linear_head_forward(q, k, v, order, cost),
    }
}

/// Splits `[N, D]` query/key/value matrices into heads, applies the kernel
/// per head and concatenates the results back to `[N, D]`.
pub fn attention_core<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    cost: &mut Cost,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (_, cols) = q.dims2()?;
    if cols != cfg.dim {
        return Err(Error::Shape(format!(
            "queries have {cols} columns, attention expects {}",
            cfg.dim
        )));
    }
    let dh = cfg.head_dim();
    let outputs = (0..cfg.heads)
        .map(|h| {
            let s = h * dh;
            head_forward(
                &q.slice_cols(s, dh)?,
                &k.slice_cols(s, dh)?,
                &v.slice_cols(s, dh)?,
                cfg,
                cost,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = outputs.iter().collect();
    Tensor::concat_cols(&refs)
}

/// Full attention block: projection, multi-head kernel, output projection.
pub fn attention_forward<T: Element>(
    x: &Tensor<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights<T>,
    cost: &mut Cost,
) -> Result<Tensor<T>> {
    let (q, k, v) = project_qkv(x, cfg, w, cost)?;
    let o = attention_core(&q, &k, &v, cfg, cost)?;
    matmul(&o, &w.proj, cost)?.add_row(&w.proj_bias)
}
