//! Closed-form operation counts for the attention variants.

use serde::Serialize;

use crate::cost::ProductOrder;
use crate::error::{Error, Result};

use super::{resolve_order, OrderingPolicy, Variant};

/// Transcendental count for one forward pass of the attention core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExpOpCount {
    /// What the instrumented counter reports (per-head softmax over `d x d`
    /// for XCA). For `EluLinear` this is an upper bound.
    pub instrumented: u64,
    /// Headline figure in the `HN²` / `HD²` notation, where XCA uses the
    /// full width `D`.
    pub nominal: u64,
    /// False when the real count depends on the data (`EluLinear`).
    pub exact: bool,
}

fn head_width(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "dimension {d_model} is not divisible into {heads} heads"
        )));
    }
    Ok(d_model / heads)
}

pub fn count_exp_ops(
    variant: Variant,
    n: usize,
    d_model: usize,
    heads: usize,
) -> Result<ExpOpCount> {
    let d = head_width(d_model, heads)? as u64;
    if n == 0 {
        return Err(Error::Config("token count must be positive".into()));
    }
    let (n, h, dm) = (n as u64, heads as u64, d_model as u64);
    Ok(match variant {
        Variant::SimA => ExpOpCount {
            instrumented: 0,
            nominal: 0,
            exact: true,
        },
        Variant::Msa => ExpOpCount {
            instrumented: h * n * n,
            nominal: h * n * n,
            exact: true,
        },
        Variant::Xca => ExpOpCount {
            instrumented: h * d * d,
            nominal: h * dm * dm,
            exact: true,
        },
        Variant::EluLinear => ExpOpCount {
            instrumented: 2 * n * dm,
            nominal: 2 * n * dm,
            exact: false,
        },
    })
}

/// Predicted multiply-adds of the three-matrix product `Q K^T V` summed over
/// heads. QKV and output projections are excluded since they are identical
/// for every variant.
pub fn flops_estimate(
    variant: Variant,
    n: usize,
    d_model: usize,
    heads: usize,
    ordering: OrderingPolicy,
) -> Result<u64> {
    let d = head_width(d_model, heads)?;
    let order = resolve_order(variant, ordering, n, d);
    Ok(product_mul_adds(order, n, d) * heads as u64)
}

/// Multiply-adds of one head's triple product under `order`.
pub fn product_mul_adds(order: ProductOrder, n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    match order {
        ProductOrder::TokensFirst => 2 * n * n * d,
        ProductOrder::ChannelsFirst => 2 * n * d * d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Trig {
    Cos,
    Sin,
}

impl Trig {
    fn eval(self, x: f64) -> f64 {
        match self {
            Trig::Cos => x.cos(),
            Trig::Sin => x.sin(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Trig::Cos => "cos",
            Trig::Sin => "sin",
        }
    }
}

/// One regrouped term of the 2-D cosine re-weighting
/// `q·k cos(i-j) cos(m-n)`: the query is weighted by `row(i) col(m)`, the
/// key by the same functions of `(j, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReweightTerm {
    pub row: Trig,
    pub col: Trig,
}

impl ReweightTerm {
    /// Contribution of this term to the reweighting factor for query grid
    /// position `(i, m)` and key grid position `(j, n)`.
    pub fn weight(&self, i: f64, m: f64, j: f64, n: f64) -> f64 {
        self.row.eval(i) * self.col.eval(m) * self.row.eval(j) * self.col.eval(n)
    }

    pub fn describe(&self) -> String {
        format!(
            "(q {r}(i){c}(m)) . (k {r}(j){c}(n))",
            r = self.row.name(),
            c = self.col.name()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CosFormerFactor {
    pub factor: u64,
    pub terms: Vec<ReweightTerm>,
}

/// FLOP multiplier of 2-D cosine re-weighted linear attention relative to
/// SimA: each attention value needs one query/key product per regrouped
/// term instead of one in total.
pub fn cosformer_flops_factor() -> CosFormerFactor {
    let terms: Vec<ReweightTerm> = [Trig::Cos, Trig::Sin]
        .into_iter()
        .flat_map(|row| {
            [Trig::Cos, Trig::Sin]
                .into_iter()
                .map(move |col| ReweightTerm { row, col })
        })
        .collect();
    CosFormerFactor {
        factor: terms.len() as u64,
        terms,
    }
}

/// SimA's factor on the same scale.
pub const SIMA_FLOPS_FACTOR: u64 = 1;

/// Predicted QKV-product multiply-adds for the cosine re-weighted variant.
pub fn cosformer_mul_adds(
    n: usize,
    d_model: usize,
    heads: usize,
    ordering: OrderingPolicy,
) -> Result<u64> {
    Ok(cosformer_flops_factor().factor
        * flops_estimate(Variant::SimA, n, d_model, heads, ordering)?)
}
