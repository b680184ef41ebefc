//! The attention kernels recorded on an autodiff [`Tape`].
//!
//! These mirror the plain-tensor kernels op for op, including the cost
//! accounting, so a traced forward reports the same counters.

use crate::autodiff::{Tape, Var};
use crate::cost::ProductOrder;
use crate::error::{Error, Result};

use super::{resolve_order, AttentionConfig, Variant};

/// Parameter handles of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub qkv: Var,
    pub qkv_bias: Option<Var>,
    pub proj: Var,
    pub proj_bias: Var,
}

/// Output of a traced attention block plus the per-head query/key matrices
/// the kernel actually multiplied (normalized ones for SimA).
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: Var,
    pub queries: Vec<Var>,
    pub keys: Vec<Var>,
}

fn triple(tape: &mut Tape, a: Var, b: Var, c: Var, order: ProductOrder) -> Result<Var> {
    tape.cost_mut().record_ordering(order);
    match order {
        ProductOrder::TokensFirst => {
            let bt = tape.transpose(b)?;
            let ab = tape.matmul(a, bt)?;
            tape.matmul(ab, c)
        }
        ProductOrder::ChannelsFirst => {
            let bt = tape.transpose(b)?;
            let bc = tape.matmul(bt, c)?;
            tape.matmul(a, bc)
        }
    }
}

/// One head; returns `(output, queries_used, keys_used)`.
pub fn traced_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Var, Var)> {
    let (n, d) = tape.value(q).dims2()?;
    for other in [k, v] {
        if tape.value(other).shape() != [n, d] {
            return Err(Error::Dimension {
                op: "traced attention head",
                lhs: vec![n, d],
                rhs: tape.value(other).shape().to_vec(),
            });
        }
    }
    let order = resolve_order(cfg.variant, cfg.ordering, n, d);
    match cfg.variant {
        Variant::SimA => {
            let qh = tape.normalize_columns(q, cfg.normalization, cfg.norm_eps)?;
            let kh = tape.normalize_columns(k, cfg.normalization, cfg.norm_eps)?;
            Ok((triple(tape, qh, kh, v, order)?, qh, kh))
        }
        Variant::Msa => {
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = tape.softmax_rows(scores)?;
            tape.cost_mut().record_ordering(ProductOrder::TokensFirst);
            Ok((tape.matmul(attn, v)?, q, k))
        }
        Variant::Xca => {
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(kt, q)?;
            let attn = tape.softmax_cols(scores)?;
            tape.cost_mut().record_ordering(ProductOrder::ChannelsFirst);
            Ok((tape.matmul(v, attn)?, q, k))
        }
        Variant::EluLinear => {
            let fq = tape.elu_feature(q);
            let fk = tape.elu_feature(k);
            tape.cost_mut().record_ordering(order);
            let (numer, denom) = match order {
                ProductOrder::TokensFirst => {
                    let fkt = tape.transpose(fk)?;
                    let weights = tape.matmul(fq, fkt)?;
                    let denom = tape.row_sums(weights)?;
                    (tape.matmul(weights, v)?, denom)
                }
                ProductOrder::ChannelsFirst => {
                    let fkt = tape.transpose(fk)?;
                    let kv = tape.matmul(fkt, v)?;
                    let k_sum = tape.col_sums(fk)?;
                    let weighted = tape.mul_row_vec(fq, k_sum)?;
                    let denom = tape.row_sums(weighted)?;
                    (tape.matmul(fq, kv)?, denom)
                }
            };
            Ok((tape.div_rows(numer, denom)?, fq, fk))
        }
    }
}

/// Full attention block on the tape: fused projection, heads, output
/// projection.
pub fn traced_attention(
    tape: &mut Tape,
    x: Var,
    cfg: &AttentionConfig,
    w: &AttentionVars,
) -> Result<AttentionTrace> {
    cfg.validate()?;
    let d = cfg.dim;
    let cols = tape.value(x).dims2()?.1;
    if cols != d {
        return Err(Error::Shape(format!(
            "input has {cols} columns, attention expects {d}"
        )));
    }
    let mut qkv = tape.matmul(x, w.qkv)?;
    if let Some(b) = w.qkv_bias {
        qkv = tape.add_row(qkv, b)?;
    }
    let dh = cfg.head_dim();
    let mut outputs = Vec::with_capacity(cfg.heads);
    let mut queries = Vec::with_capacity(cfg.heads);
    let mut keys = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let (o, qu, ku) = traced_head(tape, q, k, v, cfg)?;
        outputs.push(o);
        queries.push(qu);
        keys.push(ku);
    }
    let o = tape.concat_cols(&outputs)?;
    let o = tape.matmul(o, w.proj)?;
    let output = tape.add_row(o, w.proj_bias)?;
    Ok(AttentionTrace {
        output,
        queries,
        keys,
    })
}
