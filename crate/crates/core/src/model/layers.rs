use crate::attention::traced::traced_attention;
use crate::attention::{attention_forward, normalize_columns, project_qkv, Variant};
use crate::autodiff::{Tape, Var};
use crate::cost::Cost;
use crate::error::{Error, Result};
use crate::tensor::{self, matmul, matmul_nt, Tensor, LAYER_NORM_EPS};

use super::params::{block_key, BlockWeights, BoundParams, ParamStore};
use super::{Activation, ModelConfig, Pooling};

/// `activation(x W1 + b1) W2 + b2`.
pub fn ffn_forward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
    activation: Activation,
    cost: &mut Cost,
) -> Result<Tensor> {
    let hidden = matmul(x, w1, cost)?.add_row(b1)?;
    let hidden = match activation {
        Activation::Gelu => tensor::gelu(&hidden, cost),
        Activation::Relu => tensor::relu(&hidden),
    };
    matmul(&hidden, w2, cost)?.add_row(b2)
}

/// `x + attn(LN1(x))`, then `+ ffn(LN2(.))`.
pub fn block_forward(
    x: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
    cost: &mut Cost,
) -> Result<Tensor> {
    let attn_cfg = cfg.attention()?;
    let h = tensor::layer_norm(x, &w.norm1_gain, &w.norm1_bias, LAYER_NORM_EPS)?;
    let x = x.add(&attention_forward(&h, &attn_cfg, &w.attn, cost)?)?;
    let h = tensor::layer_norm(&x, &w.norm2_gain, &w.norm2_bias, LAYER_NORM_EPS)?;
    let f = ffn_forward(
        &h,
        &w.fc1,
        &w.fc1_bias,
        &w.fc2,
        &w.fc2_bias,
        cfg.activation,
        cost,
    )?;
    x.add(&f)
}

/// Per-layer captures for inspection (saliency, scale diagnostics).
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// LayerNorm output fed to attention, `[N, D]`.
    pub attn_input: Var,
    /// Query matrix the kernel multiplied, heads concatenated, `[N, D]`.
    /// For SimA this is `Q̂`.
    pub queries: Var,
    /// Same for keys.
    pub keys: Var,
}

fn traced_ffn(
    tape: &mut Tape,
    x: Var,
    p: &BoundParams,
    layer: usize,
    act: Activation,
) -> Result<Var> {
    let h = tape.matmul(x, p.var(&block_key(layer, "ffn.fc1"))?)?;
    let h = tape.add_row(h, p.var(&block_key(layer, "ffn.fc1_bias"))?)?;
    let h = match act {
        Activation::Gelu => tape.gelu(h),
        Activation::Relu => tape.relu(h),
    };
    let o = tape.matmul(h, p.var(&block_key(layer, "ffn.fc2"))?)?;
    tape.add_row(o, p.var(&block_key(layer, "ffn.fc2_bias"))?)
}

pub fn traced_block(
    tape: &mut Tape,
    x: Var,
    p: &BoundParams,
    layer: usize,
    cfg: &ModelConfig,
) -> Result<(Var, LayerTrace)> {
    let attn_cfg = cfg.attention()?;
    let h = tape.layer_norm(
        x,
        p.var(&block_key(layer, "norm1.gain"))?,
        p.var(&block_key(layer, "norm1.bias"))?,
        LAYER_NORM_EPS,
    )?;
    let trace = traced_attention(tape, h, &attn_cfg, &p.attention(layer)?)?;
    let x = tape.add(x, trace.output)?;
    let h2 = tape.layer_norm(
        x,
        p.var(&block_key(layer, "norm2.gain"))?,
        p.var(&block_key(layer, "norm2.bias"))?,
        LAYER_NORM_EPS,
    )?;
    let f = traced_ffn(tape, h2, p, layer, cfg.activation)?;
    let out = tape.add(x, f)?;
    let queries = tape.concat_cols(&trace.queries)?;
    let keys = tape.concat_cols(&trace.keys)?;
    Ok((
        out,
        LayerTrace {
            attn_input: h,
            queries,
            keys,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct ClassifierTrace {
    /// Logits, shape `[num_classes]`.
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

/// Patch embedding, optional CLS prepend, blocks, final LayerNorm, pooling
/// and linear head. `tokens` is `[patch_grid², d_in]`.
pub fn traced_classifier(
    tape: &mut Tape,
    tokens: Var,
    cfg: &ModelConfig,
    p: &BoundParams,
) -> Result<ClassifierTrace> {
    let expected = [cfg.num_patches(), cfg.d_in];
    if tape.value(tokens).shape() != expected {
        return Err(Error::Shape(format!(
            "classifier expects {expected:?} patch tokens, got {:?}",
            tape.value(tokens).shape()
        )));
    }
    let e = tape.matmul(tokens, p.var("embed.weight")?)?;
    let mut x = tape.add_row(e, p.var("embed.bias")?)?;
    if cfg.pooling == Pooling::ClsToken {
        x = tape.concat_rows(&[p.var("cls")?, x])?;
    }
    let mut layers = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let (next, trace) = traced_block(tape, x, p, l, cfg)?;
        x = next;
        layers.push(trace);
    }
    let x = tape.layer_norm(x, p.var("norm.gain")?, p.var("norm.bias")?, LAYER_NORM_EPS)?;
    let pooled = match cfg.pooling {
        Pooling::MeanPool => tape.mean_rows(x)?,
        Pooling::ClsToken => tape.select_rows(x, &[0])?,
    };
    let logits = tape.matmul(pooled, p.var("head.weight")?)?;
    let logits = tape.add_row(logits, p.var("head.bias")?)?;
    let logits = tape.reshape(logits, &[cfg.num_classes])?;
    Ok(ClassifierTrace { logits, layers })
}

/// Inference-only classifier forward. Adds its operation counts to `cost`.
pub fn classifier_forward(
    tokens: &Tensor,
    cfg: &ModelConfig,
    params: &ParamStore,
    cost: &mut Cost,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let t = tape.leaf(tokens.clone());
    let trace = traced_classifier(&mut tape, t, cfg, &p)?;
    let used = tape.cost();
    cost.add_exp(used.exp_ops);
    cost.add_mul_adds(used.mul_adds);
    if let crate::cost::OrderingUsed::Fixed(o) = used.ordering_used {
        cost.record_ordering(o);
    }
    Ok(tape.value(trace.logits).clone())
}

/// Largest `|Q̂ K̂^T|` entry of the first block's SimA heads when the
/// attention input is multiplied by `input_scale`. With ℓ1/ℓ2 normalization
/// the result does not depend on the scale; without it the scores grow as
/// `input_scale²`.
pub fn attention_score_magnitude(
    tokens: &Tensor,
    cfg: &ModelConfig,
    params: &ParamStore,
    input_scale: f64,
) -> Result<f64> {
    if cfg.variant != Variant::SimA {
        return Err(Error::Config(
            "score magnitudes are defined for SimA".into(),
        ));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let t = tape.leaf(tokens.clone());
    let trace = traced_classifier(&mut tape, t, cfg, &p)?;
    let attn_input = tape.value(trace.layers[0].attn_input).scale(input_scale);
    let attn_cfg = cfg.attention()?;
    let mut cost = Cost::new();
    let (q, k, _) = project_qkv(&attn_input, &attn_cfg, &params.block(0)?.attn, &mut cost)?;
    let dh = attn_cfg.head_dim();
    let mut max = 0.0f64;
    for h in 0..attn_cfg.heads {
        let qh = normalize_columns(
            &q.slice_cols(h * dh, dh)?,
            cfg.normalization,
            attn_cfg.norm_eps,
        )?;
        let kh = normalize_columns(
            &k.slice_cols(h * dh, dh)?,
            cfg.normalization,
            attn_cfg.norm_eps,
        )?;
        max = max.max(matmul_nt(&qh, &kh, &mut cost)?.max_abs());
    }
    Ok(max)
}
