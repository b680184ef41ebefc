//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in creation order and refer to their inputs by index,
//! so the recorded graph is acyclic by construction and a single reverse
//! sweep visits every node after all of its consumers.
//!
//! [`Tape::backward`] does not mutate the tape: it returns a fresh
//! [`Gradients`] map, and calling it twice yields identical results.

mod gradcheck;

use crate::attention::{elu_feature_scalar, ChannelNorm};
use crate::cost::{Cost, CostReport};
use crate::error::{Error, Result};
use crate::tensor::{self, gelu_grad_scalar, matmul_nt, matmul_tn, row_moments, Tensor};

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ColNorm {
        x: Var,
        norm: ChannelNorm,
        eps: f64,
    },
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Gelu(Var),
    Relu(Var),
    EluFeature(Var),
    DivRows(Var, Var),
    MulRowVec(Var, Var),
    RowSums(Var),
    ColSums(Var),
    Sum(Var),
    MeanRows(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        label: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    cost: Cost,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Counters accumulated by every forward op recorded so far.
    pub fn cost(&self) -> CostReport {
        self.cost.report()
    }

    pub fn cost_mut(&mut self) -> &mut Cost {
        &mut self.cost
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            &mut self.cost,
        )?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    /// Matrix plus a bias vector broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// Column normalization. `ChannelNorm::None` returns `x` unchanged.
    pub fn normalize_columns(&mut self, x: Var, norm: ChannelNorm, eps: f64) -> Result<Var> {
        if norm == ChannelNorm::None {
            return Ok(x);
        }
        let out = crate::attention::normalize_columns(self.value(x), norm, eps)?;
        Ok(self.push(out, Op::ColNorm { x, norm, eps }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(&self.nodes[a.0].value, &mut self.cost)?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_cols(&self.nodes[a.0].value, &mut self.cost)?;
        Ok(self.push(out, Op::SoftmaxCols(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let out = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = tensor::gelu(&self.nodes[a.0].value, &mut self.cost);
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        self.push(out, Op::Relu(a))
    }

    /// `1 + elu(x)`.
    pub fn elu_feature(&mut self, a: Var) -> Var {
        let out = crate::attention::elu_feature(&self.nodes[a.0].value, &mut self.cost);
        self.push(out, Op::EluFeature(a))
    }

    /// Divides row `i` of `a` by `z[i]` where `z` is `[rows, 1]`.
    pub fn div_rows(&mut self, a: Var, z: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(z).shape() != [r, 1] {
            return Err(Error::Dimension {
                op: "div_rows",
                lhs: vec![r, c],
                rhs: self.value(z).shape().to_vec(),
            });
        }
        let zv = self.value(z).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (row, zi) in data.chunks_mut(c.max(1)).zip(zv) {
            row.iter_mut().for_each(|x| *x /= zi);
        }
        let out = Tensor::from_vec(&[r, c], data)?;
        Ok(self.push(out, Op::DivRows(a, z)))
    }

    /// Multiplies every row of `a` elementwise by the `[1, cols]` row `r`.
    pub fn mul_row_vec(&mut self, a: Var, r: Var) -> Result<Var> {
        let (rows, c) = self.value(a).dims2()?;
        if self.value(r).len() != c {
            return Err(Error::Dimension {
                op: "mul_row_vec",
                lhs: vec![rows, c],
                rhs: self.value(r).shape().to_vec(),
            });
        }
        let rv = self.value(r).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            row.iter_mut().zip(&rv).for_each(|(x, &s)| *x *= s);
        }
        let out = Tensor::from_vec(&[rows, c], data)?;
        Ok(self.push(out, Op::MulRowVec(a, r)))
    }

    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).row_sums()?;
        Ok(self.push(out, Op::RowSums(a)))
    }

    pub fn col_sums(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).col_sums()?;
        Ok(self.push(out, Op::ColSums(a)))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Mean over rows, shape `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).dims2()?.0 as f64;
        let out = self.value(a).col_sums()?.scale(1.0 / n);
        Ok(self.push(out, Op::MeanRows(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, width)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(indices)?;
        Ok(self.push(out, Op::SelectRows(x, indices.to_vec())))
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    /// Counts one exp per logit.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        self.cost.add_exp(z.len() as u64);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut scratch = Cost::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let ga = matmul_nt(g, self.value(b), &mut scratch)?;
                let gb = matmul_tn(self.value(a), g, &mut scratch)?;
                accumulate(grads, a, ga)?;
                accumulate(grads, b, gb)?;
            }
            &Op::Transpose(a) => accumulate(grads, a, tensor::transpose(g)?)?,
            &Op::Add(a, b) => {
                accumulate(grads, a, g.clone())?;
                accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                accumulate(grads, a, g.clone())?;
                accumulate(grads, b, g.scale(-1.0))?;
            }
            &Op::Mul(a, b) => {
                accumulate(grads, a, g.mul(self.value(b))?)?;
                accumulate(grads, b, g.mul(self.value(a))?)?;
            }
            &Op::Scale(a, c) => accumulate(grads, a, g.scale(c))?,
            &Op::AddRow(a, bias) => {
                accumulate(grads, a, g.clone())?;
                let gb = g.col_sums()?.reshape(self.value(bias).shape())?;
                accumulate(grads, bias, gb)?;
            }
            &Op::ColNorm { x, norm, eps } => {
                accumulate(grads, x, col_norm_backward(self.value(x), g, norm, eps)?)?;
            }
            &Op::SoftmaxRows(a) => {
                let (r, c) = y.dims2()?;
                let mut out = vec![0.0; r * c];
                for row in 0..r {
                    let (yr, gr) = (y.row(row), g.row(row));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[row * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, a, Tensor::from_vec(&[r, c], out)?)?;
            }
            &Op::SoftmaxCols(a) => {
                let (r, c) = y.dims2()?;
                let mut dots = vec![0.0; c];
                for row in 0..r {
                    for ((d, &yv), &gv) in dots.iter_mut().zip(y.row(row)).zip(g.row(row)) {
                        *d += yv * gv;
                    }
                }
                let mut out = vec![0.0; r * c];
                for row in 0..r {
                    for j in 0..c {
                        out[row * c + j] = y.at(row, j) * (g.at(row, j) - dots[j]);
                    }
                }
                accumulate(grads, a, Tensor::from_vec(&[r, c], out)?)?;
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let (gx, gg, gb) = layer_norm_backward(self.value(x), self.value(gain), g, eps)?;
                accumulate(grads, x, gx)?;
                accumulate(grads, gain, gg.reshape(self.value(gain).shape())?)?;
                accumulate(grads, bias, gb.reshape(self.value(bias).shape())?)?;
            }
            &Op::Gelu(a) => {
                let ga = self
                    .value(a)
                    .zip_map(g, "gelu_backward", |x, gv| gv * gelu_grad_scalar(x))?;
                accumulate(grads, a, ga)?;
            }
            &Op::Relu(a) => {
                let ga =
                    self.value(a).zip_map(
                        g,
                        "relu_backward",
                        |x, gv| if x > 0.0 { gv } else { 0.0 },
                    )?;
                accumulate(grads, a, ga)?;
            }
            &Op::EluFeature(a) => {
                let ga = self.value(a).zip_map(g, "elu_backward", |x, gv| {
                    if x < 0.0 {
                        gv * elu_feature_scalar(x)
                    } else {
                        gv
                    }
                })?;
                accumulate(grads, a, ga)?;
            }
            &Op::DivRows(a, z) => {
                let (r, c) = y.dims2()?;
                let (av, zv) = (self.value(a), self.value(z));
                let mut ga = vec![0.0; r * c];
                let mut gz = vec![0.0; r];
                for i in 0..r {
                    let zi = zv.data()[i];
                    for j in 0..c {
                        ga[i * c + j] = g.at(i, j) / zi;
                        gz[i] -= g.at(i, j) * av.at(i, j) / (zi * zi);
                    }
                }
                accumulate(grads, a, Tensor::from_vec(&[r, c], ga)?)?;
                accumulate(grads, z, Tensor::from_vec(&[r, 1], gz)?)?;
            }
            &Op::MulRowVec(a, rv) => {
                let (r, c) = y.dims2()?;
                let (av, rvals) = (self.value(a), self.value(rv));
                let mut ga = vec![0.0; r * c];
                let mut gr = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g.at(i, j) * rvals.data()[j];
                        gr[j] += g.at(i, j) * av.at(i, j);
                    }
                }
                accumulate(grads, a, Tensor::from_vec(&[r, c], ga)?)?;
                accumulate(grads, rv, Tensor::from_vec(rvals.shape(), gr)?)?;
            }
            &Op::RowSums(a) => {
                let (r, c) = self.value(a).dims2()?;
                let data = (0..r)
                    .flat_map(|i| std::iter::repeat_n(g.data()[i], c))
                    .collect();
                accumulate(grads, a, Tensor::from_vec(&[r, c], data)?)?;
            }
            &Op::ColSums(a) => {
                let (r, _) = self.value(a).dims2()?;
                let data = (0..r).flat_map(|_| g.data().iter().copied()).collect();
                accumulate(grads, a, Tensor::from_vec(self.value(a).shape(), data)?)?;
            }
            &Op::Sum(a) => {
                accumulate(grads, a, Tensor::full(self.value(a).shape(), g.item()))?;
            }
            &Op::MeanRows(a) => {
                let (r, _) = self.value(a).dims2()?;
                let inv = 1.0 / r as f64;
                let data = (0..r)
                    .flat_map(|_| g.data().iter().map(move |&v| v * inv))
                    .collect();
                accumulate(grads, a, Tensor::from_vec(self.value(a).shape(), data)?)?;
            }
            &Op::Reshape(a) => accumulate(grads, a, g.reshape(self.value(a).shape())?)?,
            &Op::SliceCols { x, start } => {
                let (r, c) = self.value(x).dims2()?;
                let w = g.cols();
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    data[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                accumulate(grads, x, Tensor::from_vec(&[r, c], data)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    accumulate(grads, p, g.slice_cols(start, w)?)?;
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let data = g.data()[start * c..(start + r) * c].to_vec();
                    accumulate(grads, p, Tensor::from_vec(&[r, c], data)?)?;
                    start += r;
                }
            }
            Op::SelectRows(x, indices) => {
                let (r, c) = self.value(*x).dims2()?;
                let mut data = vec![0.0; r * c];
                for (k, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        data[src * c + j] += g.at(k, j);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[r, c], data)?)?;
            }
            &Op::CrossEntropy { logits, label } => {
                let z = self.value(logits);
                let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = z.data().iter().map(|&v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let scale = g.item();
                let data = exps
                    .iter()
                    .enumerate()
                    .map(|(j, e)| scale * (e / total - if j == label { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(grads, logits, Tensor::from_vec(z.shape(), data)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    let slot = &mut grads[v.0];
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

/// Backward of `y[:, j] = x[:, j] / max(norm_j, eps)`. The sign of `x` is
/// treated as constant (zero at zero).
fn col_norm_backward(x: &Tensor, g: &Tensor, norm: ChannelNorm, eps: f64) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; r * c];
    for j in 0..c {
        let col = (0..r).map(|i| x.at(i, j));
        let raw = match norm {
            ChannelNorm::L1 => col.map(f64::abs).sum::<f64>(),
            ChannelNorm::L2 => col.map(|v| v * v).sum::<f64>().sqrt(),
            ChannelNorm::None => unreachable!("identity normalization records no node"),
        };
        let s = raw.max(eps);
        let gx_dot: f64 = (0..r).map(|i| g.at(i, j) * x.at(i, j)).sum();
        for i in 0..r {
            let mut v = g.at(i, j) / s;
            if raw > eps {
                v -= match norm {
                    ChannelNorm::L1 => sign(x.at(i, j)) * gx_dot / (s * s),
                    _ => x.at(i, j) * gx_dot / (s * s * s),
                };
            }
            out[i * c + j] = v;
        }
    }
    Tensor::from_vec(&[r, c], out)
}

fn sign(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    g: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = x.dims2()?;
    let mut gx = vec![0.0; n * d];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let df = d as f64;
    for i in 0..n {
        let row = x.row(i);
        let (mean, inv_std) = row_moments(row, eps);
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
        let dxhat: Vec<f64> = g
            .row(i)
            .iter()
            .zip(gain.data())
            .map(|(a, b)| a * b)
            .collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / df;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
        for j in 0..d {
            gg[j] += g.at(i, j) * xhat[j];
            gb[j] += g.at(i, j);
            gx[i * d + j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    Ok((
        Tensor::from_vec(&[n, d], gx)?,
        Tensor::from_vec(&[d], gg)?,
        Tensor::from_vec(&[d], gb)?,
    ))
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}
