//! Single-head attention kernels and the column normalizations SimA uses.

use crate::cost::{Cost, ProductOrder};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_cols, softmax_rows, Element, Tensor};

use super::ChannelNorm;

/// Divides every column by its ℓ1 norm over the rows, clamped below at
/// `eps`. An all-zero column stays all-zero.
pub fn l1_normalize_columns<T: Element>(m: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    scale_columns(m, eps, |acc, x| acc + x.abs(), |s| s)
}

/// Same as [`l1_normalize_columns`] with the ℓ2 norm.
pub fn l2_normalize_columns<T: Element>(m: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    scale_columns(m, eps, |acc, x| acc + x * x, |s| s.sqrt())
}

pub fn normalize_columns<T: Element>(
    m: &Tensor<T>,
    norm: ChannelNorm,
    eps: T,
) -> Result<Tensor<T>> {
    match norm {
        ChannelNorm::L1 => l1_normalize_columns(m, eps),
        ChannelNorm::L2 => l2_normalize_columns(m, eps),
        ChannelNorm::None => Ok(m.clone()),
    }
}

fn scale_columns<T: Element>(
    m: &Tensor<T>,
    eps: T,
    accumulate: impl Fn(T, T) -> T,
    finish: impl Fn(T) -> T,
) -> Result<Tensor<T>> {
    let (rows, cols) = m.dims2()?;
    let mut norms = vec![T::zero(); cols];
    for i in 0..rows {
        for (acc, &x) in norms.iter_mut().zip(m.row(i)) {
            *acc = accumulate(*acc, x);
        }
    }
    let inv: Vec<T> = norms
        .into_iter()
        .map(|s| finish(s).max(eps).recip())
        .collect();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        data.extend(m.row(i).iter().zip(&inv).map(|(&x, &s)| x * s));
    }
    Tensor::from_vec(&[rows, cols], data)
}

/// Ordering rule for SimA: group as `(Q K^T) V` only when there are fewer
/// tokens than per-head channels.
pub fn choose_ordering(n_tokens: usize, d_head: usize) -> ProductOrder {
    if n_tokens < d_head {
        ProductOrder::TokensFirst
    } else {
        ProductOrder::ChannelsFirst
    }
}

fn check_qkv<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize)> {
    let dims = q.dims2()?;
    for other in [k, v] {
        if other.dims2()? != dims {
            return Err(Error::Dimension {
                op: "attention head",
                lhs: q.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    Ok(dims)
}

/// `(a b^T) c` or `a (b^T c)` depending on `order`.
fn triple_product<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    order: ProductOrder,
    cost: &mut Cost,
) -> Result<Tensor<T>> {
    cost.record_ordering(order);
    match order {
        ProductOrder::TokensFirst => matmul(&matmul_nt(a, b, cost)?, c, cost),
        ProductOrder::ChannelsFirst => matmul(a, &matmul_tn(b, c, cost)?, cost),
    }
}

/// SimA for one head: `O = Q̂ K̂^T V` with ℓ1 column normalization and no
/// scaling. Evaluates no transcendentals.
pub fn sima_head_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    order: ProductOrder,
    eps: T,
    cost: &mut Cost,
) -> Result<Tensor<T>> {
    sima_head_forward_with_norm(q, k, v, ChannelNorm::L1, order, eps, cost)
}

/// SimA with a selectable channel normalization (ablation switch).
pub fn sima_head_forward_with_norm<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    norm: ChannelNorm,
    order: ProductOrder,
    eps: T,
    cost: &mut Cost,
) -> Result<Tensor<T>> {
    check_qkv(q, k, v)?;
    let q_hat = normalize_columns(q, norm, eps)?;
    let k_hat = normalize_columns(k, norm, eps)?;
    triple_product(&q_hat, &k_hat, v, order, cost)
}

/// Softmax attention for one head: `softmax_rows(Q K^T / sqrt(d)) V`.
pub fn msa_head_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cost: &mut Cost,
) -> Result<Tensor<T>> {
    let (_, d) = check_qkv(q, k, v)?;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let scores = matmul_nt(q, k, cost)?.scale(scale);
    let attn = softmax_rows(&scores, cost)?;
    cost.record_ordering(ProductOrder::TokensFirst);
    matmul(&attn, v, cost)
}

/// Cross-covariance attention for one head: `V softmax_cols(K^T Q)`.
pub fn xca_head_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cost: &mut Cost,
) -> Result<Tensor<T>> {
    check_qkv(q, k, v)?;
    let attn = softmax_cols(&matmul_tn(k, q, cost)?, cost)?;
    cost.record_ordering(ProductOrder::ChannelsFirst);
    matmul(v, &attn, cost)
}

/// Feature map `1 + elu(x)`. Only the negative branch evaluates `exp`.
pub fn elu_feature<T: Element>(m: &Tensor<T>, cost: &mut Cost) -> Tensor<T> {
    cost.add_exp(count_negative(m));
    m.map(elu_feature_scalar)
}

pub(crate) fn elu_feature_scalar<T: Element>(x: T) -> T {
    if x < T::zero() {
        x.exp()
    } else {
        x + T::one()
    }
}

pub(crate) fn count_negative<T: Element>(m: &Tensor<T>) -> u64 {
    m.data().iter().filter(|&&x| x < T::zero()).count() as u64
}

/// Kernelized linear attention with `φ(x) = 1 + elu(x)` and row-stochastic
/// normalization: `O[n] = φ(Q)[n] φ(K)^T V / φ(Q)[n] φ(K)^T 1`.
///
/// The normalizer is a reduction and does not touch the multiply-add
/// counter, so both orderings cost exactly what SimA costs.
pub fn elu_linear_head_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    order: ProductOrder,
    cost: &mut Cost,
) -> Result<Tensor<T>> {
    let (n, _) = check_qkv(q, k, v)?;
    let fq = elu_feature(q, cost);
    let fk = elu_feature(k, cost);
    cost.record_ordering(order);
    let (numer, denom) = match order {
        ProductOrder::TokensFirst => {
            let weights = matmul_nt(&fq, &fk, cost)?;
            let denom = weights.row_sums()?.into_data();
            (matmul(&weights, v, cost)?, denom)
        }
        ProductOrder::ChannelsFirst => {
            let kv = matmul_tn(&fk, v, cost)?;
            let k_sum = fk.col_sums()?;
            let denom = (0..n)
                .map(|i| {
                    fq.row(i)
                        .iter()
                        .zip(k_sum.data())
                        .map(|(&a, &b)| a * b)
                        .sum()
                })
                .collect::<Vec<T>>();
            (matmul(&fq, &kv, cost)?, denom)
        }
    };
    let (rows, cols) = numer.dims2()?;
    let mut data = numer.into_data();
    for (row, &z) in data.chunks_mut(cols.max(1)).zip(&denom) {
        let inv = z.recip();
        for x in row {
            *x = *x * inv;
        }
    }
    Tensor::from_vec(&[rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn l1_examples() {
        assert_eq!(
            l1_normalize_columns(&t(&[&[2.0], &[2.0]]), 1e-6).unwrap(),
            t(&[&[0.5], &[0.5]])
        );
        assert_eq!(
            l1_normalize_columns(&t(&[&[1.0, -1.0]]), 1e-6).unwrap(),
            t(&[&[1.0, -1.0]])
        );
        let z: Tensor = Tensor::zeros(&[3, 2]);
        assert_eq!(l1_normalize_columns(&z, 1e-6).unwrap(), z);
    }

    #[test]
    fn l1_columns_have_unit_abs_sum() {
        let m: Tensor = Rng::new(21).normal_tensor(&[5, 4], 1.0);
        let out = l1_normalize_columns(&m, 1e-6).unwrap();
        for j in 0..4 {
            let s: f64 = (0..5).map(|i| out.at(i, j).abs()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_columns_have_unit_square_sum() {
        let m: Tensor = Rng::new(22).normal_tensor(&[6, 3], 4.0);
        let out = l2_normalize_columns(&m, 1e-6).unwrap();
        for j in 0..3 {
            let s: f64 = (0..6).map(|i| out.at(i, j).powi(2)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ordering_rule() {
        assert_eq!(choose_ordering(64, 256), ProductOrder::TokensFirst);
        assert_eq!(choose_ordering(256, 64), ProductOrder::ChannelsFirst);
        assert_eq!(choose_ordering(128, 128), ProductOrder::ChannelsFirst);
    }

    #[test]
    fn sima_simple_cases() {
        let mut cost = Cost::new();
        let mut rng = Rng::new(3);
        let q: Tensor = rng.normal_tensor(&[4, 3], 1.0);
        let k: Tensor = rng.normal_tensor(&[4, 3], 1.0);
        let zeros: Tensor = Tensor::zeros(&[4, 3]);
        for order in [ProductOrder::TokensFirst, ProductOrder::ChannelsFirst] {
            let o = sima_head_forward(&q, &k, &zeros, order, 1e-6, &mut cost).unwrap();
            assert_eq!(o, zeros);
        }
        let o = sima_head_forward(
            &t(&[&[3.0]]),
            &t(&[&[5.0]]),
            &t(&[&[7.0]]),
            ProductOrder::TokensFirst,
            1e-6,
            &mut cost,
        )
        .unwrap();
        assert_eq!(o, t(&[&[7.0]]));
        assert_eq!(cost.exp_ops(), 0);
    }

    #[test]
    fn msa_uniform_and_hand_value() {
        let mut cost = Cost::new();
        let mut rng = Rng::new(4);
        let k: Tensor = rng.normal_tensor(&[5, 2], 1.0);
        let v: Tensor = rng.normal_tensor(&[5, 2], 1.0);
        let o = msa_head_forward(&Tensor::zeros(&[5, 2]), &k, &v, &mut cost).unwrap();
        let mean = v.col_sums().unwrap().scale(0.2);
        for i in 0..5 {
            for j in 0..2 {
                assert!((o.at(i, j) - mean.at(0, j)).abs() < 1e-12);
            }
        }
        assert_eq!(cost.exp_ops(), 25);

        let q = t(&[&[1.0], &[0.0]]);
        let v = t(&[&[1.0], &[2.0]]);
        let o = msa_head_forward(&q, &q, &v, &mut Cost::new()).unwrap();
        let e = std::f64::consts::E;
        assert!((o.at(0, 0) - (e + 2.0) / (e + 1.0)).abs() < 1e-12);
        assert!((o.at(0, 0) - 1.2689).abs() < 1e-4);
        assert!((o.at(1, 0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn xca_zero_keys_give_channel_means() {
        let mut rng = Rng::new(5);
        let q: Tensor = rng.normal_tensor(&[4, 3], 1.0);
        let v: Tensor = rng.normal_tensor(&[4, 3], 1.0);
        let mut cost = Cost::new();
        let o = xca_head_forward(&q, &Tensor::zeros(&[4, 3]), &v, &mut cost).unwrap();
        for i in 0..4 {
            let mean = v.row(i).iter().sum::<f64>() / 3.0;
            for j in 0..3 {
                assert!((o.at(i, j) - mean).abs() < 1e-12);
            }
        }
        assert_eq!(cost.exp_ops(), 9);
    }

    #[test]
    fn elu_feature_and_constant_inputs() {
        let mut cost = Cost::new();
        let phi = elu_feature(&t(&[&[0.0, -1.0, 2.0]]), &mut cost);
        assert_eq!(phi.at(0, 0), 1.0);
        assert!((phi.at(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(phi.at(0, 2), 3.0);
        assert_eq!(cost.exp_ops(), 1);

        let ones: Tensor = Tensor::ones(&[5, 3]);
        for order in [ProductOrder::TokensFirst, ProductOrder::ChannelsFirst] {
            let o = elu_linear_head_forward(&ones, &ones, &ones, order, &mut Cost::new()).unwrap();
            assert!(o.max_abs_diff(&ones) < 1e-15);
        }
    }

    #[test]
    fn mismatched_head_shapes_are_rejected() {
        let a: Tensor = Tensor::zeros(&[3, 2]);
        let b: Tensor = Tensor::zeros(&[3, 3]);
        assert!(msa_head_forward(&a, &b, &a, &mut Cost::new()).is_err());
    }
}
