//! Dense row-major tensors and the elementary kernels built on them.
//!
//! Everything downstream (attention, the autodiff tape, the toy model) is
//! expressed through the functions here. Kernels that evaluate
//! transcendentals or matrix products take a [`Cost`] handle and bump the
//! matching counter.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::cost::Cost;
use crate::error::{Error, Result};

/// LayerNorm epsilon used throughout the crate.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_COEFF: f64 = 0.044_715;

/// Scalar type a [`Tensor`] can hold. Implemented for `f64` (default) and
/// `f32` (benchmark mode).
pub trait Element:
    Float + Default + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c <- a * b` for row-major operands described by explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Element for $t {
            const NAME: &'static str = $name;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above and the callers' shape checks
                // guarantee every strided access stays inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f64, "f64", matrixmultiply::dgemm);
impl_element!(f32, "f32", matrixmultiply::sgemm);

/// Dense tensor with an explicit shape and row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 32 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} elements]", self.data.len())
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Row count of a matrix. Panics on other ranks.
    pub fn rows(&self) -> usize {
        self.dims2().expect("rank-2 tensor").0
    }

    /// Column count of a matrix. Panics on other ranks.
    pub fn cols(&self) -> usize {
        self.dims2().expect("rank-2 tensor").1
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + width > c {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Self::from_vec(&[r, width], data)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let r = parts.first().map_or(Ok(0), |p| p.dims2().map(|d| d.0))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: p.shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Self::from_vec(&[r, total], data)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map_or(Ok(0), |p| p.dims2().map(|d| d.1))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: p.shape.clone(),
                });
            }
            rows += pr;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(&[rows, c], data)
    }

    /// Gathers rows: `out[i] = self[indices[i]]`.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Shape(format!("row {i} out of range for {r} rows")));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(&[indices.len(), c], data)
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if bias.len() != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(c.max(1)).take(r) {
            for (x, &b) in row.iter_mut().zip(&bias.data) {
                *x = *x + b;
            }
        }
        Self::from_vec(&[r, c], data)
    }

    /// Per-column sums of a matrix, as a `[1, cols]` row.
    pub fn col_sums(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o = *o + x;
            }
        }
        Self::from_vec(&[1, c], out)
    }

    /// Per-row sums of a matrix, as a `[rows, 1]` column.
    pub fn row_sums(&self) -> Result<Self> {
        let (r, _) = self.dims2()?;
        let data = (0..r).map(|i| self.row(i).iter().copied().sum()).collect();
        Self::from_vec(&[r, 1], data)
    }
}

/// Matrix product `a b`. Adds `m * n * k` to the multiply-add counter.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>, cost: &mut Cost) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, &mut out,
    );
    cost.add_mul_adds((m * n * k) as u64);
    Tensor::from_vec(&[m, n], out)
}

/// `a^T b` without materializing the transpose.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>, cost: &mut Cost) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m, k, n, &a.data, 1, m as isize, &b.data, n as isize, 1, &mut out,
    );
    cost.add_mul_adds((m * n * k) as u64);
    Tensor::from_vec(&[m, n], out)
}

/// `a b^T` without materializing the transpose.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>, cost: &mut Cost) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m, k, n, &a.data, k as isize, 1, &b.data, 1, k as isize, &mut out,
    );
    cost.add_mul_adds((m * n * k) as u64);
    Tensor::from_vec(&[m, n], out)
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], data)
}

/// Row-wise softmax with max subtraction. Counts one exp per entry.
pub fn softmax_rows<T: Element>(a: &Tensor<T>, cost: &mut Cost) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let mut data = a.data.clone();
    for row in data.chunks_mut(c.max(1)).take(r) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total = total + *x;
        }
        let inv = total.recip();
        for x in row.iter_mut() {
            *x = *x * inv;
        }
    }
    cost.add_exp((r * c) as u64);
    Tensor::from_vec(&[r, c], data)
}

/// Column-wise softmax with max subtraction. Counts one exp per entry.
pub fn softmax_cols<T: Element>(a: &Tensor<T>, cost: &mut Cost) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let mut max = vec![T::neg_infinity(); c];
    for i in 0..r {
        for (m, &x) in max.iter_mut().zip(a.row(i)) {
            *m = m.max(x);
        }
    }
    let mut data = a.data.clone();
    let mut total = vec![T::zero(); c];
    for row in data.chunks_mut(c.max(1)).take(r) {
        for ((x, &m), t) in row.iter_mut().zip(&max).zip(total.iter_mut()) {
            *x = (*x - m).exp();
            *t = *t + *x;
        }
    }
    let inv: Vec<T> = total.iter().map(|t| t.recip()).collect();
    for row in data.chunks_mut(c.max(1)).take(r) {
        for (x, &s) in row.iter_mut().zip(&inv) {
            *x = *x * s;
        }
    }
    cost.add_exp((r * c) as u64);
    Tensor::from_vec(&[r, c], data)
}

/// tanh-approximation GELU. Counts one transcendental per element.
pub fn gelu<T: Element>(a: &Tensor<T>, cost: &mut Cost) -> Tensor<T> {
    cost.add_exp(a.len() as u64);
    a.map(gelu_scalar)
}

pub(crate) fn gelu_scalar<T: Element>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let inner = c * (x + T::from_f64(GELU_COEFF) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of [`gelu_scalar`].
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub fn relu<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Per-row standardization `(x - mean) / sqrt(var + eps)` followed by the
/// affine `gain`/`bias` (both of length `D`).
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let (mean, inv_std) = row_moments(x.row(i), eps);
        for ((&v, &g), &b) in x.row(i).iter().zip(&gain.data).zip(&bias.data) {
            out.push((v - mean) * inv_std * g + b);
        }
    }
    Tensor::from_vec(&[n, d], out)
}

/// Mean and `1 / sqrt(var + eps)` of one row (biased variance).
pub(crate) fn row_moments<T: Element>(row: &[T], eps: T) -> (T, T) {
    let d = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    (mean, (var + eps).sqrt().recip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a.at(i, t) * b.at(t, j);
                }
            }
        }
        Tensor::from_vec(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut cost = Cost::new();
        let id = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&id, &b, &mut cost).unwrap(), b);

        let row = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        let c = matmul(&row, &col, &mut cost).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
        assert_eq!(cost.mul_adds(), 8 + 2);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(42);
        let a: Tensor = rng.normal_tensor(&[7, 5], 1.0);
        let b: Tensor = rng.normal_tensor(&[5, 3], 1.0);
        let mut cost = Cost::new();
        let c = matmul(&a, &b, &mut cost).unwrap();
        assert!(c.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        assert_eq!(cost.mul_adds(), 7 * 5 * 3);
    }

    #[test]
    fn matmul_all_small_shapes() {
        let mut rng = Rng::new(1);
        for m in 1..=16 {
            for k in [1, 2, 5, 9, 16] {
                for n in [1, 3, 8, 16] {
                    let a: Tensor = rng.normal_tensor(&[m, k], 1.0);
                    let b: Tensor = rng.normal_tensor(&[k, n], 1.0);
                    let c = matmul(&a, &b, &mut Cost::new()).unwrap();
                    assert!(c.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = Rng::new(5);
        let a: Tensor = rng.normal_tensor(&[6, 4], 1.0);
        let b: Tensor = rng.normal_tensor(&[6, 3], 1.0);
        let c: Tensor = rng.normal_tensor(&[5, 4], 1.0);
        let mut cost = Cost::new();
        let tn = matmul_tn(&a, &b, &mut cost).unwrap();
        assert!(tn.max_abs_diff(&naive_matmul(&transpose(&a).unwrap(), &b)) < 1e-12);
        let nt = matmul_nt(&a, &c, &mut cost).unwrap();
        assert!(nt.max_abs_diff(&naive_matmul(&a, &transpose(&c).unwrap())) < 1e-12);
        assert_eq!(cost.mul_adds(), (4 * 3 * 6 + 6 * 5 * 4) as u64);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a: Tensor = Tensor::zeros(&[2, 3]);
        let b: Tensor = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b, &mut Cost::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn transpose_cases() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(
            transpose(&a).unwrap(),
            Tensor::from_rows(&[[1.0, 3.0], [2.0, 4.0]]).unwrap()
        );
        let row = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(transpose(&row).unwrap().shape(), &[3, 1]);
        let r: Tensor = Rng::new(3).normal_tensor(&[4, 7], 1.0);
        assert_eq!(transpose(&transpose(&r).unwrap()).unwrap(), r);
        let cube: Tensor = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(transpose(&cube), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut cost = Cost::new();
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0]]).unwrap(), &mut cost).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[[1000.0, 1000.0]]).unwrap(), &mut cost).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap(), &mut cost).unwrap();
        let e = std::f64::consts::E;
        assert!((s.at(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.at(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((s.at(0, 0) - 0.7311).abs() < 1e-4);
        assert_eq!(cost.exp_ops(), 6);
    }

    #[test]
    fn softmax_cols_is_transposed_softmax_rows() {
        let a: Tensor = Rng::new(9).normal_tensor(&[5, 3], 2.0);
        let mut cost = Cost::new();
        let via_cols = softmax_cols(&a, &mut cost).unwrap();
        let via_rows =
            transpose(&softmax_rows(&transpose(&a).unwrap(), &mut cost).unwrap()).unwrap();
        assert!(via_cols.max_abs_diff(&via_rows) < 1e-15);
        assert_eq!(cost.exp_ops(), 30);
    }

    #[test]
    fn gelu_values() {
        let mut cost = Cost::new();
        let x = Tensor::from_rows(&[[0.0, 10.0, 1.0]]).unwrap();
        let y = gelu(&x, &mut cost);
        assert_eq!(y.at(0, 0), 0.0);
        assert!((9.999..=10.0).contains(&y.at(0, 1)));
        // exact GELU(1) = Phi(1) = 0.841344746068543 (erf oracle, see tests/oracles.rs)
        assert!((y.at(0, 2) - 0.841_344_746_068_543).abs() < 1e-3);
        assert_eq!(cost.exp_ops(), 3);
    }

    #[test]
    fn relu_values_and_no_cost() {
        let x = Tensor::from_rows(&[[-3.0, 3.0]]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
        let r: Tensor = Rng::new(2).normal_tensor(&[4, 5], 1.0);
        assert_eq!(relu(&r).shape(), &[4, 5]);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let c = layer_norm(&Tensor::from_rows(&[[3.0, 3.0]]).unwrap(), &g, &b, 1e-6).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let s = layer_norm(&Tensor::from_rows(&[[1.0, -1.0]]).unwrap(), &g, &b, 1e-6).unwrap();
        assert!((s.at(0, 0) - 1.0).abs() < 1e-6 && (s.at(0, 1) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_moments() {
        let x: Tensor = Rng::new(4).normal_tensor(&[6, 9], 3.0);
        let y = layer_norm(&x, &Tensor::ones(&[9]), &Tensor::zeros(&[9]), 1e-6).unwrap();
        for i in 0..6 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let a: Tensor = Rng::new(6).normal_tensor(&[8, 8], 1.0);
        let b: Tensor = Rng::new(7).normal_tensor(&[8, 8], 1.0);
        let c64 = matmul(&a, &b, &mut Cost::new()).unwrap();
        let c32 = matmul(&a.cast::<f32>(), &b.cast::<f32>(), &mut Cost::new()).unwrap();
        assert!(c32.cast::<f64>().max_abs_diff(&c64) < 1e-4);
    }

    #[test]
    fn constructors_validate_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
