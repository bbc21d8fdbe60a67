//! Dense row-major tensors and the forward kernels the model needs.
//!
//! Storage is always contiguous `f64`; there are no strided views, so any
//! slicing copies. The kernels in this module are shared by the plain
//! functional API and by the recording [`Tape`](crate::autograd::Tape).

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// LayerNorm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

/// Precision a tensor is stored with on disk.
///
/// Arithmetic always runs in double precision; `F32` only affects how
/// checkpoints are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(dim_err!("shape entries must be >= 1, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {n} elements, buffer has {}",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&s| s >= 1), "shape entries must be >= 1");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows when viewed as a matrix; a vector is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&s| s == 0) {
            return Err(dim_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(())
    }

    /// `C = A·B` for `A: m×k`, `B: k×n`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(dim_err!("matmul inner dims {m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, m, k, n, &mut out);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn row_softmax(&self) -> Result<Tensor> {
        if self.data.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN entering softmax".into()));
        }
        let mut out = self.clone();
        let c = self.cols();
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(out)
    }

    /// Row-wise LayerNorm with biased variance.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let c = self.cols();
        if gamma.numel() != c || beta.numel() != c {
            return Err(dim_err!("layer_norm: width {c}, gamma {}, beta {}", gamma.numel(), beta.numel()));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            let (mean, inv_std) = moments(row, eps);
            for (j, x) in row.iter_mut().enumerate() {
                *x = gamma.data[j] * (*x - mean) * inv_std + beta.data[j];
            }
        }
        Ok(out)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }
}

/// Exact GeLU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

/// Mean and `1/sqrt(var + eps)` of a row, biased variance.
pub(crate) fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `out += A·B`, `A: m×k`, `B: k×n`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let (a, b, out) = (&a[..m * k], &b[..k * n], &mut out[..m * n]);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required target features were just detected.
            unsafe { matmul_avx2(a, b, m, k, n, out) };
            return;
        }
    }
    matmul_kernel(a, b, m, k, n, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_avx2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    matmul_kernel(a, b, m, k, n, out);
}

/// 4×8 output tiles held in registers across the whole inner dimension.
/// Products are never fused, so every code path rounds identically.
#[inline(always)]
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    const TR: usize = 4;
    const TC: usize = 8;
    let (mt, nt) = (m / TR * TR, n / TC * TC);
    for i in (0..mt).step_by(TR) {
        let rows: [&[f64]; TR] = std::array::from_fn(|r| &a[(i + r) * k..][..k]);
        for j in (0..nt).step_by(TC) {
            let mut acc = [[0.0f64; TC]; TR];
            for t in 0..k {
                let bt = &b[t * n + j..][..TC];
                for r in 0..TR {
                    let av = rows[r][t];
                    for c in 0..TC {
                        acc[r][c] += av * bt[c];
                    }
                }
            }
            for r in 0..TR {
                let o = &mut out[(i + r) * n + j..][..TC];
                for c in 0..TC {
                    o[c] += acc[r][c];
                }
            }
        }
        for j in nt..n {
            for (r, ar) in rows.iter().enumerate() {
                let mut s = 0.0;
                for t in 0..k {
                    s += ar[t] * b[t * n + j];
                }
                out[(i + r) * n + j] += s;
            }
        }
    }
    for i in mt..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (&a_it, brow) in a[i * k..(i + 1) * k].iter().zip(b.chunks_exact(n)) {
            if a_it == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_it * bv;
            }
        }
    }
}

/// Row-major transpose of an `r×c` matrix.
fn transposed(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for (i, row) in a[..r * c].chunks_exact(c).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j * r + i] = v;
        }
    }
    t
}

/// `out += Aᵀ·B`, `A: k×m`, `B: k×n`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    matmul_into(&transposed(a, k, m), b, m, k, n, out);
}

/// `out += A·Bᵀ`, `A: m×k`, `B: n×k`.
///
/// Every product funnels through [`matmul_into`], whose per-element
/// summation order does not depend on `m`, so results are independent of
/// how rows are batched.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    matmul_into(a, &transposed(b, n, k), m, k, n, out);
}

/// Dot product with four independent accumulators so it vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn shape_invariants() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().rows(), 2);
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(id.matmul(&a).unwrap(), a);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(a.matmul(&z).unwrap(), z);
        let r = m(&[&[1.0, 2.0]]).matmul(&m(&[&[5.0], &[6.0]])).unwrap();
        assert_eq!(r.data(), &[17.0]);
        assert!(matches!(a.matmul(&m(&[&[1.0, 2.0, 3.0]])), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = Tensor::new(&[3, 5], (0..15).map(|x| x as f64 * 0.3 - 2.0).collect()).unwrap();
        let b = Tensor::new(&[3, 4], (0..12).map(|x| (x as f64).sin()).collect()).unwrap();
        let mut tn = vec![0.0; 20];
        matmul_tn_into(a.data(), b.data(), 3, 5, 4, &mut tn);
        let want = a.transpose().matmul(&b).unwrap();
        assert!(want.data().iter().zip(&tn).all(|(x, y)| (x - y).abs() < 1e-12));

        let c = Tensor::new(&[4, 5], (0..20).map(|x| (x as f64).cos()).collect()).unwrap();
        let mut nt = vec![0.0; 12];
        matmul_nt_into(a.data(), c.data(), 3, 5, 4, &mut nt);
        let want = a.matmul(&c.transpose()).unwrap();
        assert!(want.data().iter().zip(&nt).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn softmax_examples() {
        let s = m(&[&[0.0, 0.0]]).row_softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = m(&[&[1000.0, 0.0]]).row_softmax().unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let s = m(&[&[1f64.ln(), 3f64.ln()]]).row_softmax().unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12 && (s.data()[1] - 0.75).abs() < 1e-12);
        assert!(matches!(m(&[&[f64::NAN, 0.0]]).row_softmax(), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let y = Tensor::full(&[3], 7.0).layer_norm(&one, &zero, LN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let one = Tensor::full(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        let y = Tensor::new(&[2], vec![-1.0, 1.0]).unwrap().layer_norm(&one, &zero, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let g = Tensor::full(&[2], 2.0);
        let b = Tensor::full(&[2], 1.0);
        let y = Tensor::new(&[2], vec![0.0, 2.0]).unwrap().layer_norm(&g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(30.0) - 30.0).abs() < 1e-12);
        assert!(gelu(-30.0).abs() < 1e-12);
        // Φ(1) = (1 + erf(1/√2)) / 2 with erf(1/√2) = 0.6826894921370859
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-14);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9, "x={x}");
        }
    }
}
