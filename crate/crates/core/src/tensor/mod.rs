//! Dense f64 tensors, a reverse-mode tape, and a finite-difference checker.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::finite_diff_check;
pub use tape::{Tape, Var};

use crate::error::{dim_err, Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Row-major dense array with an optional gradient slot of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err("new", format!("zero extent in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err("new", format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return dim_err("from_rows", "ragged rows");
        }
        Self::new(&[m, n], rows.concat())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.grad
            .as_ref()
            .map(|g| Tensor::from_parts(self.shape.clone(), g.clone()))
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return dim_err("set_grad", "gradient length differs from data");
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive FNV-1a over the raw bit patterns; used for golden fixtures.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        Ok(Tensor::from_parts(
            vec![m, n],
            kernels::matmul(&self.data, &other.data, m, k, n),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return dim_err("transpose", format!("expected 2-D, got {:?}", self.shape));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_parts(vec![n, m], kernels::transpose(&self.data, m, n)))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return dim_err("softmax", format!("axis {axis} out of range for {:?}", self.shape));
        }
        let (o, l, i) = kernels::axis_split(&self.shape, axis);
        Ok(Tensor::from_parts(
            self.shape.clone(),
            kernels::softmax(&self.data, o, l, i),
        ))
    }

    /// Normalizes over the last axis with affine `gain`/`bias` of that width.
    pub fn layer_norm(&self, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
        let n = self.cols();
        if gain.len() != n || bias.len() != n {
            return dim_err("layer_norm", format!("affine width {} vs {n}", gain.len()));
        }
        if eps <= 0.0 {
            return Err(Error::Precondition("layer_norm eps must be positive".into()));
        }
        let (y, _, _) = kernels::layer_norm(&self.data, n, gain, bias, eps);
        Ok(Tensor::from_parts(self.shape.clone(), y))
    }

    /// `d×H×W -> d×1` channel-wise spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return dim_err("global_avg_pool", format!("expected d×H×W, got {:?}", self.shape));
        }
        let d = self.shape[0];
        let hw = self.shape[1] * self.shape[2];
        let data = (0..d)
            .map(|c| self.data[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(Tensor::from_parts(vec![d, 1], data))
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return dim_err("matmul", format!("{a:?} · {b:?}"));
    }
    Ok((a[0], a[1], b[1]))
}

/// `softmax(q·kᵀ/√scale_dim)·v`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale_dim: usize) -> Result<Tensor> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return dim_err("attention", "operands must be 2-D");
    }
    if q.cols() != k.cols() {
        return dim_err("attention", format!("query dim {} vs key dim {}", q.cols(), k.cols()));
    }
    if k.rows() != v.rows() {
        return dim_err("attention", format!("{} keys vs {} values", k.rows(), v.rows()));
    }
    let scores = q.matmul(&k.transpose()?)?;
    let s = 1.0 / (scale_dim as f64).sqrt();
    let scores = scores.map(|x| x * s);
    scores.softmax(1)?.matmul(v)
}
