//! Dense row-major `f64` arrays and the numeric kernels the transformer
//! needs. Everything here is a pure function of its inputs; the reverse-mode
//! machinery lives in [`crate::autodiff`] and calls into these kernels.

mod kernels;
mod svd;

pub use kernels::{gelu, gelu_grad, layer_norm, softmax_rows, GeluKind, LayerNormCache};
pub use svd::{svd, Svd};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MakdError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(MakdError::invalid(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MakdError::Shape { op: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(MakdError::Shape { op: "from_rows", lhs: vec![cols], rhs: vec![r.len()] });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, &v) in diag.iter().enumerate() {
            t.data[i * n + i] = v;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape: shape.to_vec(), data }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Leading dimension when viewed as a matrix; vectors are one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(MakdError::Shape { op: "reshape", lhs: self.shape, rhs: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(MakdError::Shape { op, lhs: self.shape.clone(), rhs: vec![] });
        }
        Ok((self.shape[0], self.shape[1]))
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

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(MakdError::Shape { op: "matmul", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul_nt")?;
        let (n, k2) = other.require_matrix("matmul_nt")?;
        if k != k2 {
            return Err(MakdError::Shape { op: "matmul_nt", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(MakdError::Shape { op, lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination; callers guarantee equal shapes.
    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.len() != self.cols() {
            return Err(MakdError::Shape { op: "add_row_vector", lhs: self.shape.clone(), rhs: bias.shape.clone() });
        }
        let mut out = self.clone();
        let c = self.cols();
        for row in out.data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies a rectangular block `[r0, r0+nr) × [c0, c0+nc)`.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            data.extend_from_slice(&self.data[i * c + c0..i * c + c0 + nc]);
        }
        Tensor { shape: vec![nr, nc], data }
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
