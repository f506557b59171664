//! Dense row-major matrices and 4-D convolution kernels.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Products smaller than this many multiply-adds stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`DenseMatrix::new`] but also rejects NaN and infinite entries.
    pub fn new_finite(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self::new(rows, cols, data)?;
        if !m.is_finite() {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Rectangular matrix with `diag` on the main diagonal.
    pub fn from_diag(rows: usize, cols: usize, diag: &[f64]) -> Self {
        let mut m = Self::zeros(rows, cols);
        for (i, &d) in diag.iter().enumerate().take(rows.min(cols)) {
            m.data[i * cols + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// First `r` columns.
    pub fn leading_cols(&self, r: usize) -> Self {
        Self::from_fn(self.rows, r, |i, j| self.get(i, j))
    }

    /// First `r` rows.
    pub fn leading_rows(&self, r: usize) -> Self {
        Self {
            rows: r,
            cols: self.cols,
            data: self.data[..r * self.cols].to_vec(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_with(other, Execution::Parallel)
    }

    pub fn matmul_with(&self, other: &Self, exec: Execution) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, inner) = (other.cols, self.cols);
        let mut out = Self::zeros(self.rows, n);
        let exec = effective(exec, self.rows * inner * n);
        exec::for_each_chunk_mut(exec, &mut out.data, n, |i, row| {
            let a = &self.data[i * inner..(i + 1) * inner];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b = &other.data[k * n..(k + 1) * n];
                for (o, &bkj) in row.iter_mut().zip(b) {
                    *o += aik * bkj;
                }
            }
        });
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul {}x{} (transposed) by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, n, inner) = (self.cols, other.cols, self.rows);
        let mut out = Self::zeros(m, n);
        let exec = effective(Execution::Parallel, m * inner * n);
        exec::for_each_chunk_mut(exec, &mut out.data, n, |i, row| {
            for k in 0..inner {
                let aki = self.data[k * m + i];
                if aki == 0.0 {
                    continue;
                }
                let b = &other.data[k * n..(k + 1) * n];
                for (o, &bkj) in row.iter_mut().zip(b) {
                    *o += aki * bkj;
                }
            }
        });
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by {}x{} (transposed)",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, inner) = (other.rows, self.cols);
        let mut out = Self::zeros(self.rows, n);
        let exec = effective(Execution::Parallel, self.rows * inner * n);
        exec::for_each_chunk_mut(exec, &mut out.data, n, |i, row| {
            let a = &self.data[i * inner..(i + 1) * inner];
            for (j, o) in row.iter_mut().enumerate() {
                let b = &other.data[j * inner..(j + 1) * inner];
                *o = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        });
        Ok(out)
    }
}

fn effective(exec: Execution, work: usize) -> Execution {
    if work < PAR_THRESHOLD {
        Execution::Sequential
    } else {
        exec
    }
}

/// Free-function form of [`DenseMatrix::matmul`].
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.matmul(b)
}

pub fn frobenius_norm(a: &DenseMatrix) -> f64 {
    a.frobenius_norm()
}

/// Convolution kernel with layout `(out_channels, in_channels, k, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, data: Vec<f64>) -> Result<Self> {
        if kernel == 0 || out_channels == 0 || in_channels == 0 {
            return Err(Error::Shape(format!(
                "conv kernel dims must be positive, got ({out_channels}, {in_channels}, {kernel}, {kernel})"
            )));
        }
        let want = out_channels * in_channels * kernel * kernel;
        if data.len() != want {
            return Err(Error::Shape(format!(
                "conv kernel ({out_channels}, {in_channels}, {kernel}, {kernel}) needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            data,
        })
    }

    pub fn random_normal<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = out_channels * in_channels * kernel * kernel;
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::new(out_channels, in_channels, kernel, data)
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn kernel(&self) -> usize {
        self.kernel
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, o: usize, c: usize, kr: usize, kc: usize) -> f64 {
        let k = self.kernel;
        self.data[((o * self.in_channels + c) * k + kr) * k + kc]
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// A named model parameter with its native shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightTensor {
    /// `m × n` matrix mapping `m` inputs to `n` outputs.
    Dense(DenseMatrix),
    Conv(ConvKernel),
}

impl WeightTensor {
    pub fn len(&self) -> usize {
        match self {
            WeightTensor::Dense(m) => m.data().len(),
            WeightTensor::Conv(k) => k.data().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        match self {
            WeightTensor::Dense(m) => m.data(),
            WeightTensor::Conv(k) => k.data(),
        }
    }
}
