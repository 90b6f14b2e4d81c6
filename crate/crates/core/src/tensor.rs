//! Dense rank-4 tensors and kernel-shaped matrices.
//!
//! `Tensor4` stores its data row-major in index order `(n0, n1, n2, n3)`.
//! For convolution weights that is `(c_out, c_in, k_h, k_w)`; for
//! activations `(batch, channels, height, width)`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgsError};

/// Floating-point element type. A run picks one precision and sticks with it.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub type Shape4 = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f64> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(SgsError::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for a in 0..shape[0] {
            for b in 0..shape[1] {
                for c in 0..shape[2] {
                    for d in 0..shape[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Spatial extent `(n2, n3)`, the kernel shape for a weight tensor.
    #[inline]
    pub fn spatial(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [n0, n1, n2, n3] = self.shape;
        assert!(
            idx[0] < n0 && idx[1] < n1 && idx[2] < n2 && idx[3] < n3,
            "index {idx:?} out of range for shape {:?}",
            self.shape
        );
        ((idx[0] * n1 + idx[1]) * n2 + idx[2]) * n3 + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Contiguous `(n2, n3)` plane at `(a, b)`.
    #[inline]
    pub fn plane(&self, a: usize, b: usize) -> &[T] {
        let len = self.shape[2] * self.shape[3];
        let start = (a * self.shape[1] + b) * len;
        &self.data[start..start + len]
    }

    #[inline]
    pub fn plane_mut(&mut self, a: usize, b: usize) -> &mut [T] {
        let len = self.shape[2] * self.shape[3];
        let start = (a * self.shape[1] + b) * len;
        &mut self.data[start..start + len]
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.shape[0] {
            return Err(SgsError::shape(format!(
                "slice {start}..{end} out of range for leading dim {}",
                self.shape[0]
            )));
        }
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        let mut shape = self.shape;
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Gather entries of the first axis by index.
    pub fn select_outer(&self, indices: &[usize]) -> Self {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            assert!(i < self.shape[0], "outer index {i} out of range");
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape;
        shape[0] = indices.len();
        Self { shape, data }
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(SgsError::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    /// `alpha * x + y`.
    pub fn axpy(alpha: T, x: &Self, y: &Self) -> Result<Self> {
        x.check_same_shape(y, "axpy")?;
        Ok(x.zip_with(y, |a, b| alpha * a + b))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `out[a,b,c,d] = self[a,b,c,d] * m[c,d]`.
    pub fn broadcast_scale(&self, m: &KernelMatrix) -> Result<Self> {
        let mut out = self.clone();
        out.broadcast_scale_in_place(m)?;
        Ok(out)
    }

    pub fn broadcast_scale_in_place(&mut self, m: &KernelMatrix) -> Result<()> {
        if m.shape() != self.spatial() {
            return Err(SgsError::shape(format!(
                "kernel matrix {:?} does not match spatial extent {:?} of tensor {:?}",
                m.shape(),
                self.spatial(),
                self.shape
            )));
        }
        let factors: Vec<T> = m.values().iter().map(|&v| T::of(v)).collect();
        for plane in self.data.chunks_exact_mut(factors.len().max(1)) {
            for (v, &f) in plane.iter_mut().zip(&factors) {
                *v *= f;
            }
        }
        Ok(())
    }

    /// Sum in storage order.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Minimum and maximum entries; `None` when empty.
    pub fn min_max(&self) -> Option<(T, T)> {
        let first = *self.data.first()?;
        Some(
            self.data
                .iter()
                .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        )
    }
}

/// A small row-major `(rows, cols)` matrix of `f64`, shaped like a kernel's
/// spatial extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl KernelMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(SgsError::shape(format!(
                "kernel matrix dims must be >= 1, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(SgsError::shape(format!(
                "{rows}x{cols} kernel matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "kernel matrix dims must be >= 1");
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "kernel matrix dims must be >= 1");
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "({r},{c}) out of range");
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.rows && c < self.cols, "({r},{c}) out of range");
        self.values[r * self.cols + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(SgsError::shape(format!(
                "hadamard: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}
