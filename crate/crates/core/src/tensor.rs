//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a contiguous buffer. Feature maps are stored as
//! rank-4 `[batch, channels, height, width]` tensors; a single feature map is a
//! batch of one. Reshape keeps the row-major element order, so flattening a
//! `C×H×W` map to `C×N` puts pixel `(y, x)` in column `y·W + x`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Floating point element type. Training and inference use `f32`, gradient
/// checks use `f64`.
pub trait Scalar:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    #[inline]
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid extents {shape:?}")));
        }
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics on zero extents; use [`Tensor::new`] for untrusted shapes.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid tensor extents {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                "dims4",
                format!("expected rank 4, got {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                "dims2",
                format!("expected rank 2, got {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
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
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new([c, r], out)
    }

    /// Batch item `n` of a rank-4 tensor as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let (batch, c, h, w) = self.dims4()?;
        if n >= batch {
            return Err(Error::shape("batch_item", format!("{n} >= {batch}")));
        }
        let plane = c * h * w;
        Self::new([1, c, h, w], self.data[n * plane..(n + 1) * plane].to_vec())
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("stack_batch"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for item in items {
            let (bn, bc, bh, bw) = item.dims4()?;
            if (bc, bh, bw) != (c, h, w) {
                return Err(Error::shape(
                    "stack_batch",
                    format!("{:?} vs {:?}", item.shape, first.shape),
                ));
            }
            n += bn;
            data.extend_from_slice(&item.data);
        }
        Self::new([n, c, h, w], data)
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ))
        }
    }
}

impl<T: Scalar> core::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: Scalar> core::ops::IndexMut<usize> for Tensor<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}
