//! Differentiable numeric substrate.
//!
//! Everything the detector needs to train is expressed on a [`Graph`]: a
//! tensor-level reverse-mode tape. Nodes hold dense row-major values; each
//! operation records just enough to run its adjoint. The graph is generic over
//! [`Real`] so the same code trains in `f32` and is verified in `f64`.
//!
//! [`grad_check`] compares the tape against central finite differences and is
//! the oracle the rest of the crate's gradient tests go through.

mod gemm;
mod gradcheck;
mod graph;
mod kernels;
pub mod blob;
pub mod linalg;

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use gemm::{gemm_strided, matmul_into};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckError, GradReport, ParamGradError};
pub use graph::{Grads, Graph, Var};
pub use kernels::{bilinear_corners, Corner};

/// Floating point element type of tensors and graphs.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Name used in checkpoint manifests.
    const DTYPE: &'static str;

    /// Width of the little-endian encoding.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes from exactly `BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw strided GEMM, `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given
    /// dimensions; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(bytes);
        f32::from_le_bytes(b)
    }

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(bytes);
        f64::from_le_bytes(b)
    }

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Panics when `data.len()` disagrees with the product of `shape`.
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            expected,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension for a matrix view (1 for a 1-D tensor of length n is n rows of 1).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(expected, self.data.len(), "reshape to {:?} changes length", shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().fold(T::zero(), |a, b| a + b)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sum_is_zero() {
        let t = Tensor::<f64>::zeros(&[0, 4]);
        assert_eq!(t.sum(), 0.0);
        assert!(t.is_empty());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert!((logit(sigmoid(1.25f64)) - 1.25).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        let _ = Tensor::<f32>::new(&[2, 2], vec![0.0; 3]);
    }
}
