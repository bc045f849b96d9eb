//! Dense row-major tensors and the numeric kernels shared by the tape.
//!
//! Training runs in `f32`; every type is generic over [`Real`] so the same
//! graph can be replayed in `f64` when checking gradients against finite
//! differences.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floating point element type of a tensor.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: positive dimensions")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect()).expect("from_fn: positive dimensions")
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of(z * std)
        })
    }

    /// Marks the tensor as a trainable leaf.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, grad: &[T]) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, overwriting `c`.
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += s * bv;
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, overwriting `c`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(a_row, b_row);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += s * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four independent accumulators let the compiler vectorize the loop.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Splits `shape` around `axis` into `(outer, len, inner)` for strided loops.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
