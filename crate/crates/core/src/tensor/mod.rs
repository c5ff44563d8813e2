//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Activations are NCHW, row-major. Matrices used by the attention path are
//! `[batch, rows, cols]`. Every forward op checks its output for NaN/Inf and
//! fails with [`Error::NonFinite`](crate::Error::NonFinite) naming the op.

mod conv;
mod gemm;
pub mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Grads, MacCount, NodeId, Tape, Var};

/// Element type of a tensor: `f32` for training and inference, `f64` for
/// finite-difference gradient checks.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Copy
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: &'static str;

    /// `c = op(a) * op(b) + beta * c` on row-major buffers, where `op(a)` is
    /// `m x k` and `op(b)` is `k x n`. `beta` is 0 or 1.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

/// A dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// I.i.d. standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::c(rng.sample::<f64, _>(StandardNormal)))
    }

    /// I.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::c(lo + (hi - lo) * rng.random::<f64>()))
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as `(N, C, H, W)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(
                "tensor",
                format!("expected a 4-D NCHW tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a 4-D index.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, cc, h, w) = self.dims4().expect("4-D tensor");
        self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Sample `n` of a 4-D tensor as a `[1, C, H, W]` tensor.
    pub fn sample(&self, n: usize) -> Result<Self> {
        let (nn, c, h, w) = self.dims4()?;
        if n >= nn {
            return Err(Error::dim("sample", format!("index {n} out of batch {nn}")));
        }
        let len = c * h * w;
        Tensor::new(&[1, c, h, w], self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Stacks `[1, C, H, W]` tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack", "no tensors to stack"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::dim(
                    "stack",
                    format!("shape {:?} differs from {:?}", t.shape, first.shape),
                ));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&[n, c, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}
