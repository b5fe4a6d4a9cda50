//! Dense row-major tensors over f32/f64 with the elementwise, matrix and
//! shape operations the engine needs.
//!
//! Data is held in an `Arc<Vec<T>>`: clones and reshapes are zero-copy, and
//! in-place mutation copies on write only when the buffer is shared.

mod dump;

pub use dump::{read_dump, write_dump, DumpError};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Minimum element count before elementwise ops go parallel.
const PAR_THRESHOLD: usize = 1 << 16;
/// Fixed chunk length for parallel elementwise ops. Chunking is static so
/// results never depend on how rayon schedules the chunks.
const PAR_CHUNK: usize = 1 << 14;

// ───────────────────────────── errors ─────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("{op}: rank error: {msg}")]
    RankError { op: &'static str, msg: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: index out of bounds: {msg}")]
    IndexOutOfBounds { op: &'static str, msg: String },
    #[error("{op}: data length {got} does not match shape count {want}")]
    DataLength {
        op: &'static str,
        got: usize,
        want: usize,
    },
}

// ───────────────────────────── scalar trait ─────────────────────────────

/// Floating-point element type. The engine trains in `f32` and runs
/// gradient checks in `f64`; all code is generic over this trait.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + num_traits::Float
    + 'static
{
    const DTYPE: Precision;
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Precision = Precision::Single;
    #[inline(always)]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Precision = Precision::Double;
    #[inline(always)]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Element precision of a tensor, as recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    Single,
    #[serde(rename = "f64")]
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Single => write!(f, "f32"),
            Precision::Double => write!(f, "f64"),
        }
    }
}

// ───────────────────────────── shape ─────────────────────────────

/// Tensor shape: 1 to 6 extents, each at least 1, row-major layout.
///
/// Serializes as a plain extent list; deserialization funnels through
/// [`Shape::new`] so invalid shapes are rejected at the parse boundary.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape {
    dims: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = TensorError;

    fn try_from(dims: Vec<usize>) -> Result<Self, TensorError> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Vec<usize> {
        s.dims
    }
}

impl Shape {
    pub const MAX_RANK: usize = 6;

    pub fn new(dims: Vec<usize>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > Self::MAX_RANK {
            return Err(TensorError::InvalidShape(format!(
                "rank must be 1..={}, got {}",
                Self::MAX_RANK,
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(format!(
                "all extents must be >= 1, got {dims:?}"
            )));
        }
        // Element count must not overflow usize.
        let mut count: usize = 1;
        for &d in &dims {
            count = count.checked_mul(d).ok_or_else(|| {
                TensorError::InvalidShape(format!("element count overflows usize: {dims:?}"))
            })?;
        }
        Ok(Shape { dims })
    }

    /// Shorthand constructor for statically known-good shapes.
    ///
    /// Panics on invalid dims; use [`Shape::new`] for untrusted input.
    pub fn of(dims: &[usize]) -> Self {
        Self::new(dims.to_vec()).expect("static shape must be valid")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major strides: the last axis is contiguous.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.dims[i + 1];
        }
        s
    }

    /// Linear index of a multi-index; bounds-checked.
    pub fn linear(&self, index: &[usize]) -> Result<usize, TensorError> {
        if index.len() != self.rank() {
            return Err(TensorError::IndexOutOfBounds {
                op: "linear",
                msg: format!("index rank {} vs shape rank {}", index.len(), self.rank()),
            });
        }
        let mut lin = 0usize;
        for (axis, (&i, &d)) in index.iter().zip(&self.dims).enumerate() {
            if i >= d {
                return Err(TensorError::IndexOutOfBounds {
                    op: "linear",
                    msg: format!("index {i} >= extent {d} on axis {axis}"),
                });
            }
            lin = lin * d + i;
        }
        Ok(lin)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims)
    }
}

// ───────────────────────────── tensor ─────────────────────────────

/// Dense row-major tensor. Cheap to clone (shared buffer).
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.count() {
            return Err(TensorError::DataLength {
                op: "Tensor::new",
                got: data.len(),
                want: shape.count(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.count();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        let n = shape.count();
        Tensor {
            shape,
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-1 single-element tensor holding one value.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Shape::of(&[1]),
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_f64_slice(shape: Shape, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| T::of_f64(v)).collect())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn count(&self) -> usize {
        self.shape.count()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.count() != 1 {
            return Err(TensorError::RankError {
                op: "item",
                msg: format!("expected one element, shape is {}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> Result<T, TensorError> {
        Ok(self.data[self.shape.linear(index)?])
    }

    /// Cast elementwise to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect()),
        }
    }

    // ───────────── elementwise ─────────────

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
        let mut out = vec![T::zero(); self.count()];
        if self.count() >= PAR_THRESHOLD {
            use rayon::prelude::*;
            out.par_chunks_mut(PAR_CHUNK)
                .zip(self.data.par_chunks(PAR_CHUNK))
                .for_each(|(o, i)| {
                    for (ov, &iv) in o.iter_mut().zip(i) {
                        *ov = f(iv);
                    }
                });
        } else {
            for (ov, &iv) in out.iter_mut().zip(self.data.iter()) {
                *ov = f(iv);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(out),
        }
    }

    /// Combine two tensors elementwise. Shapes must match exactly, except
    /// that a one-element operand broadcasts against any shape.
    pub fn zip_map(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T + Sync,
    ) -> Result<Tensor<T>, TensorError> {
        if self.shape == other.shape {
            let mut out = vec![T::zero(); self.count()];
            if self.count() >= PAR_THRESHOLD {
                use rayon::prelude::*;
                out.par_chunks_mut(PAR_CHUNK)
                    .zip(self.data.par_chunks(PAR_CHUNK))
                    .zip(other.data.par_chunks(PAR_CHUNK))
                    .for_each(|((o, a), b)| {
                        for ((ov, &av), &bv) in o.iter_mut().zip(a).zip(b) {
                            *ov = f(av, bv);
                        }
                    });
            } else {
                for ((ov, &av), &bv) in out.iter_mut().zip(self.data.iter()).zip(other.data.iter())
                {
                    *ov = f(av, bv);
                }
            }
            return Tensor::new(self.shape.clone(), out);
        }
        if other.count() == 1 {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.count() == 1 {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        Err(TensorError::ShapeMismatch {
            op,
            left: self.shape.to_string(),
            right: other.shape.to_string(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    /// Elementwise maximum; on ties the left operand is considered the max
    /// (relevant only to the subgradient choice in autodiff).
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_map(other, "maximum", |a, b| if a >= b { a } else { b })
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.map(|v| v * c)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.map(|v| -v)
    }

    pub fn relu(&self) -> Tensor<T> {
        let zero = T::zero();
        self.map(|v| if v > zero { v } else { zero })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map(sigmoid_scalar)
    }

    pub fn tanh_(&self) -> Tensor<T> {
        self.map(|v| v.tanh())
    }

    pub fn exp_(&self) -> Tensor<T> {
        self.map(|v| v.exp())
    }

    pub fn ln_(&self) -> Tensor<T> {
        self.map(|v| v.ln())
    }

    pub fn one_minus(&self) -> Tensor<T> {
        let one = T::one();
        self.map(|v| one - v)
    }

    // ───────────── reductions ─────────────

    /// Sum of all elements, accumulated in f64 for precision and cast back.
    pub fn sum(&self) -> T {
        T::of_f64(self.sum_f64())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean(&self) -> T {
        T::of_f64(self.sum_f64() / self.count() as f64)
    }

    // ───────────── matrix ops ─────────────

    /// Matrix product of a `[m, k]` by a `[k, n]` tensor.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (a, b) = (self, other);
        if a.rank() != 2 || b.rank() != 2 {
            return Err(TensorError::RankError {
                op: "matmul",
                msg: format!("need rank-2 operands, got {} and {}", a.shape, b.shape),
            });
        }
        let (m, k) = (a.shape.dims()[0], a.shape.dims()[1]);
        let (k2, n) = (b.shape.dims()[0], b.shape.dims()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape.to_string(),
                right: b.shape.to_string(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_kernel(&a.data, &b.data, &mut out, m, k, n);
        Tensor::new(Shape::of(&[m, n]), out)
    }

    /// Matrix-vector product of a `[m, k]` by a `[k]` tensor.
    pub fn matvec(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 || x.rank() != 1 {
            return Err(TensorError::RankError {
                op: "matvec",
                msg: format!("need [m,k] and [k], got {} and {}", self.shape, x.shape),
            });
        }
        let (m, k) = (self.shape.dims()[0], self.shape.dims()[1]);
        if x.count() != k {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                left: self.shape.to_string(),
                right: x.shape.to_string(),
            });
        }
        let mut out = vec![T::zero(); m];
        for (r, ov) in out.iter_mut().enumerate() {
            let row = &self.data[r * k..(r + 1) * k];
            let mut acc = T::zero();
            for (&w, &xv) in row.iter().zip(x.data.iter()) {
                acc = acc + w * xv;
            }
            *ov = acc;
        }
        Tensor::new(Shape::of(&[m]), out)
    }

    /// In-place elementwise add of a same-shape tensor (no broadcast).
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                left: self.shape.to_string(),
                right: other.shape.to_string(),
            });
        }
        let src = Arc::clone(&other.data);
        for (a, &b) in self.data_mut().iter_mut().zip(src.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    /// `self [m,n] x other [k,n]^T -> [m,k]`; rows of both operands are
    /// contiguous, so each output element is a straight dot product.
    pub(crate) fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(TensorError::RankError {
                op: "matmul_nt",
                msg: format!("need rank-2 operands, got {} and {}", self.shape, other.shape),
            });
        }
        let (m, n) = (self.shape.dims()[0], self.shape.dims()[1]);
        let (k, n2) = (other.shape.dims()[0], other.shape.dims()[1]);
        if n != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape.to_string(),
                right: other.shape.to_string(),
            });
        }
        let mut out = vec![T::zero(); m * k];
        for i in 0..m {
            let arow = &self.data[i * n..(i + 1) * n];
            for l in 0..k {
                let brow = &other.data[l * n..(l + 1) * n];
                let mut acc = T::zero();
                for (&a, &b) in arow.iter().zip(brow) {
                    acc = acc + a * b;
                }
                out[i * k + l] = acc;
            }
        }
        Tensor::new(Shape::of(&[m, k]), out)
    }

    /// `self [m,k]^T x other [m,n] -> [k,n]`, accumulated as rank-1 updates
    /// so the inner loop stays contiguous.
    pub(crate) fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(TensorError::RankError {
                op: "matmul_tn",
                msg: format!("need rank-2 operands, got {} and {}", self.shape, other.shape),
            });
        }
        let (m, k) = (self.shape.dims()[0], self.shape.dims()[1]);
        let (m2, n) = (other.shape.dims()[0], other.shape.dims()[1]);
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape.to_string(),
                right: other.shape.to_string(),
            });
        }
        let mut out = vec![T::zero(); k * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let brow = &other.data[i * n..(i + 1) * n];
            for (l, &a) in arow.iter().enumerate() {
                let orow = &mut out[l * n..(l + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Tensor::new(Shape::of(&[k, n]), out)
    }

    /// Outer product of rank-1 tensors: `[m] x [k] -> [m,k]`.
    pub(crate) fn outer(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 1 || x.rank() != 1 {
            return Err(TensorError::RankError {
                op: "outer",
                msg: format!("need rank-1 operands, got {} and {}", self.shape, x.shape),
            });
        }
        let (m, k) = (self.count(), x.count());
        let mut out = vec![T::zero(); m * k];
        for (i, &g) in self.data.iter().enumerate() {
            let orow = &mut out[i * k..(i + 1) * k];
            for (o, &xv) in orow.iter_mut().zip(x.data.iter()) {
                *o = g * xv;
            }
        }
        Tensor::new(Shape::of(&[m, k]), out)
    }

    /// `self [m,k]^T x g [m] -> [k]`.
    pub(crate) fn matvec_t(&self, g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::RankError {
                op: "matvec_t",
                msg: format!("need a rank-2 matrix, got {}", self.shape),
            });
        }
        let (m, k) = (self.shape.dims()[0], self.shape.dims()[1]);
        if g.count() != m {
            return Err(TensorError::ShapeMismatch {
                op: "matvec_t",
                left: self.shape.to_string(),
                right: g.shape.to_string(),
            });
        }
        let mut out = vec![T::zero(); k];
        for (i, &gv) in g.data.iter().enumerate() {
            let row = &self.data[i * k..(i + 1) * k];
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + gv * w;
            }
        }
        Tensor::new(Shape::of(&[k]), out)
    }

    // ───────────── shape ops ─────────────

    /// Reinterpret under a new shape with the same element count. Zero-copy.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor<T>, TensorError> {
        if shape.count() != self.count() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape.to_string(),
                right: shape.to_string(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Concatenate rank-1 tensors end to end.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::RankError {
                op: "concat",
                msg: "no operands".into(),
            });
        }
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != 1 {
                return Err(TensorError::RankError {
                    op: "concat",
                    msg: format!("operands must be rank-1, got {}", p.shape),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let n = data.len();
        Tensor::new(Shape::of(&[n]), data)
    }

    /// Copy out slice `t` along the leading axis of a rank >= 2 tensor.
    pub fn slice_time(&self, t: usize) -> Result<Tensor<T>, TensorError> {
        if self.rank() < 2 {
            return Err(TensorError::RankError {
                op: "slice_time",
                msg: format!("need rank >= 2, got {}", self.shape),
            });
        }
        let steps = self.shape.dims()[0];
        if t >= steps {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_time",
                msg: format!("t={t} >= leading extent {steps}"),
            });
        }
        let inner = Shape::new(self.shape.dims()[1..].to_vec())?;
        let n = inner.count();
        let data = self.data[t * n..(t + 1) * n].to_vec();
        Tensor::new(inner, data)
    }

    /// Stack same-shape tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::RankError {
                op: "stack",
                msg: "no operands".into(),
            });
        }
        let inner = parts[0].shape.clone();
        if inner.rank() + 1 > Shape::MAX_RANK {
            return Err(TensorError::RankError {
                op: "stack",
                msg: format!("stacking rank-{} operands exceeds max rank", inner.rank()),
            });
        }
        let mut data = Vec::with_capacity(parts.len() * inner.count());
        for p in parts {
            if p.shape != inner {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: inner.to_string(),
                    right: p.shape.to_string(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(inner.dims());
        Tensor::new(Shape::new(dims)?, data)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<&T> = self.data.iter().take(4).collect();
        write!(
            f,
            "Tensor{{shape: {}, data: {head:?}{}}}",
            self.shape,
            if self.data.len() > 4 { ", .." } else { "" }
        )
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

/// Numerically stable logistic sigmoid.
///
/// Split by sign so the exponential never overflows; both halves agree at 0.
#[inline(always)]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

/// Plain triple-loop matrix multiply with the k-loop innermost hoisted:
/// out[i, j] += a[i, l] * b[l, j], accumulated row by row so the inner
/// loop is a contiguous axpy that vectorizes.
fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov = *ov + av * bv;
            }
        }
    }
}
