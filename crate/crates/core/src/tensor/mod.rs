//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are row-major and immutable once built. Differentiable operations
//! record nodes on a [`Tape`]; calling [`Tensor::backward`] on a scalar walks
//! the tape in reverse and returns per-node gradient accumulators. Tensors
//! not attached to a tape flow through the same operations without recording
//! anything, which is the evaluation fast path.
//!
//! Storage precision (32- or 64-bit) is chosen per tensor at construction.
//! An operation never mixes precisions; the result keeps the precision of
//! its inputs. All verification runs in 64-bit.

mod check;
mod ops;
mod tape;

pub use check::grad_check;
pub use ops::{concat, stack};
pub(crate) use ops::gather_image;
pub(crate) use tape::PixelSample;
pub use tape::{Gradients, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Element width of a tensor, fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Numeric element type a tensor can store. Sealed; implemented for f32/f64.
pub(crate) trait Scalar: Copy + PartialOrd + std::fmt::Debug + 'static {
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Views a store of this precision as a typed slice. Callers guarantee
    /// the precision matches; a mismatch is a bug, not a recoverable error.
    fn slice(store: &Store) -> &[Self];
    fn make_store(v: Vec<Self>) -> Store;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn max(self, o: Self) -> Self;
    /// General matrix multiply on raw strided buffers, delegating to a tuned
    /// kernel. `c = alpha * a(m,k) * b(k,n) + beta * c(m,n)`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

macro_rules! impl_scalar {
    ($t:ty, $variant:ident, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn slice(store: &Store) -> &[Self] {
                match store {
                    Store::$variant(v) => v,
                    _ => unreachable!("store precision mismatch"),
                }
            }
            fn make_store(v: Vec<Self>) -> Store {
                Store::$variant(Arc::new(v))
            }
            #[inline(always)]
            fn add(self, o: Self) -> Self {
                self + o
            }
            #[inline(always)]
            fn sub(self, o: Self) -> Self {
                self - o
            }
            #[inline(always)]
            fn mul(self, o: Self) -> Self {
                self * o
            }
            #[inline(always)]
            fn div(self, o: Self) -> Self {
                self / o
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn max(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }
            unsafe fn gemm(
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
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, F32, matrixmultiply::sgemm);
impl_scalar!(f64, F64, matrixmultiply::dgemm);

/// Reference-counted value buffer in one of the two supported precisions.
#[derive(Clone, Debug)]
pub(crate) enum Store {
    F32(Arc<Vec<f32>>),
    F64(Arc<Vec<f64>>),
}

impl Store {
    pub(crate) fn precision(&self) -> Precision {
        match self {
            Store::F32(_) => Precision::F32,
            Store::F64(_) => Precision::F64,
        }
    }

    pub(crate) fn len(&self) -> usize {
        match self {
            Store::F32(v) => v.len(),
            Store::F64(v) => v.len(),
        }
    }

    pub(crate) fn get_f64(&self, i: usize) -> f64 {
        match self {
            Store::F32(v) => v[i] as f64,
            Store::F64(v) => v[i],
        }
    }
}

/// Identifies the tape node a tensor's value was produced by.
#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// A dense row-major tensor. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    store: Store,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &self.precision())
            .field("on_tape", &self.node.is_some())
            .finish()
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn from_store(shape: Vec<usize>, store: Store, node: Option<NodeRef>) -> Tensor {
        debug_assert_eq!(shape_len(&shape), store.len());
        Tensor { shape, store, node }
    }

    /// Builds a 64-bit tensor from row-major values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::from_vec_p(shape, data, Precision::F64)
    }

    /// Builds a tensor of the given precision from row-major 64-bit values.
    /// 32-bit tensors round each element once at construction.
    pub fn from_vec_p(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Tensor> {
        if shape_len(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        let store = match precision {
            Precision::F32 => Store::F32(Arc::new(data.into_iter().map(|x| x as f32).collect())),
            Precision::F64 => Store::F64(Arc::new(data)),
        };
        Ok(Tensor::from_store(shape.to_vec(), store, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::zeros_p(shape, Precision::F64)
    }

    pub fn zeros_p(shape: &[usize], precision: Precision) -> Tensor {
        let n = shape_len(shape);
        let store = match precision {
            Precision::F32 => Store::F32(Arc::new(vec![0.0; n])),
            Precision::F64 => Store::F64(Arc::new(vec![0.0; n])),
        };
        Tensor::from_store(shape.to_vec(), store, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape_len(shape);
        Tensor::from_store(shape.to_vec(), Store::F64(Arc::new(vec![value; n])), None)
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_store(vec![], Store::F64(Arc::new(vec![value])), None)
    }

    /// Convenience constructor from nested rows (64-bit).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::EmptyInput { op: "from_rows" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        self.store.precision()
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn store(&self) -> &Store {
        &self.store
    }

    /// Row-major values widened to 64-bit.
    pub fn values(&self) -> Vec<f64> {
        match &self.store {
            Store::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Store::F64(v) => v.as_ref().clone(),
        }
    }

    /// Element at a row-major flat index, widened to 64-bit.
    pub fn at(&self, i: usize) -> f64 {
        self.store.get_f64(i)
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.store.get_f64(r * self.shape[1] + c)
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::NotScalar {
                op: "scalar_value",
                shape: self.shape.clone(),
            });
        }
        Ok(self.store.get_f64(0))
    }

    /// The same value with no tape attachment. Gradients never flow through
    /// a detached tensor.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            store: self.store.clone(),
            node: None,
        }
    }

    /// Copies into the given precision. Only allowed off-tape: a recorded
    /// value must keep the precision its node was computed in.
    pub fn to_precision(&self, precision: Precision) -> Result<Tensor> {
        if self.node.is_some() {
            return Err(Error::InvalidArgument {
                op: "to_precision",
                what: "cannot convert a tensor that is attached to a tape".into(),
            });
        }
        if precision == self.precision() {
            return Ok(self.clone());
        }
        Tensor::from_vec_p(&self.shape, self.values(), precision)
    }

    pub fn all_finite(&self) -> bool {
        match &self.store {
            Store::F32(v) => v.iter().all(|x| x.is_finite()),
            Store::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}
