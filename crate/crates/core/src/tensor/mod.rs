//! Minimal reverse-mode differentiable tensor engine.
//!
//! Tensors are immutable handles (`Arc`-shared) over dense row-major value
//! buffers. Every forward primitive records the operation and its inputs when
//! any input participates in differentiation, so [`backward`] can replay the
//! graph in reverse. The element type is generic: training runs at `f32`,
//! gradient-check tests instantiate the same code at `f64` where central
//! finite differences are reliable.

mod autograd;
mod ops;
mod optim;

pub use autograd::{backward, Gradients};
pub use ops::{batch_norm_eval, batch_norm_train, NORM_EPS};
pub(crate) use ops::gemm_rm as ops_gemm_rm;
pub use optim::{sgd_update, Parameter};

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Element type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// General matrix multiply `C <- alpha * A @ B + beta * C` with explicit
    /// row/column strides, row-major `C` of shape `m x n`.
    ///
    /// # Safety contract (checked by the caller)
    /// The strided index ranges of `a`, `b` and `c` must lie inside the
    /// respective slices.
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(strided_extent(m, k, rsa, csa) <= a.len());
        debug_assert!(strided_extent(k, n, rsb, csb) <= b.len());
        debug_assert!(m * n <= c.len());
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(strided_extent(m, k, rsa, csa) <= a.len());
        debug_assert!(strided_extent(k, n, rsb, csb) <= b.len());
        debug_assert!(m * n <= c.len());
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

fn strided_extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let max = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    max as usize + 1
}

/// Convert an `f64` constant into the engine scalar type.
pub fn scalar_from<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 constant representable in scalar type")
}

pub(crate) struct Inner<S: Scalar> {
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
    op: Option<ops::Op<S>>,
}

/// Dense n-dimensional array participating in a differentiable computation
/// graph. Cloning is cheap (shared buffer); values are immutable after
/// creation.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Arc<Inner<S>>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Leaf tensor from raw values; `requires_grad` marks it as a
    /// differentiation root.
    pub fn leaf(values: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::shape(
                "leaf",
                format!("{} values for shape {:?}", values.len(), shape),
            ));
        }
        check_finite("leaf", &values)?;
        Ok(Self::from_inner(shape.to_vec(), values, requires_grad, None))
    }

    /// Constant leaf tensor (no gradient).
    pub fn new(values: Vec<S>, shape: &[usize]) -> Result<Self> {
        Self::leaf(values, shape, false)
    }

    /// Rank-0 constant.
    pub fn scalar(value: S) -> Self {
        Self::from_inner(Vec::new(), vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_inner(shape.to_vec(), vec![S::zero(); numel], false, None)
    }

    pub(crate) fn from_inner(
        shape: Vec<usize>,
        values: Vec<S>,
        requires_grad: bool,
        op: Option<ops::Op<S>>,
    ) -> Self {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                values,
                requires_grad,
                op,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.inner.values
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a rank-0 / single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.values[0]
    }

    /// Stop-gradient: same values, no graph edge, `requires_grad` false.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::from_inner(
            self.inner.shape.clone(),
            self.inner.values.clone(),
            false,
            None,
        )
    }

    /// Stable identity of the underlying node, used for gradient bookkeeping.
    pub(crate) fn node_id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn op(&self) -> Option<&ops::Op<S>> {
        self.inner.op.as_ref()
    }
}

pub(crate) fn check_finite<S: Scalar>(context: &str, values: &[S]) -> Result<()> {
    // Block-folded so the scan vectorizes instead of short-circuiting
    // element by element.
    let mut chunks = values.chunks_exact(64);
    for chunk in &mut chunks {
        let bad = chunk.iter().fold(0u32, |acc, v| acc + !v.is_finite() as u32);
        if bad != 0 {
            return Err(Error::numeric(context));
        }
    }
    if chunks.remainder().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(context))
    }
}
