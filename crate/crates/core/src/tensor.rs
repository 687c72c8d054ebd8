//! Dense n-dimensional tensor with row-major flat storage and a gradient slot.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::scalar::Scalar;

struct Inner<T> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
}

/// A shared handle to an immutable value buffer plus an optional gradient.
///
/// Cloning is cheap (reference count bump). Operations never mutate the data
/// of their inputs; the only sanctioned in-place mutation is the optimizer
/// updating parameters via [`Tensor::set_data`] between forward passes.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn with_flag(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in tensor of shape {shape:?}"
        );
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// A constant (non-differentiable) tensor. Panics if `data` and `shape`
    /// disagree.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        Self::with_flag(data, shape, false)
    }

    /// A learnable tensor: gradients accumulate into it during backward.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Self::with_flag(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(vec![T::zero(); numel], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(vec![value; numel], shape)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new((0..numel).map(f).collect(), shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Replace the value buffer in place, keeping the shape. Used by the
    /// optimizer and by finite-difference probes.
    pub fn set_data(&self, data: Vec<T>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = data;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add `delta` into the gradient slot, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        assert_eq!(delta.len(), self.numel(), "gradient length mismatch");
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Multiply the stored gradient (if any) by `factor`, in place.
    pub(crate) fn scale_grad(&self, factor: T) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Identity of the underlying allocation; true only for clones of the
    /// same tensor.
    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
