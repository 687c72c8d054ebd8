//! Reverse-mode differentiation tape.
//!
//! Every differentiable operation executed against a recording tape pushes a
//! backward rule. [`Tape::backward`] walks the rules once in reverse order and
//! accumulates gradients into the `grad` slot of every reachable tensor that
//! requires one. Rules are recorded in execution order, so reverse traversal
//! is a valid topological order by construction.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Tape<T: Scalar> {
    records: RefCell<Vec<Box<dyn Fn()>>>,
    grad_enabled: bool,
    pub(crate) dropout_rng: Option<RefCell<ChaCha8Rng>>,
    op_counts: RefCell<BTreeMap<&'static str, usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Tape<T> {
    /// Recording tape with active dropout, seeded for reproducibility.
    pub fn training(seed: u64) -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            grad_enabled: true,
            dropout_rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
            op_counts: RefCell::new(BTreeMap::new()),
            _marker: std::marker::PhantomData,
        }
    }

    /// Recording tape with dropout disabled (evaluation losses, gradient
    /// checks).
    pub fn recording() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            grad_enabled: true,
            dropout_rng: None,
            op_counts: RefCell::new(BTreeMap::new()),
            _marker: std::marker::PhantomData,
        }
    }

    /// Forward-only tape: nothing is recorded and dropout is the identity.
    pub fn inference() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            grad_enabled: false,
            dropout_rng: None,
            op_counts: RefCell::new(BTreeMap::new()),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// True when dropout masks are being sampled (training mode).
    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub(crate) fn should_record(&self, inputs: &[&Tensor<T>]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn push(&self, rule: Box<dyn Fn()>) {
        self.records.borrow_mut().push(rule);
    }

    pub fn num_records(&self) -> usize {
        self.records.borrow().len()
    }

    /// Increment a named operation counter; used by tests that assert how
    /// often a composite block runs.
    pub fn bump(&self, name: &'static str) {
        *self.op_counts.borrow_mut().entry(name).or_insert(0) += 1;
    }

    pub fn count(&self, name: &'static str) -> usize {
        self.op_counts.borrow().get(name).copied().unwrap_or(0)
    }

    /// Seed `loss` with gradient 1 and run every recorded rule in reverse.
    ///
    /// Gradients add into existing slots, so calling backward twice without
    /// zeroing doubles them; the caller resets between optimizer steps.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.accumulate_grad(&[T::one()]);
        let records = self.records.borrow();
        for rule in records.iter().rev() {
            rule();
        }
        Ok(())
    }
}
