//! Named, persistent parameters feeding leaf tensors into the graph.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct ParamInner {
    pub(crate) id: u64,
    pub(crate) name: String,
    pub(crate) trainable: Cell<bool>,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    grad_seen: Cell<bool>,
}

impl ParamInner {
    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut acc = self.grad.borrow_mut();
        for (s, v) in acc.iter_mut().zip(g) {
            *s += v;
        }
        self.grad_seen.set(true);
    }
}

/// A persistent tensor with a gradient accumulator. Frozen parameters
/// (`trainable == false`) produce constant leaves and are never touched by
/// the optimizer.
#[derive(Clone)]
pub struct Parameter {
    inner: Rc<ParamInner>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>, trainable: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter data does not match shape {shape:?}");
        let inner = ParamInner {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            trainable: Cell::new(trainable),
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(vec![0.0; numel]),
            grad_seen: Cell::new(false),
        };
        Parameter { inner: Rc::new(inner) }
    }

    /// Fresh graph leaf holding a snapshot of the current values.
    pub fn leaf(&self) -> Tensor {
        Tensor::param_leaf(self.inner.clone())
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn trainable(&self) -> bool {
        self.inner.trainable.get()
    }

    pub fn freeze(&self) {
        self.inner.trainable.set(false);
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn set_value(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "set_value: wrong length for {}", self.name());
        *self.inner.data.borrow_mut() = data;
    }

    /// Current accumulated gradient (zeros until `backward` reaches it).
    pub fn grad(&self) -> Vec<f64> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_seen(&self) -> bool {
        self.inner.grad_seen.get()
    }

    pub fn zero_grad(&self) {
        self.inner.grad.borrow_mut().iter_mut().for_each(|v| *v = 0.0);
        self.inner.grad_seen.set(false);
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// In-place update applied by the optimizer.
    pub(crate) fn apply_delta(&self, delta: impl Fn(usize, f64) -> f64) {
        let mut data = self.inner.data.borrow_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v = delta(i, *v);
        }
    }
}
