use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True while graph recording is enabled on this thread.
pub fn recording_enabled() -> bool {
    RECORDING.with(|c| c.get())
}

/// Runs `f` with graph recording disabled. Ops executed inside produce
/// constants (no parents, no backward closures), which keeps rollouts cheap.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = RECORDING.with(|c| c.replace(false));
    let out = f();
    RECORDING.with(|c| c.set(prev));
    out
}

pub(super) type BackwardFn = Box<dyn Fn(&Tensor)>;

pub(super) struct Inner {
    pub(super) id: u64,
    pub(super) shape: Vec<usize>,
    pub(super) data: RefCell<Vec<f64>>,
    /// `None` until some backward pass touches this node. For leaves this is
    /// the "never reached, hence exactly zero" state.
    pub(super) grad: RefCell<Option<Vec<f64>>>,
    pub(super) requires_grad: bool,
    pub(super) parents: Vec<Tensor>,
    pub(super) backward: Option<BackwardFn>,
}

/// Dense real tensor, cheaply cloneable handle into the recorded graph.
#[derive(Clone)]
pub struct Tensor {
    pub(super) inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, parents: Vec<Tensor>, backward: Option<BackwardFn>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant (no gradient) tensor.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Trainable leaf. Its gradient accumulates across backward passes until
    /// [`Tensor::zero_grad`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data, true, Vec::new(), None)
    }

    /// Scalar constant, shape `[1]`.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; shape.iter().product()])
    }

    /// Graph extension point: builds a node with explicit parents and a
    /// backward closure. The closure receives the finished node and must
    /// accumulate into the parents via [`Tensor::accumulate_grad`]. When
    /// recording is off or no parent requires grad, the result degrades to
    /// a constant.
    pub fn from_op(shape: &[usize], data: Vec<f64>, parents: Vec<Tensor>, backward: impl Fn(&Tensor) + 'static) -> Tensor {
        if recording_enabled() && parents.iter().any(|p| p.inner.requires_grad) {
            Tensor::new(shape.to_vec(), data, true, parents, Some(Box::new(backward)))
        } else {
            Tensor::constant(shape, data)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Stable node id (unique per thread).
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Copy of the forward values.
    pub fn values(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; panics unless `numel() == 1`.
    pub fn value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value() on non-scalar tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Runs `f` over the raw forward buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Detached constant holding a copy of the current values.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(&self.inner.shape, self.values())
    }

    /// In-place data overwrite (optimizer step). Length must match.
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = data;
    }

    /// Mutable access to the raw forward buffer (optimizer step).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.data.borrow_mut())
    }

    /// Gradient of the last backward pass(es). Exactly zero for leaves the
    /// loss never reached. Panics if the tensor does not require grad.
    pub fn grad(&self) -> Vec<f64> {
        assert!(self.inner.requires_grad, "grad() on a tensor that does not require grad");
        match &*self.inner.grad.borrow() {
            Some(g) => g.clone(),
            None => vec![0.0; self.numel()],
        }
    }

    /// Runs `f` over the raw gradient buffer (zeros if untouched).
    pub fn with_grad<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        assert!(self.inner.requires_grad, "with_grad() on a tensor that does not require grad");
        match &*self.inner.grad.borrow() {
            Some(g) => f(g),
            None => f(&vec![0.0; self.numel()]),
        }
    }

    /// Whether any backward pass has accumulated into this tensor.
    pub fn grad_touched(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    /// Scales the stored gradient in place; a no-op when untouched.
    pub fn scale_grad(&self, c: f64) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for x in g {
                *x *= c;
            }
        }
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the stored gradient, allocating on first touch.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        assert_eq!(delta.len(), self.numel(), "gradient length mismatch");
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(v) => {
                for (gi, di) in v.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable tensor that requires grad; unreachable leaves stay untouched.
    /// Interior node gradients are dropped afterwards so repeated backward
    /// passes over fresh graphs never double-count.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar loss, got shape {:?}", self.shape());
        assert!(self.inner.requires_grad, "backward() on a constant; nothing to differentiate");

        // Iterative post-order DFS: parents precede children in `order`.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, next_parent)) = stack.pop() {
            if next_parent < node.inner.parents.len() {
                let parent = node.inner.parents[next_parent].clone();
                stack.push((node, next_parent + 1));
                if parent.inner.requires_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(f) = &node.inner.backward {
                if node.inner.grad.borrow().is_some() {
                    f(node);
                }
            }
        }
        // Interior (non-leaf) grads are one-shot scratch state.
        for node in order {
            if node.inner.backward.is_some() {
                node.zero_grad();
            }
        }
    }
}

/// Internal constructor used by the op library.
pub(super) fn make(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: impl Fn(&Tensor) + 'static) -> Tensor {
    Tensor::from_op(&shape, data, parents, backward)
}
