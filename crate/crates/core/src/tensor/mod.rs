//! Flat `f64` tensors with reverse-mode autodiff.
//!
//! Every tensor is an immutable row-major buffer. Ops that consume tracked
//! tensors record a backward closure on a per-thread tape (the closure graph
//! hanging off the output); calling [`Tensor::backward`] on a scalar walks
//! that graph once in reverse topological order, accumulates gradients into
//! every reachable `requires_grad` leaf, and dismantles the graph as it goes.
//! Graphs are rebuilt each forward pass, so data-dependent control flow just
//! works. `Rc` keeps a whole graph confined to one thread; cross-thread
//! training shares plain parameter snapshots instead.

mod dbft_impl;
mod ops;
mod pca_impl;

pub use pca_impl::{pca_fit, Pca};

pub mod dbft {
    //! DBFT tensor container: `"DBFT"` magic, version byte, u8 rank,
    //! little-endian u64 extents, then the row-major payload as f32.
    pub use super::dbft_impl::{decode, decode_prefix, encode, read_tensor, write_tensor};
}

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{CoreError, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Gradient contributions for each parent, `None` where no gradient flows
/// (untracked parents, or inputs that are constants by contract).
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    op: RefCell<Option<Op>>,
}

/// Immutable row-major `f64` tensor. Cloning is a cheap handle copy.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    // Non-finite values are allowed to flow through the tape so that a
    // diverging training run reaches the loss-level abort check instead of
    // dying mid-graph; ingestion boundaries reject them instead.
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                op: RefCell::new(op),
            }),
        }
    }

    /// Untracked leaf. The number of data values must match the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(CoreError::dimension(
                "new",
                format!("shape {shape:?} needs {want} values, got {}", data.len()),
            ));
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf: gradients accumulate here across backward calls.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(CoreError::dimension(
                "param",
                format!("shape {shape:?} needs {want} values, got {}", data.len()),
            ));
        }
        Ok(Tensor::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![value; n], false, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let tracked = parents.iter().any(|p| p.inner.requires_grad.get());
        if tracked {
            Tensor::build(shape, data, true, Some(Op { parents, backward }))
        } else {
            Tensor::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Include or exclude this leaf from future tapes. A frozen leaf records
    /// no new ops (cheaper forward) and receives no gradient.
    pub fn set_trainable(&self, trainable: bool) {
        self.inner.requires_grad.set(trainable);
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor since the last clear.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.inner.grad.replace(None);
    }

    /// Take the gradient out, leaving none behind.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.replace(None)
    }

    /// Untracked copy of the values.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    fn accumulate(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Populates gradients of every
    /// reachable `requires_grad` leaf and consumes the recorded graph, so a
    /// second call on the same graph is a no-op beyond re-seeding the root.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(CoreError::argument(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape()),
            ));
        }
        self.accumulate(&[1.0]);

        // Post-order DFS over nodes that still hold an op.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        if self.inner.op.borrow().is_some() {
            visited.insert(self.inner.id);
            stack.push((self.clone(), 0));
        }
        while let Some((node, child)) = stack.pop() {
            let next = {
                let op = node.inner.op.borrow();
                let parents = &op.as_ref().expect("node on stack always has an op").parents;
                parents.get(child).cloned()
            };
            match next {
                Some(parent) => {
                    stack.push((node, child + 1));
                    if parent.inner.op.borrow().is_some() && visited.insert(parent.inner.id) {
                        stack.push((parent, 0));
                    }
                }
                None => order.push(node),
            }
        }

        for node in order.iter().rev() {
            let op = node.inner.op.replace(None).expect("op taken exactly once");
            let grad = node.inner.grad.replace(None);
            let Some(grad) = grad else { continue };
            let contributions = (op.backward)(&grad);
            debug_assert_eq!(contributions.len(), op.parents.len());
            for (parent, contribution) in op.parents.iter().zip(contributions) {
                if let Some(c) = contribution {
                    if parent.inner.requires_grad.get() {
                        debug_assert_eq!(c.len(), parent.len());
                        parent.accumulate(&c);
                    }
                }
            }
        }
        Ok(())
    }
}
