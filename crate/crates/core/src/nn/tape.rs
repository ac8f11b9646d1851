//! Reverse-mode automatic differentiation over `f64` ndarray tensors.
//!
//! A [`Tape`] records every tensor produced while building a computation; a
//! [`Var`] is a cheap handle into it. Operations (defined in [`super::ops`])
//! compute their value eagerly and register a closure that routes the
//! upstream gradient to their parents. [`Tape::backward`] then walks the
//! records in reverse creation order — which is always a valid reverse
//! topological order — accumulating gradients into a [`GradStore`].
//!
//! Inputs come in two flavours: [`Tape::leaf`] for tensors whose gradients
//! the caller wants (parameters, or inputs under a finite-difference check)
//! and [`Tape::constant`] for plain data, which lets expensive operations
//! skip the gradient half that nobody will read. Intermediate gradients are
//! dropped as soon as they have been propagated.

use std::cell::{Ref, RefCell};

use ndarray::{ArrayD, IxDyn};

/// Gradient routine of one recorded operation: receives the gradient with
/// respect to the operation's output and accumulates into the parents' slots.
pub(crate) type GradFn = Box<dyn Fn(&ArrayD<f64>, &Tape, &mut GradStore)>;

struct Node {
    value: ArrayD<f64>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

/// Handle to one tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

/// Records a computation graph and owns every intermediate value.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an input tensor whose gradient the caller wants; leaf
    /// gradients survive [`Tape::backward`].
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None, true)
    }

    /// Registers plain input data. No gradient is accumulated for it, and
    /// operations may skip computing one entirely.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None, false)
    }

    pub(crate) fn push_op(&self, value: ArrayD<f64>, grad_fn: GradFn) -> Var {
        self.push(value, Some(grad_fn), true)
    }

    fn push(&self, value: ArrayD<f64>, grad_fn: Option<GradFn>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad_fn,
            needs_grad,
        });
        Var { id: nodes.len() - 1 }
    }

    /// Immutable view of a recorded value.
    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].needs_grad
    }

    /// Scalar payload of a zero-dimensional value (typically a loss).
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1, "scalar() on non-scalar value");
        *value.iter().next().expect("empty tensor")
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse-mode sweep from a scalar `root`. Returns the gradients of
    /// `root` with respect to every leaf reachable from it.
    pub fn backward(&self, root: Var) -> GradStore {
        let n = self.len();
        let mut store = GradStore { grads: vec![None; n] };
        {
            let nodes = self.nodes.borrow();
            assert_eq!(
                nodes[root.id].value.len(),
                1,
                "backward roots must be scalar"
            );
            store.grads[root.id] = Some(ArrayD::ones(IxDyn(nodes[root.id].value.shape())));
            for id in (0..=root.id).rev() {
                if nodes[id].grad_fn.is_none() {
                    continue; // leaf or constant: nothing upstream of it
                }
                // take: an intermediate gradient is dead once propagated
                let Some(grad) = store.grads[id].take() else {
                    continue;
                };
                (nodes[id].grad_fn.as_ref().unwrap())(&grad, self, &mut store);
            }
        }
        store
    }
}

/// Accumulated gradients, indexed by [`Var`].
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Adds `g` into the slot for `v`; no-op for constants.
    pub(crate) fn accumulate(&mut self, tape: &Tape, v: Var, g: ArrayD<f64>) {
        if !tape.needs_grad(v) {
            return;
        }
        match &mut self.grads[v.id] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}
