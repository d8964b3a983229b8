//! Minimal dense tensor engine with reverse-mode autodiff.
//!
//! Tensors are reference-counted handles to contiguous row-major f32 buffers.
//! Every differentiable operation records a tape node pointing at its inputs;
//! [`Tensor::backward`] walks the recorded graph once in reverse topological
//! order and accumulates gradients into the leaf tensors that requested them.
//!
//! Design points:
//! - Gradients accumulate across backward calls (callers zero them between
//!   optimizer steps), matching the usual training-loop contract.
//! - Forward results are bitwise deterministic: reductions run in a fixed
//!   order and parallelism is only ever over disjoint output slices.
//! - A thread-local "no grad" scope skips tape recording for inference.

mod autodiff;
pub(crate) mod conv;
pub mod flops;
pub(crate) mod matmul;
pub mod ops;

pub use conv::ConvGeom;

use crate::error::{Error, Result};
use autodiff::{backward_op, Op};
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Run `f` without recording any autodiff tape (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD.with(|c| {
        let prev = c.replace(true);
        let out = f();
        c.set(prev);
        out
    })
}

fn grad_disabled() -> bool {
    NO_GRAD.with(|c| c.get())
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f32>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
    node: Option<Node>,
    backward_done: AtomicBool,
}

/// Cheaply clonable handle to a tensor. Clones share storage and gradient.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Tensor {
        // Non-finite values are allowed to propagate: divergence is a runtime
        // condition reported at the boundaries (loader validation, the
        // trainer's non-finite-loss abort), not an engine invariant.
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(None),
                node,
                backward_done: AtomicBool::new(false),
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {shape:?}",
            data.len()
        );
        Tensor::new(data, shape.to_vec(), false, None)
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor::new(data, shape.to_vec(), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::from_vec(vec![value; shape.iter().product()], shape)
    }

    /// Internal constructor for op results.
    pub(crate) fn from_op(data: Vec<f32>, shape: Vec<usize>, op: Op, inputs: Vec<Tensor>) -> Tensor {
        let track = !grad_disabled()
            && inputs
                .iter()
                .any(|t| t.inner.requires_grad || t.inner.node.is_some());
        let node = track.then_some(Node { op, inputs });
        Tensor::new(data, shape, false, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
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

    /// Copy the buffer out.
    pub fn data(&self) -> Vec<f32> {
        self.inner.data.read().unwrap().clone()
    }

    /// Zero-copy read access.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        f(&self.inner.data.read().unwrap())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.inner.data.read().unwrap();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.inner.shape);
        d[0]
    }

    /// Overwrite the buffer in place (e.g. optimizer updates). Shape is fixed.
    pub fn set_data(&self, new: &[f32]) {
        let mut d = self.inner.data.write().unwrap();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Mutate the buffer in place through a closure.
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.data.write().unwrap());
    }

    /// Copy of the accumulated gradient, if any backward has reached this leaf.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Detached copy: same values, no tape, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.data(), &self.inner.shape)
    }

    fn wants_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    /// Reverse-mode sweep from a scalar. Accumulates `+=` into the gradient of
    /// every reachable leaf with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.inner.shape.clone()));
        }
        if self.inner.node.is_none() {
            return Err(Error::DisconnectedTape);
        }
        if self.inner.backward_done.swap(true, Ordering::SeqCst) {
            return Err(Error::BackwardTwice);
        }

        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);

        for t in order.iter().rev() {
            let Some(out_grad) = grads.remove(&t.inner.id) else {
                continue;
            };
            if let Some(node) = &t.inner.node {
                let needs: Vec<bool> = node.inputs.iter().map(|i| i.wants_grad()).collect();
                let input_grads = backward_op(&node.op, &node.inputs, t, &out_grad, &needs);
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    debug_assert_eq!(ig.len(), input.numel());
                    match grads.entry(input.inner.id) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&ig) {
                                *a += b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(ig);
                        }
                    }
                }
            }
            if t.inner.requires_grad && t.inner.node.is_none() {
                let mut slot = t.inner.grad.lock().unwrap();
                match slot.as_mut() {
                    Some(g) => {
                        for (a, b) in g.iter_mut().zip(&out_grad) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(out_grad),
                }
            }
        }
        Ok(())
    }

    /// Deterministic post-order DFS over the tape (children before parents).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, children_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.inner.id) {
                continue;
            }
            let children: Vec<Tensor> = match &t.inner.node {
                Some(node) => node.inputs.clone(),
                None => Vec::new(),
            };
            stack.push((t, true));
            // Reverse so inputs are visited in declaration order.
            for c in children.into_iter().rev() {
                if !visited.contains(&c.inner.id) {
                    stack.push((c, false));
                }
            }
        }
        order
    }
}
