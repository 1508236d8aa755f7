//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major and immutable once created, except for leaf
//! parameters whose storage may be rewritten between training steps
//! (after the graph that referenced them has been dropped). Every op
//! records its parents and a backward closure; [`backward`] replays the
//! tape in reverse topological order.

pub mod ops;

pub use ops::{concat_tokens, matmul};

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{AtxfError, Result};

type BackwardFn = Box<dyn Fn(&Tensor)>;

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a tensor node. Cloning is cheap.
pub struct Tensor {
    node: Rc<Node>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    /// New leaf tensor.
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite leaf data");
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Constant (non-differentiable) tensor.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data, false)
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Tensor {
        let n = numel_of(&shape);
        Tensor::new(shape, vec![0.0; n], requires_grad)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![1], vec![v])
    }

    /// Interior op-node constructor. Parents and the backward closure are
    /// dropped when no parent needs gradients, so inference builds no tape.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        assert_eq!(numel_of(&shape), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by op"
        );
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor {
                node: Rc::new(Node {
                    shape,
                    data: RefCell::new(data),
                    requires_grad: true,
                    grad: RefCell::new(None),
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Tensor::constant(shape, data)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Mutable access to leaf storage (optimizer updates). Interior nodes
    /// are never mutated.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        assert!(
            self.node.parents.is_empty(),
            "data_mut is only valid on leaf tensors"
        );
        self.node.data.borrow_mut()
    }

    /// Scalar extraction.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.node.data.borrow()[0]
    }

    /// Detached constant copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.node.shape.clone(), self.node.data.borrow().clone())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn ensure_grad(&self) {
        let mut g = self.node.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.numel()]);
        }
    }

    /// Accumulate a gradient contribution (no-op on non-grad tensors).
    pub(crate) fn accum_grad(&self, delta: &[f64]) {
        if !self.node.requires_grad {
            return;
        }
        self.ensure_grad();
        let mut slot = self.node.grad.borrow_mut();
        let g = slot.as_mut().unwrap();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Scale any accumulated gradient in place (gradient clipping).
    pub fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.node.grad.borrow_mut().as_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Mutable view of the gradient buffer, created on demand.
    pub(crate) fn grad_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.ensure_grad();
        RefMut::map(self.node.grad.borrow_mut(), |g| g.as_mut().unwrap())
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.node)
    }
}

/// Reverse topological order of the grad-requiring subgraph rooted at `t`.
/// This is the computation graph realized for one backward pass: a DAG in
/// which every node's inputs precede it.
fn topo_order(t: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<*const Node> = HashSet::new();
    // Iterative DFS; stack holds (node, next-parent index).
    let mut stack: Vec<(Tensor, usize)> = vec![(t.clone(), 0)];
    seen.insert(t.ptr());
    while let Some((node, idx)) = stack.pop() {
        if idx < node.node.parents.len() {
            let parent = node.node.parents[idx].clone();
            stack.push((node, idx + 1));
            if parent.requires_grad() && seen.insert(parent.ptr()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Run reverse-mode differentiation from a scalar loss.
///
/// With `accumulate = false` the gradients of every reachable node are
/// reset first; with `true` new contributions add onto existing ones.
pub fn backward(loss: &Tensor, accumulate: bool) -> Result<()> {
    if loss.numel() != 1 {
        return Err(AtxfError::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(AtxfError::Contract(
            "loss does not depend on any differentiable tensor".into(),
        ));
    }
    let order = topo_order(loss);
    if !accumulate {
        for t in &order {
            t.zero_grad();
        }
    }
    loss.accum_grad(&[1.0]);
    for t in order.iter().rev() {
        if let Some(f) = &t.node.backward {
            f(t);
        }
    }
    Ok(())
}

#[cfg(test)]
pub mod tests;
