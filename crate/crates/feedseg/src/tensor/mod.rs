//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records a DAG of operations as it executes the forward pass;
//! [`Tape::backward`] replays it in reverse, accumulating gradients into every
//! node that requires them. Values are always standard-layout `ArrayD<F>`.
//!
//! The element type is generic over [`Scalar`] (`f32` for training, `f64` for
//! finite-difference gradient checks). All operations are deterministic: the
//! only parallelism is over independent batch samples with ordered writes, so
//! parallel and sequential builds produce bit-identical results.

mod conv;
mod linear;
mod norm;
mod ops;

pub mod gradcheck;

pub use conv::Conv2dCfg;

use ndarray::{ArrayD, IxDyn};

/// Element type of the tape: `f32` or `f64`.
pub trait Scalar:
    ndarray::NdFloat + num_traits::FromPrimitive + num_traits::ToPrimitive + std::iter::Sum + 'static
{
    fn f(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
    fn to_f64_(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

/// Backward rule for one operation. `needs[i]` tells which parent gradients
/// are actually consumed; expensive branches may return `None` for the rest.
pub trait GradFn<F: Scalar> {
    fn backward(
        &self,
        grad_out: &ArrayD<F>,
        value: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>>;
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<Var>,
    grad_fn: Option<Box<dyn GradFn<F>>>,
    requires_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in differentiation (parameters, probed inputs).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant (images, targets, masks).
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<F>,
        parents: Vec<Var>,
        grad_fn: Box<dyn GradFn<F>>,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Read a scalar node (shape `[1]`).
    pub fn scalar(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "expected scalar node");
        val.iter().copied().next().unwrap()
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// required them; interior gradients are dropped as soon as they have been
    /// consumed to bound memory.
    pub fn backward(&self, root: Var) -> Grads<F> {
        let rv = &self.nodes[root.0].value;
        assert_eq!(rv.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(ArrayD::ones(IxDyn(rv.shape())));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                continue; // leaf: keep accumulated gradient
            };
            let Some(gout) = grads[id].take() else {
                continue; // not on any path to the root
            };
            let parent_vals: Vec<&ArrayD<F>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let pgrads = grad_fn.backward(&gout, &node.value, &parent_vals, &needs);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}
