//! Eager reverse-mode autodiff over a flat tape of tensor nodes.
//!
//! Ops execute immediately and record themselves on the tape; [`Graph::backward`]
//! then sweeps the tape in reverse, handing each op its upstream gradient and
//! accumulating the returned input gradients. A fresh graph is built per
//! episode and dropped afterwards, so node indices are simple `usize` handles
//! and parents always precede children.

use crate::numerics::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a tensor node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tx(pub(crate) usize);

/// Backward context handed to an op: input values, the op's own output, and
/// the gradient of the loss with respect to that output.
pub struct OpCtx<'a, F: Scalar> {
    pub inputs: &'a [&'a Tensor<F>],
    pub output: &'a Tensor<F>,
    pub grad: &'a Tensor<F>,
}

/// A differentiable operation recorded on the tape.
///
/// `backward` must return one gradient tensor per input, in input order.
pub trait Op<F: Scalar> {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>>;
}

struct Node<F: Scalar> {
    data: Tensor<F>,
    parents: Vec<Tx>,
    op: Option<Box<dyn Op<F>>>,
}

/// Append-only autodiff tape.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Inserts an input node (parameter or data); leaves have no backward op.
    pub fn leaf(&mut self, t: Tensor<F>) -> Tx {
        self.nodes.push(Node { data: t, parents: Vec::new(), op: None });
        Tx(self.nodes.len() - 1)
    }

    /// Records an op node with its already-computed output.
    pub fn push(&mut self, out: Tensor<F>, parents: Vec<Tx>, op: Box<dyn Op<F>>) -> Tx {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node { data: out, parents, op: Some(op) });
        Tx(self.nodes.len() - 1)
    }

    /// Value of a node.
    pub fn value(&self, x: Tx) -> &Tensor<F> {
        &self.nodes[x.0].data
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar loss node; gradients become available via
    /// [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Tx) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.data.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.data.shape().to_vec(), F::one()));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else {
                continue; // leaf: gradient stays available for retrieval
            };
            let grad_out = grads[i].take().expect("checked above");
            let inputs: Vec<&Tensor<F>> =
                node.parents.iter().map(|p| &self.nodes[p.0].data).collect();
            let pgrads = op.backward(OpCtx { inputs: &inputs, output: &node.data, grad: &grad_out });
            debug_assert_eq!(
                pgrads.len(),
                node.parents.len(),
                "op {} returned wrong gradient arity",
                op.name()
            );
            for (p, pg) in node.parents.clone().into_iter().zip(pgrads) {
                debug_assert_eq!(self.nodes[p.0].data.shape(), pg.shape());
                match &mut grads[p.0] {
                    slot @ None => *slot = Some(pg),
                    Some(acc) => {
                        for (a, &b) in acc.values_mut().iter_mut().zip(pg.values()) {
                            *a = *a + b;
                        }
                    }
                }
            }
            grads[i] = Some(grad_out);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to node `x`, if the
    /// node participated in the loss.
    pub fn grad(&self, x: Tx) -> Option<&Tensor<F>> {
        self.grads.get(x.0).and_then(|g| g.as_ref())
    }
}
