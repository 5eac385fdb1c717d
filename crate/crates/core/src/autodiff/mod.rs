//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its output value, its
//! parent indices and a vector-Jacobian product closure. Nodes are appended
//! in evaluation order, so walking the tape backwards is a reverse
//! topological traversal and each node is visited exactly once.

pub(crate) mod ops;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a node's backward closure.
pub struct BackCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Parent values in the order they were recorded.
    pub inputs: Vec<&'a Tensor>,
    /// This node's output value.
    pub output: &'a Tensor,
    /// Which parents actually need a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackCtx<'_>) -> Result<Vec<Option<Tensor>>> + Send + Sync>;

struct Node {
    name: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Recorded computation graph (a gradient tape).
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only. Used for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            name: "leaf",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a node. `backward` is dropped when no parent requires a gradient.
    pub fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            name,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Whether any of `vars` needs a gradient; ops use this to skip caching.
    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = loss.0 + 1;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackCtx {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = bw(&ctx)?;
            for (k, pg) in parent_grads.into_iter().enumerate() {
                let Some(pg) = pg else { continue };
                let p = node.parents[k];
                if !self.nodes[p].requires_grad {
                    continue;
                }
                let acc = match &mut grads[p] {
                    Some(acc) => {
                        acc.axpy(1.0, &pg)?;
                        acc
                    }
                    slot @ None => slot.insert(pg),
                };
                if !acc.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("gradient flowing from node {i} ({}) into node {p}", node.name),
                    });
                }
            }
        }
        // leaves have no backward closure, so their accumulated gradients remain
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when unreached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[4], vec![1., -2., 3., 0.5]).unwrap());
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn quadratic_matrix_gradient_by_hand() {
        // loss = |W x|^2 / 2, dL/dW = (W x) x^T
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
        let x = tape.constant(Tensor::new(&[2], vec![5., -1.]).unwrap());
        let wx = tape.matvec(w, x).unwrap();
        let sq = tape.sum_sq(wx);
        let loss = tape.scale(sq, 0.5);
        let g = tape.backward(loss).unwrap();
        // W x = (1*5 - 2, 3*5 - 4) = (3, 11)
        assert_eq!(g.get(w).unwrap().data(), &[15., -3., 55., -11.]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(3.0));
        let b = tape.mul(a, a).unwrap();
        let c = tape.add(b, a).unwrap();
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(3.0));
        let b = tape.param(Tensor::scalar(2.0));
        let c = tape.mul(a, b).unwrap();
        let g = tape.backward(c).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn non_finite_gradient_names_node() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(f64::MAX));
        let b = tape.mul(a, a).unwrap();
        let c = tape.sum(b);
        let err = tape.backward(c).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn no_grad_tape_records_values_only() {
        let mut tape = Tape::no_grad();
        let a = tape.param(Tensor::scalar(2.0));
        let b = tape.mul(a, a).unwrap();
        assert_eq!(tape.value(b).data(), &[4.0]);
        assert!(!tape.requires_grad(b));
    }
}
