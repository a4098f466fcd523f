//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable op is a method on [`Tape`] that computes its output
//! eagerly and records a backward closure-like object together with the ids
//! of its inputs. Nodes are appended in execution order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep. Gradient accumulation order depends only on the recording
//! order, which makes repeated passes bit-identical.

mod conv;
mod elementwise;
mod linear;
mod norm;
mod pool;

pub use elementwise::Mode;
pub use norm::{BatchStats, BnMode, RunningStats, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable tensor with an optional gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Float> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for `{}` does not match value {:?}",
                grad.shape(),
                self.name,
                self.value.shape()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Read access to the recorded values an op needs in its backward pass.
pub(crate) struct Ctx<'a, T> {
    tape: &'a Tape<T>,
    inputs: &'a [Var],
    output: Var,
}

impl<T: Float> Ctx<'_, T> {
    pub(crate) fn input(&self, i: usize) -> &Tensor<T> {
        &self.tape.nodes[self.inputs[i].0].value
    }

    pub(crate) fn needs_grad(&self, i: usize) -> bool {
        self.tape.nodes[self.inputs[i].0].requires_grad
    }

    pub(crate) fn output(&self) -> &Tensor<T> {
        &self.tape.nodes[self.output.0].value
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// Returns one entry per input, `None` where the input needs no gradient.
pub(crate) trait Backward<T: Float> {
    fn backward(&self, ctx: &Ctx<'_, T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
}

/// Ordered record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Data input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.leaf(p.value.clone(), p.trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: impl Backward<T> + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires a gradient and is reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaves });
        }
        pending[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                if node.requires_grad {
                    leaves[i] = Some(grad);
                }
                continue;
            };
            let ctx = Ctx {
                tape: self,
                inputs: &node.inputs,
                output: Var(i),
            };
            let input_grads = op.backward(&ctx, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input.0].value.shape());
                match &mut pending[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn check_rank<T: Copy>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape(format!(
            "{what} expects rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &xv);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn inputs_do_not_receive_gradients() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::full(vec![2], 1.0));
        let w = tape.leaf(Tensor::full(vec![2], 3.0), true);
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn parameter_grad_shape_enforced() {
        let mut p = Parameter::new("w", Tensor::<f32>::zeros(vec![2, 3]));
        assert!(p.set_grad(Tensor::zeros(vec![3, 2])).is_err());
        assert!(p.set_grad(Tensor::zeros(vec![2, 3])).is_ok());
    }
}
