//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node holding its output value and a record of
//! its inputs. [`Tape::backward`] walks the nodes once in reverse creation
//! order, which is a valid reverse topological order because an op can only
//! reference nodes created before it.

pub mod gradcheck;
pub mod kernels;
mod ops;

pub use ops::BnMode;
pub use gradcheck::{grad_check, GradCheck, KINK_MARGIN};
pub(crate) use ops::pact_value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ops::Op;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer recording of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    ste_surrogate: bool,
    kink_distance: f64,
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
            ste_surrogate: false,
            kink_distance: f64::INFINITY,
        }
    }

    /// A tape whose fake-quant nodes evaluate the clamp surrogate instead of
    /// rounding. The straight-through gradient is the exact derivative of
    /// that surrogate, which makes it checkable by finite differences.
    pub fn with_ste_surrogate() -> Self {
        Tape {
            ste_surrogate: true,
            ..Self::new()
        }
    }

    pub fn ste_surrogate(&self) -> bool {
        self.ste_surrogate
    }

    /// Smallest distance from any input of a non-smooth op (relu, pact,
    /// fake-quant) to one of its breakpoints seen so far.
    pub fn kink_distance(&self) -> f64 {
        self.kink_distance
    }

    pub(crate) fn note_kink(&mut self, d: f64) {
        if d < self.kink_distance {
            self.kink_distance = d;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            ops::backward_op(self, &node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zero when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// Accumulates into the gradient slot of `v`, allocating it on first use.
fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], tape: &Tape, v: Var) -> Option<&'a mut Vec<f64>> {
    if !tape.nodes[v.0].requires_grad {
        return None;
    }
    let len = tape.nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let th = t.leaf(Tensor::scalar(3.0));
        let l = t.mul(th, th).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(th).item().unwrap(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut t = Tape::new();
        let th = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::scalar(4.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(th).data(), &[0.0, 0.0]);
        assert!(!g.is_reached(th));
    }

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_bt() {
        let mut t = Tape::new();
        let a_val = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b_val = Tensor::matrix(&[&[1.0, -1.0], &[0.5, 2.0], &[-3.0, 0.25]]);
        let a = t.leaf(a_val);
        let b = t.leaf(b_val.clone());
        let c = t.matmul(a, b).unwrap();
        let l = t.sum(c);
        let g = t.backward(l).unwrap();
        let want = Tensor::ones(&[2, 2]).matmul(&b_val.transpose2().unwrap()).unwrap();
        assert_eq!(g.get(a), want);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(2.0));
        let b = t.leaf(Tensor::scalar(5.0));
        let l = t.mul(a, a).unwrap();
        let _unused = t.mul(b, b).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(b).item().unwrap(), 0.0);
        assert_eq!(g.get(a).item().unwrap(), 4.0);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x_val = Tensor::vector(vec![0.3, -1.7, 2.2]);
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(x_val.clone());
            let c = t.constant(Tensor::vector(vec![1.5, -0.2, 0.9]));
            let xc = t.mul(x, c).unwrap();
            let l1 = t.sum(xc);
            let g = t.gelu(x);
            let l2 = t.sum(g);
            let l = match which {
                1 => l1,
                2 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            t.backward(l).unwrap().get(x)
        };
        let combined = grad_of(0);
        let separate = grad_of(1).zip_map(&grad_of(2), |a, b| a + b).unwrap();
        assert_eq!(combined, separate);
    }
}
