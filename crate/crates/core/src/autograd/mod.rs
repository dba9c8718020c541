//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a Wengert tape: every op appends a node holding its forward
//! value and, when any input requires a gradient, a boxed backward rule.
//! [`Graph::backward`] replays the rules in reverse insertion order. One graph
//! serves one forward/backward pass and is then dropped.

mod basic;
mod conv;
pub mod gradcheck;
mod linalg;
mod loss;
mod norm;

pub(crate) use basic::sigmoid;
pub use norm::{RunningStats, BN_EPS, BN_MOMENTUM};

use crate::error::TensorError;
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read access to forward values while a backward rule runs.
pub(crate) struct BackwardCtx<'a, F: Real> {
    nodes: &'a [Node<F>],
    output: usize,
}

impl<F: Real> BackwardCtx<'_, F> {
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn output(&self) -> &Tensor<F> {
        &self.nodes[self.output].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

/// Backward rule of one recorded op.
pub(crate) trait Backward<F: Real>: Send {
    fn inputs(&self) -> Vec<Var>;

    /// Gradient contributions for each entry of [`Backward::inputs`], in the
    /// same order; `None` for inputs that need no gradient.
    fn backward(&self, ctx: &BackwardCtx<'_, F>, grad_out: &[F]) -> Vec<Option<Vec<F>>>;
}

/// Backward rule backed by a closure over saved forward state.
struct FnRule<F, C> {
    inputs: Vec<Var>,
    f: C,
    _scalar: std::marker::PhantomData<fn() -> F>,
}

impl<F, C> Backward<F> for FnRule<F, C>
where
    F: Real,
    C: Fn(&BackwardCtx<'_, F>, &[F]) -> Vec<Option<Vec<F>>> + Send,
{
    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, grad_out: &[F]) -> Vec<Option<Vec<F>>> {
        (self.f)(ctx, grad_out)
    }
}

pub(crate) fn rule<F, C>(inputs: Vec<Var>, f: C) -> Box<dyn Backward<F>>
where
    F: Real,
    C: Fn(&BackwardCtx<'_, F>, &[F]) -> Vec<Option<Vec<F>>> + Send + 'static,
{
    Box::new(FnRule {
        inputs,
        f,
        _scalar: std::marker::PhantomData,
    })
}

struct Node<F: Real> {
    value: Tensor<F>,
    rule: Option<Box<dyn Backward<F>>>,
    requires_grad: bool,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    ///
    /// Only leaves keep their gradients; interior buffers are released as
    /// soon as they have been propagated.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("gradient shape"))
    }

    pub(crate) fn grad_slice(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Records a computed value. The backward rule is kept only when some
    /// input requires a gradient.
    pub(crate) fn push(&mut self, value: Tensor<F>, rule: Box<dyn Backward<F>>) -> Var {
        let requires_grad = rule.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            rule: requires_grad.then_some(rule),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_with(loss, vec![F::one()])
    }

    /// Back-propagates an explicit output gradient (vector-Jacobian product).
    pub fn backward_with(&mut self, output: Var, seed: Vec<F>) -> Result<(), TensorError> {
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: vec![seed.len()],
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(rule) = self.nodes[i].rule.as_ref() else {
                continue;
            };
            let Some(grad_out) = self.grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                nodes: &self.nodes,
                output: i,
            };
            let inputs = rule.inputs();
            let contributions = rule.backward(&ctx, &grad_out);
            debug_assert_eq!(inputs.len(), contributions.len());
            for (input, contribution) in inputs.into_iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(c.len(), self.nodes[input.0].value.len());
                match &mut self.grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn ensure_same_shape(
    op: &'static str,
    a: &Tensor<impl Real>,
    b: &Tensor<impl Real>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradients_accumulate_over_fan_out() {
        // y = x*x + x  ⇒  dy/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[1], &[3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_get_no_rule_and_no_grad() {
        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor::ones(&[3]));
        let p = g.param(Tensor::ones(&[3]));
        let y = g.scale(c, 2.0).unwrap();
        assert!(!g.requires_grad(y));
        let z = g.mul(y, p).unwrap();
        let loss = g.sum_all(z).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let a = g.param(Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
            let b = g.param(Tensor::from_f64(&[3, 2], &[1.1, 0.2, -0.3, 0.7, 0.9, -1.3]).unwrap());
            let c = g.matmul(a, b).unwrap();
            let s = g.sigmoid(c).unwrap();
            let loss = g.mean_all(s).unwrap();
            g.backward(loss).unwrap();
            (g.grad(a).unwrap(), g.grad(b).unwrap())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }
}
