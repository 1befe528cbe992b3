//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive records its
//! output value together with a backward rule that maps the output gradient
//! to gradients of its inputs. [`Tape::backward`] walks the nodes in reverse
//! creation order, which is a valid reverse topological order because a node
//! can only reference nodes created before it.
//!
//! A tape created with [`Tape::no_grad`] records values only; it is the
//! inference path used by decoding and the RTF benchmark.

mod grad_check;
mod ops;

use std::sync::Arc;

pub use grad_check::{grad_check, grad_check_sampled, GradCheckReport};

use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule: given the gradient of the node output and read access to
/// all recorded values, return one gradient per parent (`None` = no
/// contribution).
pub type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &Values<'_, F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Scalar> {
    value: Arc<Tensor<F>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
}

/// Read-only view of the recorded values, handed to backward rules.
pub struct Values<'a, F: Scalar> {
    nodes: &'a [Node<F>],
}

impl<F: Scalar> Values<'_, F> {
    pub fn get(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    macs: u64,
    labels: Vec<(usize, &'static str)>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            macs: 0,
            labels: Vec::new(),
        }
    }

    /// A tape that records no backward rules.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
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

    /// Multiply-accumulate count of all matrix-type primitives so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn count_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    /// A differentiable leaf (trainable parameter or input under test).
    pub fn leaf(&mut self, value: Arc<Tensor<F>>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(value, requires_grad, Vec::new(), None)
    }

    pub fn leaf_owned(&mut self, value: Tensor<F>) -> Var {
        self.leaf(Arc::new(value))
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Arc::new(value), false, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an operation with a hand-written backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<F>,
        backward: impl Fn(&Tensor<F>, &Values<'_, F>) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(value.all_finite(), "non-finite value recorded: {value:?}");
        if requires_grad {
            let parents = inputs.iter().map(|v| v.0).collect();
            self.push(Arc::new(value), true, parents, Some(Box::new(backward)))
        } else {
            self.push(Arc::new(value), false, Vec::new(), None)
        }
    }

    fn push(
        &mut self,
        value: Arc<Tensor<F>>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<F>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Direct inputs of `v` as recorded for differentiation (empty for
    /// leaves and for nodes that need no gradient).
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].parents.iter().map(|&p| Var(p)).collect()
    }

    /// Attach a name to a node so structural checks can find it later.
    pub fn label(&mut self, v: Var, name: &'static str) {
        self.labels.push((v.0, name));
    }

    /// Names of all labelled nodes that `v` depends on (including `v`),
    /// in creation order.
    pub fn labeled_ancestors(&self, v: Var) -> Vec<&'static str> {
        let mut reach = vec![false; v.0 + 1];
        reach[v.0] = true;
        for i in (0..=v.0).rev() {
            if reach[i] {
                for &p in &self.nodes[i].parents {
                    reach[p] = true;
                }
            }
        }
        self.labels
            .iter()
            .filter(|(i, _)| *i <= v.0 && reach[*i])
            .map(|&(_, name)| name)
            .collect()
    }

    /// Reverse sweep from a scalar output. Every node is visited at most once
    /// and fan-out gradients accumulate additively.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(output).shape().to_vec();
        grads[output.0] = Some(Tensor::full(&shape, F::one()));
        let values = Values { nodes: &self.nodes };
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_grads = rule(&g, &values);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of a scalar with respect to every leaf on the tape.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}
