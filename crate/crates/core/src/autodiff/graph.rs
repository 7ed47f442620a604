//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order for back-propagation and the summation order of
//! every gradient is fixed.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Ctx<'_, T>, &Tensor<T>, &mut GradSink<T>)>;

enum Slot<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Slot<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Read-only view of forward values handed to backward closures.
pub struct Ctx<'a, T> {
    nodes: &'a [Node<T>],
    params: Option<&'a ParamStore<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        slot_value(&self.nodes[v.0].value, self.params)
    }
}

fn slot_value<'a, T: Scalar>(slot: &'a Slot<T>, params: Option<&'a ParamStore<T>>) -> &'a Tensor<T> {
    match slot {
        Slot::Owned(t) => t,
        Slot::Param(id) => params.expect("parameter node without store").get(*id),
    }
}

/// Gradient accumulator used during the reverse sweep.
pub struct GradSink<T> {
    grads: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
}

impl<T: Scalar> GradSink<T> {
    #[inline]
    pub fn needs(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Zero-initialised (on first use) accumulation buffer for `v`.
    pub fn slot(&mut self, v: Var, shape: &[usize]) -> &mut [T] {
        let entry = &mut self.grads[v.0];
        if entry.is_none() {
            *entry = Some(Tensor::zeros(shape.to_vec()));
        }
        entry.as_mut().unwrap().data_mut()
    }

    pub fn add(&mut self, v: Var, t: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            entry @ None => *entry = Some(t),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf node, `None` if it does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        (0..store.len())
            .map(|i| {
                let id = ParamId(i);
                self.bound
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.grads[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect()
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p, T> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph without a parameter store; only inputs and constants are available.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            bound: Vec::new(),
            trainable: true,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            bound: vec![None; params.len()],
            trainable: true,
        }
    }

    /// Inference graph: parameters are bound without gradient tracking and
    /// no backward closures are recorded.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut g = Self::with_params(params);
        g.trainable = false;
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        slot_value(&self.nodes[v.0].value, self.params)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Slot<T>, requires_grad: bool, backward: Option<BackwardFn<T>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Slot::Owned(t), false, None)
    }

    /// Leaf input whose gradient is retained after [`backward`](Self::backward).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let req = self.trainable;
        self.push(Slot::Owned(t), req, None)
    }

    /// Bind a stored parameter (once per graph) and return its node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let req = self.trainable;
        let v = self.push(Slot::Param(id), req, None);
        self.bound[id.0] = Some(v);
        v
    }

    /// Handle the next recorded node will receive.
    pub(crate) fn next_var(&self) -> Var {
        Var(self.nodes.len())
    }

    pub fn param_store(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    /// Record an operation with a hand-written backward rule.
    ///
    /// The closure receives the forward context, the gradient of the output
    /// and the accumulator for the parents. It is only stored when at least
    /// one parent requires a gradient.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Ctx<'_, T>, &Tensor<T>, &mut GradSink<T>) + 'static,
    ) -> Var {
        let req = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let bw: Option<BackwardFn<T>> = if req { Some(Box::new(backward)) } else { None };
        self.push(Slot::Owned(value), req, bw)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward requires a scalar output"
        );
        self.backward_with(output, Tensor::new(self.shape(output).to_vec(), vec![T::one()]))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(output));
        let n = self.nodes.len();
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        sink.grads[output.0] = Some(seed);
        let ctx = Ctx {
            nodes: &self.nodes,
            params: self.params,
        };
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                if let Some(g) = sink.grads[i].take() {
                    bw(&ctx, &g, &mut sink);
                }
            }
        }
        Gradients {
            grads: sink.grads,
            bound: self.bound.clone(),
        }
    }
}
