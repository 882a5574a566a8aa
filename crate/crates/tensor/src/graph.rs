use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// Recording tape for one forward pass.
///
/// A graph is built per step and dropped afterwards. Parameters enter the tape
/// through [`Graph::param`], which shares the store's storage rather than
/// copying it.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Accumulates gradients during the reverse sweep.
pub struct GradSink<T> {
    grads: Vec<Option<Tensor<T>>>,
    wants: Vec<bool>,
}

impl<T: Scalar> GradSink<T> {
    /// Whether node `id` needs a gradient at all; lets ops skip expensive work.
    pub fn wants(&self, id: usize) -> bool {
        self.wants[id]
    }

    pub fn accumulate(&mut self, id: usize, grad: Tensor<T>) {
        if !self.wants[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradients of leaves after [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[var.id].as_ref()
    }

    /// Gradient for every parameter that took part in the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }

    pub fn param(&self, pid: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == pid)
            .and_then(|&(_, node)| self.grads[node].as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(512)),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A graph for inference only; nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that requires a gradient (when the graph records gradients).
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), self.grad_enabled, None)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), false, None)
    }

    /// Parameter leaf; repeated calls with the same id return the same node.
    pub fn param(&self, store: &ParamStore<T>, pid: ParamId) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&pid) {
            return Var { graph: self, id };
        }
        let v = self.push_leaf(store.shared(pid), self.grad_enabled, Some(pid));
        self.params.borrow_mut().insert(pid, v.id);
        v
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward: None,
            param,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records an op result. `backward` is dropped when no input needs a gradient.
    pub(crate) fn push_op(
        &self,
        value: Tensor<T>,
        inputs: &[usize],
        backward: impl Fn(&Tensor<T>, &mut GradSink<T>) + 'static,
    ) -> Var<'_, T> {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.requires_grad(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            param: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar (or seeded with ones for non-scalars).
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            wants: nodes.iter().map(|nd| nd.requires_grad).collect(),
        };
        let root_value = &nodes[root.id].value;
        sink.grads[root.id] = Some(Tensor::ones(root_value.shape().to_vec()));
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for id in (0..=root.id).rev() {
            let Some(grad) = sink.grads[id].take() else {
                continue;
            };
            match &nodes[id].backward {
                Some(f) => f(&grad, &mut sink),
                None => leaf_grads[id] = Some(grad),
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.map(|p| (p, i)))
            .collect();
        Gradients {
            grads: leaf_grads,
            params,
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.nodes.borrow()[self.id].value.shape()[axis]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }
}
