use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{GradientMap, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    param: Option<(ParamId, String)>,
    backward: Option<BackwardFn<T>>,
}

/// A recorded forward computation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep. A graph is single-use:
/// [`Var::backward`] consumes the recorded closures.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
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

/// Receives gradient contributions during the backward sweep.
pub struct GradSink<T> {
    grads: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
}

impl<T: Scalar> GradSink<T> {
    /// Whether node `id` needs a gradient at all. Backward closures use this
    /// to skip work such as the input gradient of the first convolution.
    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Adds `g` to the gradient of node `id`; contributions are summed.
    pub fn add(&mut self, id: usize, g: Tensor<T>) {
        if !self.requires[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => {
                assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch at node {id}");
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// All gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: GradientMap<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node, `None` if it did not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &GradientMap<T> {
        &self.params
    }

    pub fn into_params(self) -> GradientMap<T> {
        self.params
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        assert!(!self.consumed.get(), "graph was already consumed by backward()");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Arc::new(value),
            requires_grad: true,
            param: None,
            backward: None,
        })
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Arc::new(value),
            requires_grad: false,
            param: None,
            backward: None,
        })
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_, T> {
        self.constant(Tensor::zeros(shape))
    }

    /// Brings a stored parameter into the graph. Repeated calls return the
    /// same node, so every use of a parameter accumulates into one gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let p = store.param(id);
        let v = self.push(Node {
            value: Arc::clone(&p.tensor),
            requires_grad: true,
            param: Some((id, p.name.clone())),
            backward: None,
        });
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    /// Records the result of an operation on `inputs`.
    ///
    /// `backward` receives the gradient of the output and must push
    /// contributions for its inputs into the sink. It is dropped unused when
    /// no input requires a gradient.
    pub fn op(
        &self,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        backward: impl FnOnce(&Tensor<T>, &mut GradSink<T>) + 'static,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        if cfg!(debug_assertions) && !value.all_finite() {
            let nodes = self.nodes.borrow();
            let inputs_finite = inputs.iter().all(|v| nodes[v.id].value.all_finite());
            assert!(
                !inputs_finite,
                "operation produced non-finite values from finite inputs"
            );
        }
        self.push(Node {
            value: Arc::new(value),
            requires_grad,
            param: None,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        })
    }

    fn backward_from(&self, loss: usize) -> Gradients<T> {
        assert!(!self.consumed.replace(true), "graph was already consumed by backward()");
        let mut nodes = self.nodes.borrow_mut();
        {
            let v = &nodes[loss].value;
            assert_eq!(v.len(), 1, "backward() needs a scalar loss, got shape {:?}", v.shape());
        }
        let n = nodes.len();
        let requires: Vec<bool> = nodes.iter().map(|nd| nd.requires_grad).collect();
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            requires,
        };
        if !nodes[loss].requires_grad {
            log::warn!("backward() on a loss that does not depend on any differentiable input");
            return Gradients {
                grads: sink.grads,
                params: GradientMap::new(),
            };
        }
        let shape = nodes[loss].value.shape().to_vec();
        sink.grads[loss] = Some(Tensor::ones(&shape));
        for id in (0..=loss).rev() {
            let Some(bw) = nodes[id].backward.take() else { continue };
            let Some(g) = sink.grads[id].take() else { continue };
            bw(&g, &mut sink);
            sink.grads[id] = Some(g);
        }
        // drop remaining closures: the graph is consumed
        for nd in nodes.iter_mut() {
            nd.backward = None;
        }
        let mut params = GradientMap::new();
        for (id, nd) in nodes.iter().enumerate() {
            if let (Some((pid, name)), Some(g)) = (&nd.param, &sink.grads[id]) {
                params.grads.insert(name.clone(), (*pid, g.clone()));
            }
        }
        Gradients {
            grads: sink.grads,
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
        Arc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// The single element of a scalar node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Gradients of this scalar with respect to every stored parameter that
    /// contributed. Consumes the graph.
    pub fn backward(self) -> GradientMap<T> {
        self.graph.backward_from(self.id).into_params()
    }

    /// Like [`Var::backward`] but also exposes gradients of leaves and
    /// intermediate nodes.
    pub fn backward_all(self) -> Gradients<T> {
        self.graph.backward_from(self.id)
    }
}
