//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse creation order, which is a
//! valid topological order because a node can only depend on earlier nodes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::param::{Param, ParamId};

/// Dense row-major `f64` tensor of any rank.
pub type Tensor = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Operation tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    /// Binds a trainable parameter. The value is shared, not copied.
    /// Binding the same parameter twice returns the same node.
    pub fn param(&self, param: &Param) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&param.id()) {
            return Var { graph: self, id };
        }
        let var = self.push_node(Node {
            value: param.shared(),
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        });
        self.params.borrow_mut().insert(param.id(), var.id);
        var
    }

    /// Binds a parameter as a constant (frozen for this pass).
    pub fn frozen(&self, param: &Param) -> Var<'_> {
        self.push_node(Node {
            value: param.shared(),
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    /// Records a custom differentiable operation.
    ///
    /// `backward` receives the upstream gradient (same shape as `value`) and
    /// a mask telling which parents need a gradient; it must return one entry
    /// per parent, each either `None` or a tensor shaped like that parent.
    pub fn apply<'g, F>(&'g self, parents: &[Var<'g>], value: Tensor, backward: F) -> Var<'g>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.graph, self), "mixing graphs");
                nodes[p.id].requires_grad
            })
        };
        self.push_node(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// # Panics
    /// Panics if `loss` does not hold exactly one element.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(
            std::ptr::eq(loss.graph, self),
            "loss belongs to another graph"
        );
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::ones(nodes[loss.id].value.raw_dim()));
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    leaves.insert(id, upstream);
                }
                Some(f) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let parent_grads = f(&upstream, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(g) = g else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(
                            g.shape(),
                            nodes[p].value.shape(),
                            "gradient shape mismatch for node {p}"
                        );
                        match &mut grads[p] {
                            Some(acc) => *acc += &g,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }

        Gradients {
            leaves,
            params: self.params.borrow().clone(),
        }
    }
}

/// Gradients of a scalar with respect to every leaf that required one.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient for an input leaf created with [`Graph::input`].
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    /// Gradient for a parameter bound with [`Graph::param`]. `None` if the
    /// parameter was not bound or the loss does not depend on it.
    pub fn get(&self, param: &Param) -> Option<&Tensor> {
        self.params
            .get(&param.id())
            .and_then(|id| self.leaves.get(id))
    }

    /// Gradient for `param`, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, param: &Param) -> Tensor {
        self.get(param)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(param.value().shape())))
    }
}
