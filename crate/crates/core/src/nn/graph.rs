//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so node ids are already a topological order and the backward sweep
//! is a single reverse scan. Graphs are cheap and meant to be built per
//! forward pass and dropped afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::ArrayD;

pub type Tensor = ArrayD<f64>;

/// Computes parent gradients from the output gradient. The mask says which
/// parents need one; entries for the others may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
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

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub(crate) fn op<'g>(
        &'g self,
        value: Tensor,
        parents: &[Var<'g>],
        backward: BackwardFn,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Backpropagates from a scalar `root` (seed gradient 1).
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let seed = Tensor::from_elem(root.value().raw_dim(), 1.0);
        self.backward_with(root, seed)
    }

    /// Backpropagates an arbitrary seed gradient from `root`.
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&out_grad, &mask);
            for ((&pid, need), g) in node.parents.iter().zip(&mask).zip(parent_grads) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[pid] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of a backward sweep, indexed by the variables they belong to.
/// Only leaves keep their gradient; intermediate nodes are released as the
/// sweep passes them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn take_or_zeros(&mut self, var: Var<'_>) -> Tensor {
        self.grads
            .get_mut(var.id)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(var.value().raw_dim()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a 0-d (or single element) node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1, "scalar() on a non-scalar node");
        v.iter().copied().next().unwrap_or(f64::NAN)
    }
}
