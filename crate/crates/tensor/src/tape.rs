use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

/// Maps the output gradient of a node to one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in recording order, which is a valid topological
/// order: every node's parents were recorded before it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
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

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.leaves.get(var.id).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf holding a copy of `tensor`; differentiable iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(Node {
            shape: tensor.shape().to_vec(),
            value: Rc::new(tensor.data().to_vec()),
            requires_grad: tensor.requires_grad,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        if numel(shape) != data.len() {
            return Err(TensorError::Parameter(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(Node {
            shape: shape.to_vec(),
            value: Rc::new(data),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Differentiable leaf built from raw values.
    pub fn variable(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?.with_requires_grad(true);
        Ok(self.leaf(&t))
    }

    /// Records an operation. `backward` is dropped when no parent needs a
    /// gradient, so inference-only graphs carry no closures.
    pub fn record<'t>(
        &'t self,
        parents: &[Var<'t>],
        shape: Vec<usize>,
        value: Vec<f64>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var<'t> {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        self.push(Node {
            shape,
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        })
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Each node is visited once, in reverse recording order; gradients
    /// arriving through several consumers are summed before the node's own
    /// rule runs. Higher-order derivatives are not supported.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { leaves });
        }
        pending[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(rule) = &node.backward else {
                leaves[id] = Some(g);
                continue;
            };
            let parent_grads = rule(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.len());
                match &mut pending[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Shared handle to the forward value, suitable for capture in backward rules.
    pub fn value(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        Tensor::new(&node.shape, node.value.as_ref().clone()).expect("node shape is consistent")
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    /// Copy of this value with no gradient path.
    pub fn detach(&self) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            (node.shape.clone(), Rc::clone(&node.value))
        };
        self.tape.push(Node {
            shape,
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }
}
