//! The recording tape, variables and reverse-mode gradient propagation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Backward closure: receives the gradient of the node output and a mask of
/// which parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records operations so gradients can be propagated back through them.
///
/// A tape is built per forward pass and dropped afterwards. Parameters are
/// bound as named leaves so their gradients can be collected by name.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
    param_index: RefCell<HashMap<String, usize>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            param_index: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records gradients; every leaf is a constant.
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
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A leaf that carries no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(Node {
            value: Rc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// An anonymous leaf that requires a gradient (e.g. an input probe).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(Node {
            value: Rc::new(value),
            requires_grad: self.grad_enabled,
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Binds a named trainable parameter. Binding the same name twice
    /// returns the same leaf.
    pub fn param(&self, name: &str, value: &Tensor) -> Var<'_> {
        if !self.grad_enabled {
            return self.constant(value.clone());
        }
        if let Some(&id) = self.param_index.borrow().get(name) {
            return Var { tape: self, id };
        }
        let v = self.leaf(value.clone());
        self.params.borrow_mut().push((name.to_string(), v.id));
        self.param_index.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    /// Records an op result. `backward` is dropped when no parent needs a
    /// gradient.
    pub(crate) fn push_op<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: BackwardFn,
    ) -> Var<'t> {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        let node = if requires_grad {
            Node {
                value: Rc::new(value),
                requires_grad,
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(backward),
            }
        } else {
            Node {
                value: Rc::new(value),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }
        };
        let id = self.push_node(node);
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode pass from `root`, seeded with `seed` (defaults to ones).
    fn backward_from(&self, root: usize, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        assert_eq!(
            seed.shape(),
            nodes[root].value.shape(),
            "backward seed shape mismatch"
        );
        if nodes[root].requires_grad {
            grads[root] = Some(seed);
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let contribs = bw(&g, &needs);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for ((&p, c), need) in node.parents.iter().zip(contribs).zip(&needs) {
                    let Some(c) = c else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(c.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        Gradients {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

/// Gradients produced by a backward pass. Only leaves retain values.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    /// Gradients of bound parameters by name, in binding order. Parameters
    /// that received no gradient are skipped.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.grads[*id].as_ref().map(|g| (name.as_str(), g)))
    }

    /// Consumes the gradients, returning named parameter gradients.
    pub fn into_params(mut self) -> Vec<(String, Tensor)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, id)| self.grads[id].take().map(|g| (name, g)))
            .collect()
    }
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    /// Backpropagates from a scalar.
    pub fn backward(&self) -> Gradients {
        let shape = self.shape();
        assert!(
            shape.iter().product::<usize>() == 1,
            "backward() needs a scalar, got {shape:?}"
        );
        self.tape.backward_from(self.id, Tensor::ones(&shape))
    }

    /// Backpropagates with an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor) -> Gradients {
        self.tape.backward_from(self.id, seed)
    }
}
