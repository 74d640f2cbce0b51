use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use super::{conv, elementwise, linalg, nn, reduce, resample, structural, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Recorded operation and the node ids it consumed.
#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    ClampMin(usize, T),
    Log(usize),
    Exp(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    MatMul(usize, usize),
    Softmax(usize, usize),
    LayerNorm(usize, T),
    Reduce {
        input: usize,
        kind: reduce::ReduceKind,
        axes: Vec<usize>,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        input: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Conv2d {
        input: usize,
        weight: usize,
    },
    Resample(usize),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. A tape supports exactly one backward pass; call
/// [`Tape::reset`] to reuse it.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears every recorded node and makes the tape live again.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        if self.consumed.get() {
            return Err(Error::StaleTape);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf receives a gradient (zeros when the loss
    /// does not depend on it). The tape is consumed afterwards.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::invalid("loss belongs to a different tape"));
        }
        if self.consumed.get() {
            return Err(Error::StaleTape);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                leaves.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            let mut sink = GradSink { nodes: &nodes, grads: &mut grads };
            backward_node(&nodes, id, &g, &mut sink);
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves.entry(id).or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Accumulates gradient contributions into input nodes.
pub(crate) struct GradSink<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Mutable gradient buffer of node `id`, or `None` when it needs none.
    pub fn slot(&mut self, id: usize) -> Option<&mut Vec<T>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); n]))
    }

    /// Adds `contribution` elementwise into node `id`.
    pub fn add(&mut self, id: usize, contribution: &[T]) {
        if let Some(slot) = self.slot(id) {
            for (s, &c) in slot.iter_mut().zip(contribution) {
                *s += c;
            }
        }
    }

    /// Like [`GradSink::add`] but moves the buffer in when the slot is empty.
    pub fn add_owned(&mut self, id: usize, contribution: Vec<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(slot) => {
                for (s, c) in slot.iter_mut().zip(contribution) {
                    *s += c;
                }
            }
            empty => *empty = Some(contribution),
        }
    }
}

fn backward_node<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], sink: &mut GradSink<'_, T>) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            elementwise::backward_binary(&node.op, &nodes[*a].value, &nodes[*b].value, out, g, *a, *b, sink)
        }
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::ClampMin(a, _)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Abs(a)
        | Op::Square(a) => elementwise::backward_unary(&node.op, &nodes[*a].value, out, g, *a, sink),
        Op::MatMul(a, b) => linalg::backward_matmul(&nodes[*a].value, &nodes[*b].value, g, *a, *b, sink),
        Op::Softmax(a, axis) => nn::backward_softmax(out, *axis, g, *a, sink),
        Op::LayerNorm(a, eps) => nn::backward_layer_norm(&nodes[*a].value, out, *eps, g, *a, sink),
        Op::Reduce { input, kind, axes } => {
            reduce::backward_reduce(&nodes[*input].value, *kind, axes, g, *input, sink)
        }
        Op::Reshape(a) => sink.add(*a, g),
        Op::Permute(a, perm) => structural::backward_permute(out.shape(), perm, g, *a, sink),
        Op::Concat(inputs, axis) => structural::backward_concat(nodes, inputs, *axis, out, g, sink),
        Op::Narrow { input, axis, start } => {
            structural::backward_narrow(&nodes[*input].value, *axis, *start, out, g, *input, sink)
        }
        Op::IndexSelect { input, axis, indices } => {
            structural::backward_index_select(&nodes[*input].value, *axis, indices, g, *input, sink)
        }
        Op::Conv2d { input, weight } => {
            conv::backward_conv2d(&nodes[*input].value, &nodes[*weight].value, g, *input, *weight, sink)
        }
        Op::Resample(a) => resample::backward_resample(&nodes[*a].value, out, g, *a, sink),
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Value of a one-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("vars recorded on different tapes"))
        }
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.leaves.remove(&var.id)
    }
}
