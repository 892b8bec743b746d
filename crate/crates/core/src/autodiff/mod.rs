//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`]s during a forward
//! pass. [`Var::backward`] walks the records in reverse and returns the
//! gradient of a scalar loss with respect to every recorded node. Parameters
//! enter the tape through [`Tape::param`] and their gradients are collected
//! into a [`GradientSet`] keyed by [`ParamId`].
//!
//! Operations accept an optional leading batch axis so that a whole
//! mini-batch goes through one matrix product per layer.

mod conv;
mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::tensor::{check_finite, Result, Tensor, TensorError};

pub use gradcheck::{grad_check, relative_error};
pub use ops::Activation;

pub(crate) use ops::{sigmoid_scalar, softmax_in_place};

/// Stable identity of a model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

pub(crate) struct Node {
    value: Tensor,
    op: ops::Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only record of a forward computation.
///
/// Confined to one thread; a new tape is built for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), ops::Op::Leaf, true, None)
    }

    /// An input that needs no gradient (data, labels, fixed masks).
    pub fn constant(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), ops::Op::Leaf, false, None)
    }

    /// A trainable parameter; its gradient is reported under `id`.
    pub fn param(&self, id: ParamId, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), ops::Op::Leaf, true, Some(id))
    }

    fn push(
        &self,
        value: Tensor,
        op: ops::Op,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(op.parents().iter().all(|&p| p < nodes.len()));
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of a primitive. Non-finite outputs are rejected.
    pub(crate) fn record(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: ops::Op,
    ) -> Result<Var<'_>> {
        check_finite(name, &data)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(Tensor::from_raw(shape, data), op, requires_grad, None))
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }

    /// Reverse sweep from a single-element loss.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let loss = &nodes[self.id];
        if loss.value.len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: format!("loss must be scalar, got shape {:?}", loss.value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                ops::backprop(&nodes, id, &upstream, &mut grads)?;
            }
            grads[id] = Some(upstream);
        }

        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        let mut by_node = Vec::with_capacity(grads.len());
        for (id, g) in grads.into_iter().enumerate() {
            let node = &nodes[id];
            let tensor = match g {
                Some(g) if node.requires_grad => {
                    check_finite("backward", &g)?;
                    Some(Tensor::from_raw(node.value.shape().to_vec(), g))
                }
                _ => None,
            };
            if let Some(pid) = node.param {
                let g = tensor
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match params.get_mut(&pid) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        params.insert(pid, g);
                    }
                }
            }
            by_node.push(tensor);
        }
        // parameters recorded after the loss node never reach it
        for node in nodes.iter().skip(self.id + 1) {
            if let Some(pid) = node.param {
                params
                    .entry(pid)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            by_node,
            params: GradientSet { grads: params },
        })
    }
}

/// Result of one backward sweep.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: GradientSet,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, zero when unreachable.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.by_node
            .get(var.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn params(&self) -> &GradientSet {
        &self.params
    }

    pub fn into_params(self) -> GradientSet {
        self.params
    }
}

/// Parameter gradients keyed by parameter identity. Every gradient has the
/// shape of its parameter.
#[derive(Debug, Clone, Default)]
pub struct GradientSet {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}
