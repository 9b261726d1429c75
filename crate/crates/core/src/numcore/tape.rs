use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::{NodeRef, Tensor};
use crate::error::{ensure, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Vector-Jacobian product of one recorded op: receives the gradient of the
/// output and a per-input "needs gradient" mask.
pub(crate) type Vjp<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

enum NodeKind<T: Scalar> {
    Param(ParamId),
    Watched,
    Op { name: &'static str, vjp: Vjp<T> },
}

struct Node<T: Scalar> {
    inputs: Vec<Option<usize>>,
    numel: usize,
    kind: NodeKind<T>,
}

/// Define-by-run reverse-mode tape.
///
/// Ops are recorded only when recording is enabled and at least one input
/// is tracked; a disabled tape runs plain forward math.
pub struct AutodiffTape<T: Scalar> {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of watched (non-parameter) leaves after a backward pass.
pub struct Gradients<T: Scalar> {
    by_node: HashMap<usize, Vec<T>>,
    tape: u64,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.by_node.get(&node.index).map(|v| v.as_slice())
    }
}

impl<T: Scalar> Default for AutodiffTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AutodiffTape<T> {
    pub fn new() -> Self {
        AutodiffTape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that never records; used for inference.
    pub fn no_grad() -> Self {
        AutodiffTape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, inputs: Vec<Option<usize>>, numel: usize, kind: NodeKind<T>) -> NodeRef {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs,
            numel,
            kind,
        });
        NodeRef {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn input_index(&self, t: &Tensor<T>) -> Option<usize> {
        t.node().filter(|n| n.tape == self.id).map(|n| n.index)
    }

    /// Track a tensor as a differentiable leaf (gradient readable from
    /// [`Gradients`]).
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.detach();
        }
        let node = self.push(Vec::new(), t.numel(), NodeKind::Watched);
        Tensor::from_parts(t.shape().to_vec(), Arc::clone(t.data_arc()), Some(node))
    }

    /// Current value of a parameter; tracked only if it is trainable.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        let p = store.get(id);
        if !self.recording || !p.trainable {
            return p.value.detach();
        }
        let node = self.push(Vec::new(), p.value.numel(), NodeKind::Param(id));
        Tensor::from_parts(
            p.value.shape().to_vec(),
            Arc::clone(p.value.data_arc()),
            Some(node),
        )
    }

    /// Record an op output. `vjp` is only kept when some input is tracked.
    pub(crate) fn record(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        vjp: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Tensor<T> {
        let data = Arc::new(data);
        if !self.recording {
            return Tensor::from_parts(shape, data, None);
        }
        let idx: Vec<Option<usize>> = inputs.iter().map(|t| self.input_index(t)).collect();
        if idx.iter().all(Option::is_none) {
            return Tensor::from_parts(shape, data, None);
        }
        let node = self.push(
            idx,
            data.len(),
            NodeKind::Op {
                name,
                vjp: Box::new(vjp),
            },
        );
        Tensor::from_parts(shape, data, Some(node))
    }

    /// Reverse pass from a scalar. Parameter gradients are accumulated into
    /// `store`; gradients of watched leaves are returned.
    pub fn backward(
        &self,
        loss: &Tensor<T>,
        mut store: Option<&mut ParamStore<T>>,
    ) -> Result<Gradients<T>> {
        ensure!(
            loss.numel() == 1,
            "backward",
            "loss must be a scalar, got shape {:?}",
            loss.shape()
        );
        let root = self.input_index(loss).ok_or_else(|| {
            Error::contract("backward", "loss is detached from this tape")
        })?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::ONE]);
        let mut out = Gradients {
            by_node: HashMap::new(),
            tape: self.id,
        };
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            debug_assert_eq!(g.len(), node.numel);
            match &node.kind {
                NodeKind::Param(pid) => {
                    if let Some(store) = store.as_deref_mut() {
                        let p = store.get_mut(*pid);
                        for (a, b) in p.grad.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                }
                NodeKind::Watched => {
                    out.by_node.insert(i, g);
                }
                NodeKind::Op { name, vjp } => {
                    let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let input_grads = vjp(&g, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{name}");
                    for (slot, ig) in node.inputs.iter().zip(input_grads) {
                        let (Some(j), Some(ig)) = (slot, ig) else { continue };
                        match &mut grads[*j] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&ig) {
                                    *a += *b;
                                }
                            }
                            empty => *empty = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
