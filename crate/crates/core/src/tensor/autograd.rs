//! Graph recording and the reverse sweep.
//!
//! Every op output holds an `Rc` to a [`Node`] whose inputs keep the upstream
//! graph alive. Node ids are globally monotonic, so ids already give a valid
//! topological order: the backward tape is the reachable nodes sorted by id,
//! replayed in reverse. Each node is visited exactly once.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Result, Scalar, Tensor, TensorError};

static NODE_COUNTER: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_node_id() -> u64 {
    NODE_COUNTER.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn record_enabled() -> bool {
    RECORDING.with(|r| r.get())
}

/// Run `f` without recording any autograd nodes (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            RECORDING.with(|r| r.set(self.0));
        }
    }
    let prev = RECORDING.with(|r| r.replace(false));
    let _restore = Restore(prev);
    f()
}

/// Vector-Jacobian product of one recorded primitive.
///
/// `grad` is dLoss/dOutput (flat, output-shaped); the return value holds
/// dLoss/dInput for each input, `None` where `needs[i]` is false or the
/// primitive has no gradient for that slot.
pub(crate) trait Backward<T: Scalar> {
    fn backward(&self, grad: &[T], inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

pub(crate) enum NodeKind<T: Scalar> {
    Leaf { grad: RefCell<Vec<T>> },
    Op(Box<dyn Backward<T>>),
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) kind: NodeKind<T>,
}

/// The linearized graph walked by the reverse sweep: nodes reachable from the
/// loss, in topological (id) order.
pub(crate) struct Tape<T: Scalar> {
    nodes: Vec<Rc<Node<T>>>,
}

impl<T: Scalar> Tape<T> {
    fn from_root(root: &Rc<Node<T>>) -> Self {
        let mut seen: HashMap<u64, Rc<Node<T>>> = HashMap::new();
        let mut stack = vec![Rc::clone(root)];
        while let Some(node) = stack.pop() {
            if seen.contains_key(&node.id) {
                continue;
            }
            for input in &node.inputs {
                if let Some(parent) = input.node() {
                    if !seen.contains_key(&parent.id) {
                        stack.push(Rc::clone(parent));
                    }
                }
            }
            seen.insert(node.id, node);
        }
        let mut nodes: Vec<_> = seen.into_values().collect();
        nodes.sort_by_key(|n| n.id);
        Tape { nodes }
    }
}

fn accumulate<T: Scalar>(slot: &mut Vec<T>, contribution: &[T]) {
    debug_assert_eq!(slot.len(), contribution.len());
    for (s, c) in slot.iter_mut().zip(contribution) {
        *s += *c;
    }
}

pub(crate) fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let root = match loss.node() {
        Some(node) => Rc::clone(node),
        // Loss not connected to any graph: nothing to do.
        None => return Ok(()),
    };
    let tape = Tape::from_root(&root);

    // dLoss/dNode, keyed by node id. Dropped entries free their buffers as
    // soon as the owning node has been processed.
    let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
    grads.insert(root.id, vec![T::ONE]);

    for node in tape.nodes.iter().rev() {
        let grad = match grads.remove(&node.id) {
            Some(g) => g,
            None => continue, // no gradient flowed here
        };
        match &node.kind {
            NodeKind::Leaf { grad: slot } => {
                accumulate(&mut slot.borrow_mut(), &grad);
            }
            NodeKind::Op(op) => {
                let needs: Vec<bool> =
                    node.inputs.iter().map(|t| t.node().is_some()).collect();
                let input_grads = op.backward(&grad, &node.inputs, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (input, contribution) in node.inputs.iter().zip(input_grads) {
                    let (Some(parent), Some(contribution)) = (input.node(), contribution) else {
                        continue;
                    };
                    debug_assert_eq!(contribution.len(), input.numel());
                    grads
                        .entry(parent.id)
                        .and_modify(|slot| accumulate(slot, &contribution))
                        .or_insert(contribution);
                }
            }
        }
    }
    Ok(())
}
