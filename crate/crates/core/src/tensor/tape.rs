//! Reverse-mode tape.
//!
//! Ops append nodes in execution order, so node inputs always precede the
//! node itself and the backward sweep is a single reverse scan that visits
//! each node exactly once. A tape is single-use: running [`Tape::backward`]
//! twice is an error rather than a silent double accumulation.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{Elem, Tensor, TrackedNode};
use crate::error::{Error, Result};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

/// Gradients returned by a backward rule, aligned with the node's inputs.
/// Untracked slots return an empty vec.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>> + Send>;

struct Node<T: Elem> {
    inputs: Vec<Option<NodeId>>,
    out_len: usize,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Elem> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    consumed: bool,
}

impl<T: Elem> Tape<T> {
    /// A recording tape for one forward/backward pass.
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A non-recording tape: ops compute values only. Used for evaluation,
    /// where several tapes may run concurrently over different volumes.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a tensor as a differentiable leaf. Returns a tracked copy
    /// (shared buffer) tied to this tape.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.clone().with_node(None);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { inputs: Vec::new(), out_len: t.len(), backward: None });
        t.clone().with_node(Some(TrackedNode { tape: self.id, node: id }))
    }

    /// Validates that tracked inputs belong to this tape and returns their
    /// node ids (None for untracked inputs).
    pub(crate) fn input_nodes(&self, inputs: &[&Tensor<T>]) -> Result<Vec<Option<NodeId>>> {
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            match t.tracked() {
                Some(tn) if tn.tape != self.id => {
                    return Err(Error::Argument(
                        "tensor is tracked on a different tape".into(),
                    ));
                }
                Some(tn) => ids.push(Some(tn.node)),
                None => ids.push(None),
            }
        }
        Ok(ids)
    }

    /// Record an op node. `inputs` must come from [`Tape::input_nodes`];
    /// the backward rule receives dL/d(output) and returns per-input grads.
    pub(crate) fn record(
        &mut self,
        inputs: Vec<Option<NodeId>>,
        out_len: usize,
        backward: BackwardFn<T>,
    ) -> Option<TrackedNode> {
        if !self.recording || inputs.iter().all(|i| i.is_none()) {
            return None;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { inputs, out_len, backward: Some(backward) });
        Some(TrackedNode { tape: self.id, node: id })
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate for every leaf;
    /// query them with [`Tape::grad`]. Consumes the tape's single backward
    /// budget.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if loss.len() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, shape is {:?}",
                loss.shape()
            )));
        }
        let root = match loss.tracked() {
            Some(tn) if tn.tape == self.id => tn.node,
            Some(_) => {
                return Err(Error::Argument("loss is tracked on a different tape".into()))
            }
            None => return Err(Error::Argument("loss is not tracked on this tape".into())),
        };
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if node.backward.is_none() {
                continue; // leaf: keep the accumulated gradient
            }
            // Intermediate grads are consumed here; earlier nodes never read them.
            let Some(gout) = self.grads[id].take() else { continue };
            let node = &self.nodes[id];
            let per_input = (node.backward.as_ref().unwrap())(&gout);
            debug_assert_eq!(per_input.len(), node.inputs.len());
            let slots: Vec<Option<NodeId>> = node.inputs.clone();
            for (slot, g) in slots.into_iter().zip(per_input) {
                let Some(nid) = slot else { continue };
                if g.is_empty() {
                    continue;
                }
                self.accumulate(nid, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.nodes[id.0].out_len, "gradient length mismatch");
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a = *a + *v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulated gradient of a tracked tensor after backward. `None` if no
    /// gradient flowed to it (or it is untracked).
    pub fn grad(&self, t: &Tensor<T>) -> Option<&[T]> {
        let tn = t.tracked()?;
        if tn.tape != self.id {
            return None;
        }
        self.grads.get(tn.node.0)?.as_deref()
    }

    /// Gradient of a leaf as a tensor shaped like `t`, zeros if none flowed.
    pub fn grad_tensor(&self, t: &Tensor<T>) -> Tensor<T> {
        match self.grad(t) {
            Some(g) => Tensor::from_parts(t.shape().to_vec(), g.to_vec(), None),
            None => Tensor::zeros(t.shape()),
        }
    }
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&Tensor::from_vec(&[3], vec![2.0, -1.0, 0.5]).unwrap());
        let s = tape.sum(&w);
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_sum_is_identity() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.25]).unwrap());
        let sq = tape.mul(&w, &w).unwrap();
        let s = tape.sum(&sq);
        let half = tape.affine(&s, 0.5, 0.0);
        tape.backward(&half).unwrap();
        assert_eq!(tape.grad(&w).unwrap(), w.data());
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(&Tensor::scalar(3.0));
        let y = tape.mul(&w, &w).unwrap();
        tape.backward(&y).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(&w), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_tape_tensor_rejected() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let w = a.leaf(&Tensor::scalar(1.0));
        assert!(b.mul(&w, &w).is_err());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::<f32>::inference();
        let w = tape.leaf(&Tensor::scalar(2.0));
        let y = tape.mul(&w, &w).unwrap();
        assert!(!y.is_tracked());
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn gradient_accumulates_over_reused_input() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let xx = tape.mul(&x, &x).unwrap();
        let y = tape.add(&xx, &x).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[7.0]);
    }
}
