//! Reverse-mode differentiation tape.
//!
//! Every op that sees at least one tracked input appends a node holding its
//! backward rule. Nodes are appended in evaluation order, so the node list is
//! already a topological order of the graph and [`Tape::backward`] simply
//! walks it in reverse, visiting each node once.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{GradId, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T> {
    len: usize,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Recording context for one forward pass.
///
/// A tape built with [`Tape::inference`] records nothing; ops then run as
/// plain kernels and return untracked tensors.
pub struct Tape<T> {
    id: usize,
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

/// Write access to the gradient buffers of an op's inputs during backward.
pub struct GradSink<'a, T> {
    parents: &'a [Option<usize>],
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Real> GradSink<'a, T> {
    /// Whether input `slot` needs a gradient at all.
    pub fn wants(&self, slot: usize) -> bool {
        self.parents.get(slot).copied().flatten().is_some()
    }

    /// Zero-initialized (on first use) accumulation buffer for input `slot`.
    pub fn slot(&mut self, slot: usize) -> Option<&mut [T]> {
        let node = self.parents.get(slot).copied().flatten()?;
        let len = self.nodes[node].len;
        let buf = self.grads[node].get_or_insert_with(|| vec![T::zero(); len]);
        Some(buf.as_mut_slice())
    }

    /// Accumulates `g` into the gradient of input `slot`.
    pub fn add(&mut self, slot: usize, g: &[T]) {
        let Some(node) = self.parents.get(slot).copied().flatten() else {
            return;
        };
        debug_assert_eq!(self.nodes[node].len, g.len());
        match &mut self.grads[node] {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            empty => *empty = Some(g.to_vec()),
        }
    }

    /// Like [`add`](Self::add), but moves `g` in when the slot is still empty.
    pub fn add_owned(&mut self, slot: usize, g: Vec<T>) {
        let Some(node) = self.parents.get(slot).copied().flatten() else {
            return;
        };
        debug_assert_eq!(self.nodes[node].len, g.len());
        match &mut self.grads[node] {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(&g) {
                    *b += x;
                }
            }
            empty => *empty = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: usize,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a tracked tensor, `None` when no path reached it.
    pub fn get(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let id = t.grad_id()?;
        if id.tape != self.tape {
            return None;
        }
        let g = self.grads.get(id.node)?.as_ref()?;
        Some(Tensor::from_parts(t.dims().to_vec(), g.clone()))
    }

    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.dims()))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that never records.
    pub fn inference() -> Self {
        Self {
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

    /// Registers `t` as a differentiable leaf.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.detach();
        }
        let mut nodes = self.nodes.borrow_mut();
        let node = nodes.len();
        nodes.push(Node {
            len: t.numel(),
            parents: Vec::new(),
            backward: None,
        });
        t.detach().with_grad(Some(GradId {
            tape: self.id,
            node,
        }))
    }

    fn parent_of(&self, t: &Tensor<T>) -> Result<Option<usize>> {
        match t.grad_id() {
            None => Ok(None),
            Some(id) if id.tape == self.id => Ok(Some(id.node)),
            Some(id) => Err(Error::Tape(format!(
                "tensor belongs to tape {} but was used on tape {}",
                id.tape, self.id
            ))),
        }
    }

    /// True when an op over `inputs` must record a backward rule.
    pub fn needs_grad(&self, inputs: &[&Tensor<T>]) -> bool {
        self.recording && inputs.iter().any(|t| t.is_tracked())
    }

    /// Wraps a freshly computed output, recording `backward` when any input
    /// is tracked. Slot `i` of the sink refers to `inputs[i]`.
    pub fn record<F>(
        &self,
        dims: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: F,
    ) -> Result<Tensor<T>>
    where
        F: Fn(&[T], &mut GradSink<'_, T>) + 'static,
    {
        let out = Tensor::from_parts(dims, data);
        if !self.needs_grad(inputs) {
            return Ok(out);
        }
        let parents = inputs
            .iter()
            .map(|t| self.parent_of(t))
            .collect::<Result<Vec<_>>>()?;
        let mut nodes = self.nodes.borrow_mut();
        let node = nodes.len();
        nodes.push(Node {
            len: out.numel(),
            parents,
            backward: Some(Box::new(backward)),
        });
        Ok(out.with_grad(Some(GradId {
            tape: self.id,
            node,
        })))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                loss.dims()
            )));
        }
        let root = self
            .parent_of(loss)?
            .ok_or_else(|| Error::Usage("loss is not tracked on this tape".into()))?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let node = &nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink {
                parents: &node.parents,
                nodes: &nodes,
                grads: &mut grads,
            };
            bw(&g, &mut sink);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::ones(&[3]));
        assert!(matches!(tape.backward(&x), Err(Error::Usage(_))));
    }

    #[test]
    fn foreign_tape_is_rejected() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let x = a.leaf(&Tensor::ones(&[2]));
        assert!(matches!(b.sum(&x), Err(Error::Tape(_))));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(&Tensor::ones(&[4]));
        let y = tape.mul(&x, &x).unwrap();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }
}
