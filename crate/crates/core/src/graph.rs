//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is created per forward pass. Operations on [`Var`]s append a
//! node to the tape when recording is enabled and at least one operand is
//! tracked; otherwise the result is a plain value and intermediates are freed
//! as soon as they go out of scope. [`Graph::backward`] walks the tape in
//! reverse and returns the gradients of the tracked leaves.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm, running statistics are updated.
    Train,
    /// Running statistics in batch-norm.
    Eval,
}

/// A value in a computation, optionally tracked on the tape.
#[derive(Clone)]
pub struct Var<T: Real = f32> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn arc(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, node={:?})", self.value, self.node)
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

enum Leaf {
    Op,
    Param(ParamId),
    Input,
}

struct Node<T: Real> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    leaf: Leaf,
}

pub struct Graph<'s, T: Real = f32> {
    store: &'s ParamStore<T>,
    mode: Mode,
    recording: bool,
    tape: RefCell<Vec<Node<T>>>,
    stat_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'s, T: Real> Graph<'s, T> {
    /// A recording graph.
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self::with_recording(store, mode, true)
    }

    /// A non-recording graph in eval mode.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::with_recording(store, Mode::Eval, false)
    }

    pub fn with_recording(store: &'s ParamStore<T>, mode: Mode, recording: bool) -> Self {
        Graph {
            store,
            mode,
            recording,
            tape: RefCell::new(Vec::new()),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn tape_len(&self) -> usize {
        self.tape.borrow().len()
    }

    fn push_leaf(&self, leaf: Leaf) -> usize {
        let mut tape = self.tape.borrow_mut();
        tape.push(Node { parents: Vec::new(), backward: None, leaf });
        tape.len() - 1
    }

    /// The current value of a stored parameter. Trainable parameters are
    /// tracked when the graph records.
    pub fn param(&self, id: ParamId) -> Var<T> {
        let value = self.store.value_arc(id);
        let node = (self.recording && self.store.get(id).trainable()).then(|| self.push_leaf(Leaf::Param(id)));
        Var { value, node }
    }

    /// A tracked input whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var<T> {
        let node = self.recording.then(|| self.push_leaf(Leaf::Input));
        Var { value: Arc::new(value), node }
    }

    /// An untracked value.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value: Arc::new(value), node: None }
    }

    pub fn detach(&self, v: &Var<T>) -> Var<T> {
        Var { value: v.arc(), node: None }
    }

    /// Appends an operation. `backward` receives the output gradient and a mask
    /// of which parents need a gradient, and returns one entry per parent.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let tracked = self.recording && parents.iter().any(|p| p.node.is_some());
        if !tracked {
            return Var { value: Arc::new(value), node: None };
        }
        let mut tape = self.tape.borrow_mut();
        tape.push(Node {
            parents: parents.iter().map(|p| p.node).collect(),
            backward: Some(Box::new(backward)),
            leaf: Leaf::Op,
        });
        Var { value: Arc::new(value), node: Some(tape.len() - 1) }
    }

    pub(crate) fn push_stat_update(&self, id: ParamId, value: Tensor<T>) {
        if self.mode == Mode::Train {
            self.stat_updates.borrow_mut().push((id, value));
        }
    }

    /// Running-statistic updates produced by train-mode batch-norm, in the
    /// order they were computed.
    pub fn take_stat_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must have one element, got {:?}", loss.shape()),
            });
        }
        let mut out = Gradients { params: BTreeMap::new(), inputs: HashMap::new() };
        let Some(root) = loss.node else {
            return Ok(out);
        };
        let tape = self.tape.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &tape[i];
            match node.leaf {
                Leaf::Param(id) => match out.params.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(id, g);
                    }
                },
                Leaf::Input => {
                    out.inputs.insert(i, g);
                }
                Leaf::Op => {
                    let backward = node.backward.as_ref().expect("op node without backward");
                    let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                    let parent_grads = backward(&g, &needs);
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        if let (Some(p), Some(pg)) = (parent, pg) {
                            match &mut grads[*p] {
                                Some(acc) => acc.add_assign(&pg),
                                slot => *slot = Some(pg),
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Gradients of tracked leaves after a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    params: BTreeMap<ParamId, Tensor<T>>,
    inputs: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }

    /// Gradient of a tracked input created with [`Graph::input`].
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.node.and_then(|n| self.inputs.get(&n))
    }
}
