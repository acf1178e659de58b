//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every backward rule is itself written with tape operations. Running the
//! backward sweep with graph construction enabled therefore records the
//! gradient computation as ordinary nodes, which can be differentiated again.
//! This is what makes input-gradient penalties trainable.
//!
//! Nodes are appended in creation order, so the tape is topologically sorted
//! by construction and a reverse scan is a valid backward schedule.

mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) use ops::Op;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Produced by an operation.
    Interior,
    /// Input data; never receives a gradient.
    Constant,
    /// Differentiable input that is not a trainable parameter.
    Variable,
    /// Trainable parameter.
    Parameter,
}

pub(crate) struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    kind: LeafKind,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Recording context shared by all [`Var`]s created from it.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Tape`].
pub struct Var<T: Scalar> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                recording: true,
            })),
        }
    }

    fn leaf(&self, value: Tensor<T>, kind: LeafKind) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: matches!(kind, LeafKind::Variable | LeafKind::Parameter),
            kind,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, LeafKind::Constant)
    }

    /// Differentiable input (for example the interpolated samples of a
    /// gradient penalty).
    pub fn variable(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, LeafKind::Variable)
    }

    pub fn parameter(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, LeafKind::Parameter)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Runs `f` without recording gradient structure. Values are still
    /// computed; every node created inside is a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = std::mem::replace(&mut self.inner.borrow_mut().recording, false);
        let out = f();
        self.inner.borrow_mut().recording = prev;
        out
    }

    pub(crate) fn push(&self, op: Op<T>, parents: &[&Var<T>], value: Tensor<T>) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let requires_grad =
            inner.recording && parents.iter().any(|p| inner.nodes[p.id].requires_grad);
        let id = inner.nodes.len();
        let node = if requires_grad {
            Node {
                value: Rc::new(value),
                op,
                parents: parents.iter().map(|p| p.id).collect(),
                requires_grad: true,
                kind: LeafKind::Interior,
            }
        } else {
            Node {
                value: Rc::new(value),
                op: Op::Leaf,
                parents: Vec::new(),
                requires_grad: false,
                kind: LeafKind::Interior,
            }
        };
        inner.nodes.push(node);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Ids of parameter leaves from which `root` is reachable.
    pub fn parameter_ancestors(&self, root: &Var<T>) -> Vec<usize> {
        let inner = self.inner.borrow();
        let mut seen = vec![false; root.id + 1];
        let mut stack = vec![root.id];
        let mut found = Vec::new();
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                continue;
            }
            let node = &inner.nodes[id];
            if node.kind == LeafKind::Parameter {
                found.push(id);
            }
            stack.extend(node.parents.iter().copied());
        }
        found.sort_unstable();
        found
    }

    /// Number of parameter leaves on the tape.
    pub fn parameter_count(&self) -> usize {
        self.inner
            .borrow()
            .nodes
            .iter()
            .filter(|n| n.kind == LeafKind::Parameter)
            .count()
    }

    /// Core reverse sweep. Returns the accumulated gradient node for every
    /// node id up to `root` that lies on a path from a target to `root`.
    fn sweep(
        &self,
        root: &Var<T>,
        seed: Tensor<T>,
        targets: Option<&[usize]>,
        create_graph: bool,
    ) -> Result<Vec<Option<Var<T>>>> {
        let n = root.id + 1;
        // Mark nodes that depend on a target (or on anything trainable).
        let relevant: Vec<bool> = {
            let inner = self.inner.borrow();
            let mut rel = vec![false; n];
            for id in 0..n {
                let node = &inner.nodes[id];
                if !node.requires_grad {
                    continue;
                }
                rel[id] = match targets {
                    Some(t) => t.contains(&id) || node.parents.iter().any(|&p| rel[p]),
                    None => true,
                };
            }
            rel
        };
        if !relevant[root.id] {
            return Ok(vec![None; n]);
        }

        let prev = std::mem::replace(&mut self.inner.borrow_mut().recording, create_graph);
        let result = (|| {
            let mut grads: Vec<Option<Var<T>>> = vec![None; n];
            grads[root.id] = Some(self.constant(seed));
            for id in (0..n).rev() {
                if !relevant[id] {
                    continue;
                }
                let Some(g) = grads[id].clone() else { continue };
                let (op, parent_ids) = {
                    let inner = self.inner.borrow();
                    let node = &inner.nodes[id];
                    if node.parents.is_empty() {
                        continue;
                    }
                    (node.op.clone(), node.parents.clone())
                };
                let parents: Vec<Var<T>> = parent_ids
                    .iter()
                    .map(|&p| Var {
                        tape: self.clone(),
                        id: p,
                    })
                    .collect();
                let wanted: Vec<bool> = parent_ids.iter().map(|&p| relevant[p]).collect();
                let out = Var {
                    tape: self.clone(),
                    id,
                };
                let pgrads = op.backward(&parents, &out, &g, &wanted)?;
                for ((pid, pg), want) in parent_ids.iter().zip(pgrads).zip(&wanted) {
                    let Some(pg) = pg else { continue };
                    if !want {
                        continue;
                    }
                    grads[*pid] = Some(match grads[*pid].take() {
                        Some(acc) => acc.add(&pg)?,
                        None => pg,
                    });
                }
            }
            Ok(grads)
        })();
        self.inner.borrow_mut().recording = prev;
        result
    }

    /// Gradient of a scalar loss with respect to every trainable leaf.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        loss.check_tape(self)?;
        let shape = loss.shape();
        if !shape.is_empty() && shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mark = self.len();
        let seed = Tensor::ones(&shape);
        let grads = self.sweep(loss, seed, None, false)?;
        let mut by_id = HashMap::new();
        {
            let inner = self.inner.borrow();
            for (id, g) in grads.iter().enumerate() {
                let Some(g) = g else { continue };
                if matches!(inner.nodes[id].kind, LeafKind::Parameter | LeafKind::Variable) {
                    by_id.insert(id, Rc::clone(&inner.nodes[g.id].value));
                }
            }
        }
        drop(grads);
        // Gradient nodes built without graph recording are plain constants
        // nobody else references.
        self.inner.borrow_mut().nodes.truncate(mark);
        Ok(Gradients { by_id })
    }

    /// Differentiable gradient of `sum(output)` with respect to `wrt`.
    ///
    /// For a per-sample output `[N,1]` whose samples do not interact this is
    /// the stack of per-sample input gradients. The returned node is recorded
    /// on the tape, so losses built from it can be backpropagated again.
    pub fn input_gradient(&self, output: &Var<T>, wrt: &Var<T>) -> Result<Var<T>> {
        output.check_tape(self)?;
        wrt.check_tape(self)?;
        if wrt.id > output.id || !self.inner.borrow().nodes[wrt.id].requires_grad {
            return Err(Error::NotOnPath);
        }
        let seed = Tensor::ones(&output.shape());
        let mut grads = self.sweep(output, seed, Some(&[wrt.id]), true)?;
        grads[wrt.id].take().ok_or(Error::NotOnPath)
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    by_id: HashMap<usize, Rc<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; leaves the loss does not depend on get zeros.
    pub fn get(&self, var: &Var<T>) -> Tensor<T> {
        match self.by_id.get(&var.id) {
            Some(g) => (**g).clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn contains(&self, var: &Var<T>) -> bool {
        self.by_id.contains_key(&var.id)
    }
}

impl<T: Scalar> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn kind(&self) -> LeafKind {
        self.tape.inner.borrow().nodes[self.id].kind
    }

    /// Constant copy of this value, cut from the gradient graph.
    pub fn detach(&self) -> Var<T> {
        self.tape.constant((*self.value()).clone())
    }

    /// Differentiable leaf holding a copy of this value.
    pub fn detach_as_variable(&self) -> Var<T> {
        self.tape.variable((*self.value()).clone())
    }

    fn check_tape(&self, tape: &Tape<T>) -> Result<()> {
        if self.tape.same_as(tape) {
            Ok(())
        } else {
            Err(Error::invalid("tape", "value belongs to a different tape"))
        }
    }

    pub(crate) fn same_tape(&self, other: &Var<T>) -> Result<()> {
        other.check_tape(&self.tape)
    }
}
