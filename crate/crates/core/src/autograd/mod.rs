//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! Every backward rule is itself written in terms of recorded operations, so
//! gradients computed with `create_graph = true` can be differentiated again.
//! This is what gradient matching (gradients of a distance between gradients)
//! and unrolled trajectory matching need.

mod ops;
mod strided;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use ops::{ConvGeometry, ResampleMap};
pub(crate) use ops::Op;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _g = NoGradGuard::new();
    f()
}

pub(crate) struct Node {
    id: u64,
    value: ArrayD<f64>,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
}

impl Drop for Node {
    // Long unrolled graphs would otherwise recurse once per node on drop.
    fn drop(&mut self) {
        let mut stack: Vec<Var> = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// A tensor that participates in the autodiff graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: ArrayD<f64>) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        }))
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: ArrayD<f64>) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: false,
        }))
    }

    pub fn scalar(x: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Var {
        Var::constant(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch"))
    }

    pub(crate) fn from_op(value: ArrayD<f64>, op: Op, parents: Vec<Var>) -> Var {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let (op, parents) = if requires_grad {
            (op, parents)
        } else {
            (Op::Leaf, Vec::new())
        };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op,
            parents,
            requires_grad,
        }))
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.iter().copied().collect()
    }

    fn id(&self) -> u64 {
        self.0.id
    }
}

/// Gradients of `output` (summed if not scalar) with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves differentiable.
/// Inputs that `output` does not depend on get a zero gradient.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    let seed = Var::constant(ArrayD::from_elem(output.value().raw_dim(), 1.0));
    grad_with(output, seed, wrt, create_graph)
}

/// Vector-Jacobian product of `output` against `seed`.
pub fn grad_with(output: &Var, seed: Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    let _guard = if create_graph { None } else { Some(NoGradGuard::new()) };
    let zeros = |v: &Var| Var::constant(ArrayD::zeros(v.value().raw_dim()));

    if !output.requires_grad() {
        return wrt.iter().map(|v| zeros(v)).collect();
    }

    // Everything reachable from the output that carries gradient.
    let mut nodes: Vec<Var> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![output.clone()];
    seen.insert(output.id());
    while let Some(v) = stack.pop() {
        for p in &v.0.parents {
            if p.requires_grad() && seen.insert(p.id()) {
                stack.push(p.clone());
            }
        }
        nodes.push(v);
    }
    // Creation order is a topological order.
    nodes.sort_by_key(|v| v.id());

    // Only nodes that lie on a path to some requested input need gradients.
    let targets: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut relevant: HashSet<u64> = HashSet::new();
    for v in &nodes {
        if targets.contains(&v.id()) || v.0.parents.iter().any(|p| relevant.contains(&p.id())) {
            relevant.insert(v.id());
        }
    }

    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.id(), seed);
    for v in nodes.iter().rev() {
        if v.0.parents.is_empty() || !relevant.contains(&v.id()) {
            continue;
        }
        let g = match grads.get(&v.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        if !targets.contains(&v.id()) {
            grads.remove(&v.id());
        }
        let needs: Vec<bool> = v.0.parents.iter().map(|p| relevant.contains(&p.id())).collect();
        let parent_grads = ops::backward(&v.0.op, &v.0.parents, v, &g, &needs);
        for ((p, pg), need) in v.0.parents.iter().zip(parent_grads).zip(needs) {
            if !need {
                continue;
            }
            let Some(pg) = pg else { continue };
            let entry = grads.remove(&p.id());
            let acc = match entry {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(p.id(), acc);
        }
    }

    wrt.iter()
        .map(|v| grads.get(&v.id()).cloned().unwrap_or_else(|| zeros(v)))
        .collect()
}
