//! Dense `f32` tensors with a reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a cheap, clonable handle. Operations that receive at least
//! one input with `requires_grad` record a node pointing back at their inputs;
//! [`Tensor::backward`] walks those nodes in reverse topological order and
//! accumulates (`+=`) gradients into every reachable tensor that requires them.
//!
//! Graphs are freed by `backward` unless [`BackwardOptions::retain_graph`] is
//! set. Running `backward` again from a loss whose graph was freed is an error.
//!
//! Layout is row-major. Image tensors are `[batch, channels, height, width]`;
//! convolution weights are `[out, in, kh, kw]` (depthwise: `[channels, 1, kh, kw]`).

mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};
use thiserror::Error;

pub use ops::{forward_op, BatchStats, OpAttrs, OpKind, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("{op}: {msg}")]
    InvalidAttr { op: &'static str, msg: String },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already freed by a previous backward; pass retain_graph to backprop twice")]
    GraphFreed,
    #[error("backward called on a tensor that does not require grad")]
    NoGrad,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("{op}: target must not require grad (detach it first)")]
    TargetRequiresGrad { op: &'static str },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node {
    op: ops::Op,
    inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f32>>,
    grad: Mutex<Option<Vec<f32>>>,
    requires_grad: bool,
    name: Option<String>,
    node: Mutex<Option<Arc<Node>>>,
    freed: AtomicBool,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    pub retain_graph: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("name", &self.0.name)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("has_graph", &self.has_graph())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, name: Option<String>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            name,
            node: Mutex::new(None),
            freed: AtomicBool::new(false),
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if numel(shape) != data.len() || shape.contains(&0) {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Named leaf that accumulates gradients.
    pub fn parameter(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        let inner = Arc::try_unwrap(t.0).ok().expect("fresh tensor is unique");
        Ok(Tensor(Arc::new(Inner {
            requires_grad: true,
            name: Some(name.into()),
            ..inner
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn scalar(v: f32) -> Self {
        Self::build(vec![1], vec![v], false, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, op: ops::Op, inputs: Vec<Tensor>) -> Self {
        let track = grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        let t = Self::build(shape, data, track, None);
        if track {
            *t.0.node.lock() = Some(Arc::new(Node { op, inputs }));
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn has_graph(&self) -> bool {
        self.0.node.lock().is_some()
    }

    /// True when the tensor carries no graph and asks for no gradient.
    pub fn is_detached(&self) -> bool {
        !self.0.requires_grad && !self.has_graph()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f32>> {
        self.0.data.read()
    }

    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f32>> {
        self.0.data.write()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.read().clone()
    }

    pub fn item(&self) -> f32 {
        self.0.data.read()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    pub fn same(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Copy of the values with no graph and no gradient.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    pub fn backward(&self) -> Result<()> {
        self.backward_with(BackwardOptions::default())
    }

    pub fn backward_with(&self, opts: BackwardOptions) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.0.shape.clone()));
        }
        if self.0.freed.load(Ordering::Acquire) {
            return Err(TensorError::GraphFreed);
        }
        if !self.0.requires_grad {
            return Err(TensorError::NoGrad);
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);

        for t in order.iter().rev() {
            let Some(gout) = pending.remove(&t.0.id) else {
                continue;
            };
            let node = t.0.node.lock().clone();
            if let Some(node) = node {
                let out = t.0.data.read();
                let input_grads = ops::backward(&node.op, &node.inputs, &out, &gout);
                drop(out);
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    match pending.get_mut(&input.0.id) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(input.0.id, g);
                        }
                    }
                }
                if !opts.retain_graph {
                    *t.0.node.lock() = None;
                    t.0.freed.store(true, Ordering::Release);
                }
            }
            let mut grad = t.0.grad.lock();
            match grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                None => *grad = Some(gout),
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.0.id) {
                continue;
            }
            let node = t.0.node.lock().clone();
            stack.push((t, true));
            if let Some(node) = node {
                for input in &node.inputs {
                    if input.requires_grad() && !seen.contains(&input.0.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Plain SGD with momentum and L2 weight decay.
///
/// Update: `v <- momentum * v + (g + weight_decay * w)`, `w <- w - lr * v`.
#[derive(Debug, Default, Clone)]
pub struct Sgd {
    buffers: HashMap<u64, Vec<f32>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, params: &[Tensor], lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
        // check everything first so a failure leaves all params untouched
        for p in params {
            if p.0.grad.lock().is_none() {
                return Err(TensorError::MissingGrad(p.name().unwrap_or("<unnamed>").to_string()));
            }
        }
        for p in params {
            let grad = p.0.grad.lock();
            let grad = grad.as_ref().expect("checked above");
            let mut w = p.0.data.write();
            let buf = self.buffers.entry(p.0.id).or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), gi) in w.iter_mut().zip(buf.iter_mut()).zip(grad) {
                let g = gi + weight_decay * *wi;
                *vi = momentum * *vi + g;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Sgd::step`] for callers that own the momentum state.
pub fn sgd_step(opt: &mut Sgd, params: &[Tensor], lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
    opt.step(params, lr, momentum, weight_decay)
}
