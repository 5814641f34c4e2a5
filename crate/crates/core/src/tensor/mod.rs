//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Every op eagerly computes its value and records a backward closure on the
//! output node. `grad` walks the graph in reverse topological order and
//! accumulates gradients into the leaves. Graphs are rebuilt per step; nodes
//! are reference-counted and freed when the loss tensor goes out of scope.

pub mod fdcheck;
mod ops;
mod optim;
mod scalar;

pub use ops::{concat_cols, concat_rows, embedding};
pub use optim::{adam_update, AdamConfig, AdamState};
pub use scalar::Scalar;

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expect} elements but {got} were provided")]
    DataLength {
        shape: Vec<usize>,
        expect: usize,
        got: usize,
    },
    #[error("{op}: expected a rank-{rank} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        rank: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: range {start}..{end} out of bounds for axis of size {size}")]
    Range {
        op: &'static str,
        start: usize,
        end: usize,
        size: usize,
    },
    #[error("{op}: index {index} out of bounds for {size} rows")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("optimizer state built for {expect} parameters, step called with {got}")]
    StateMismatch { expect: usize, got: usize },
    #[error("optimizer state for parameter {index} has {expect} elements, parameter has {got}")]
    StateShape {
        index: usize,
        expect: usize,
        got: usize,
    },
}

type BackwardFn<T> = Box<dyn Fn(&OpCtx<'_, T>)>;

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Dense row-major tensor with shared ownership. Cloning is cheap and clones
/// alias the same storage.
pub struct Tensor<T: Scalar = f32> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

/// View handed to backward closures: the output's gradient and value plus
/// accessors for parent data and gradient accumulation.
pub struct OpCtx<'a, T: Scalar> {
    pub out_grad: &'a [T],
    pub out_data: &'a [T],
    parents: &'a [Tensor<T>],
}

impl<'a, T: Scalar> OpCtx<'a, T> {
    pub fn parent_data(&self, i: usize) -> Ref<'a, Vec<T>> {
        self.parents[i].node.data.borrow()
    }

    pub fn parent_shape(&self, i: usize) -> &[usize] {
        &self.parents[i].node.shape
    }

    /// Adds `contrib` into parent `i`'s gradient. No-op when that parent does
    /// not track gradients, so op authors never need to special-case frozen
    /// inputs.
    pub fn add_grad(&self, i: usize, contrib: &[T]) {
        let p = &self.parents[i];
        if !p.tracks() {
            return;
        }
        debug_assert_eq!(contrib.len(), p.len());
        let mut slot = p.node.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![T::zero(); p.len()]);
        for (dst, src) in g.iter_mut().zip(contrib) {
            *dst = *dst + *src;
        }
    }

    /// Like `add_grad` but lets the closure write straight into the
    /// accumulator, avoiding a temporary for scatter-style backward passes.
    pub fn with_grad_mut(&self, i: usize, f: impl FnOnce(&mut [T])) {
        let p = &self.parents[i];
        if !p.tracks() {
            return;
        }
        let mut slot = p.node.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![T::zero(); p.len()]);
        f(g);
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_node(node: Node<T>) -> Self {
        Tensor {
            node: Rc::new(node),
        }
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::DataLength {
                shape,
                expect,
                got: data.len(),
            });
        }
        Ok(Self::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Non-trainable leaf.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf: participates in `grad` and optimizer updates.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![T::zero(); n], false).expect("zeros length always matches")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false).expect("full length always matches")
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Output node of an op. `backward` receives the output gradient and must
    /// push contributions into the parents via `OpCtx`. When no parent tracks
    /// gradients the result is detached and `backward` is dropped, so frozen
    /// subgraphs cost nothing at backprop time.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&OpCtx<'_, T>) + 'static,
    ) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::DataLength {
                shape,
                expect,
                got: data.len(),
            });
        }
        let tracked = parents.iter().any(|p| p.tracks());
        Ok(Self::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: if tracked { parents } else { Vec::new() },
            backward: if tracked {
                Some(Box::new(backward))
            } else {
                None
            },
        }))
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    fn tracks(&self) -> bool {
        self.node.requires_grad || self.node.backward.is_some()
    }

    /// Rank-2 accessors; most layer code works on `[rows, cols]`.
    pub fn rows(&self) -> usize {
        self.node.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.node.shape.get(1).copied().unwrap_or(1)
    }

    pub(crate) fn expect_rank2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.node.shape.len() != 2 {
            return Err(TensorError::Rank {
                op,
                rank: 2,
                shape: self.node.shape.clone(),
            });
        }
        Ok((self.node.shape[0], self.node.shape[1]))
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> Result<T, TensorError> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.node.shape.clone(),
            });
        }
        Ok(self.node.data.borrow()[0])
    }

    /// Replaces the stored values; used by optimizers and checkpoint loading.
    pub fn set_data(&self, data: Vec<T>) -> Result<(), TensorError> {
        if data.len() != self.len() {
            return Err(TensorError::DataLength {
                shape: self.node.shape.clone(),
                expect: self.len(),
                got: data.len(),
            });
        }
        *self.node.data.borrow_mut() = data;
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.node.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn take_grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow_mut().take()
    }

    /// Copy of the values as a fresh leaf, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::leaf(self.node.shape.clone(), self.to_vec(), false)
            .expect("detach preserves length")
    }

    pub fn assert_finite(&self, context: &str) -> Result<(), TensorError> {
        if self.node.data.borrow().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Reverse topological order: every node precedes its parents.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut visited: HashSet<u64> = HashSet::new();
        let mut post: Vec<Tensor<T>> = Vec::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((node, cursor)) = stack.last_mut() {
            let parents = &node.node.parents;
            if *cursor < parents.len() {
                let p = parents[*cursor].clone();
                *cursor += 1;
                if visited.insert(p.node.id) {
                    stack.push((p, 0));
                }
            } else {
                post.push(node.clone());
                stack.pop();
            }
        }
        post.reverse();
        post
    }

    /// Accumulates gradients of this scalar into every reachable node that
    /// tracks them. Call once per graph; `grad` is the usual entry point.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.node.shape.clone(),
            });
        }
        *self.node.grad.borrow_mut() = Some(vec![T::one()]);
        for node in self.topo_order() {
            let Some(bw) = node.node.backward.as_ref() else {
                continue;
            };
            let grad_ref = node.node.grad.borrow();
            let Some(out_grad) = grad_ref.as_ref() else {
                continue;
            };
            let data_ref = node.node.data.borrow();
            let ctx = OpCtx {
                out_grad,
                out_data: &data_ref,
                parents: &node.node.parents,
            };
            bw(&ctx);
        }
        Ok(())
    }
}

/// Gradients keyed by parameter identity.
#[derive(Debug)]
pub struct GradMap<T: Scalar> {
    by_id: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, param: &Tensor<T>) -> Option<&Vec<T>> {
        self.by_id.get(&param.id())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Runs one backward pass and returns d(loss)/d(param) for each parameter.
/// Parameters the loss never touches get explicit zero gradients. Stale
/// gradients on the parameters are cleared first, so repeated calls on fresh
/// graphs never double-count.
pub fn grad<T: Scalar>(
    loss: &Tensor<T>,
    params: &[Tensor<T>],
) -> Result<GradMap<T>, TensorError> {
    for p in params {
        p.zero_grad();
    }
    loss.backward()?;
    let mut by_id = HashMap::with_capacity(params.len());
    for p in params {
        let g = p.take_grad().unwrap_or_else(|| vec![T::zero(); p.len()]);
        by_id.insert(p.id(), g);
    }
    Ok(GradMap { by_id })
}

/// Triple-loop reference matmul, also used by op backward passes.
/// `a` is `[m,k]`, `b` is `[k,n]`, output `[m,n]`.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a [m,k]` times `bᵗ` where `b` is `[n,k]`: output `[m,n]`.
pub(crate) fn matmul_nt_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `aᵗ` times `b` where `a` is `[k,m]`, `b` is `[k,n]`: output `[m,n]`.
pub(crate) fn matmul_tn_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}
