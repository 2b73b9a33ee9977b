//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation that involves at least one gradient-requiring input
//! records itself on an implicit tape: the output node keeps handles to its
//! inputs plus a closure that maps the output gradient to input gradients.
//! Node ids grow monotonically with execution order, so walking reachable
//! nodes by descending id replays the tape exactly backwards. The backward
//! pass only ever writes gradient accumulators; forward activations are
//! immutable once created.

mod gradcheck;
mod image;
mod io;
mod ops;
mod scalar;

pub use gradcheck::{grad_check, numeric_grad, rel_err};
pub use image::PadMode;
pub use io::{ascii_dump, read_tensor, write_tensor};
pub use scalar::{sc, Scalar};

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = Cell::new(1);
    static NO_GRAD: Cell<bool> = Cell::new(false);
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with tape recording disabled. Ops executed inside produce plain
/// value nodes with no parents, so no graph is built and no gradients flow.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD.with(|c| {
        let prev = c.get();
        c.set(true);
        let out = f();
        c.set(prev);
        out
    })
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

/// Gradient closure: receives the output gradient, output data and output
/// shape, returns one optional gradient buffer per parent (in parent order).
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[usize]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
}

/// Cheaply clonable handle to an immutable tensor value.
pub struct Tensor<T: Scalar> {
    inner: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.inner.id, self.inner.shape)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn new_node(
        shape: Vec<usize>,
        data: Rc<Vec<T>>,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Tensor<T> {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                parents,
                backward,
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Leaf tensor that does not require gradients.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != data.len() {
            return Err(Error::Invalid {
                op: "from_vec",
                msg: format!("shape {:?} wants {} values, got {}", shape, numel(shape), data.len()),
            });
        }
        Ok(Self::new_node(shape.to_vec(), Rc::new(data), vec![], None, false))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let t = Self::from_vec(data, shape)?;
        Ok(Tensor {
            inner: Rc::new(Node {
                id: next_id(),
                shape: t.inner.shape.clone(),
                data: Rc::clone(&t.inner.data),
                parents: vec![],
                backward: None,
                requires_grad: true,
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Self::new_node(shape.to_vec(), Rc::new(vec![T::zero(); numel(shape)]), vec![], None, false)
    }

    pub fn ones(shape: &[usize]) -> Tensor<T> {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Tensor<T> {
        Self::new_node(shape.to_vec(), Rc::new(vec![v; numel(shape)]), vec![], None, false)
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: T) -> Tensor<T> {
        Self::new_node(vec![], Rc::new(vec![v]), vec![], None, false)
    }

    /// Identity matrix `[n, n]`.
    pub fn eye(n: usize) -> Tensor<T> {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::new_node(vec![n, n], Rc::new(data), vec![], None, false)
    }

    /// Gaussian leaf with standard deviation `std` (mean zero). Drawn in
    /// `f64` before conversion so f32 and f64 models see the same stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Tensor<T> {
        use rand_distr::{Distribution, StandardNormal};
        let data: Vec<T> = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sc::<T>(z * std)
            })
            .collect();
        Self::new_node(shape.to_vec(), Rc::new(data), vec![], None, false)
    }

    /// Same data viewed as a gradient-requiring leaf.
    pub fn requiring_grad(&self) -> Tensor<T> {
        Self::new_node(self.inner.shape.clone(), Rc::clone(&self.inner.data), vec![], None, true)
    }

    /// Output node of an operation. Recording is skipped when no input needs
    /// gradients or when inside [`no_grad`].
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Tensor<T> {
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if record {
            Self::new_node(shape, Rc::new(data), parents, Some(backward()), true)
        } else {
            Self::new_node(shape, Rc::new(data), vec![], None, false)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.inner.data)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor with {} elements", self.len());
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same data, cut loose from the tape: no parents, no gradient.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_node(self.inner.shape.clone(), Rc::clone(&self.inner.data), vec![], None, false)
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep seeded at this scalar. Visits recorded ops in
    /// exact reverse execution order and accumulates gradients additively
    /// into every reached node.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Invalid {
                op: "backward",
                msg: format!("needs a scalar, got shape {:?}", self.shape()),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        let mut flowing: HashMap<u64, Vec<T>> = HashMap::new();
        flowing.insert(self.inner.id, vec![T::one()]);

        for node in &nodes {
            let g = match flowing.remove(&node.inner.id) {
                Some(g) => g,
                None => continue,
            };
            {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += *v;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(bw) = &node.inner.backward {
                let parent_grads = bw(&g, &node.inner.data, &node.inner.shape);
                debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    if let Some(pg) = pg {
                        debug_assert_eq!(pg.len(), parent.len());
                        match flowing.get_mut(&parent.inner.id) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&pg) {
                                    *a += *v;
                                }
                            }
                            None => {
                                flowing.insert(parent.inner.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
