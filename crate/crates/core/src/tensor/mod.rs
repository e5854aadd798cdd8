//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations that
//! consume at least one tensor requiring a gradient record a [`Node`] that
//! links the result to its parents together with a [`Backward`] rule. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into the grad buffers of the
//! reachable leaves.
//!
//! Only the primitives needed by the segmentation network and its losses are
//! provided; see [`ops`] for the list.

mod check;
pub mod ops;

use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::sync::{Arc, Mutex};

use num_traits::Float;
use thiserror::Error;

pub use check::{finite_diff_gradcheck, GradCheckOptions, GradCheckReport};
pub use ops::Reduction;

/// Floating-point element type of a tensor. `f32` is used for training and
/// `f64` for finite-difference checks.
pub trait Element: Float + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Gradient rule of a recorded operation.
///
/// `backward` receives the parents in the order they were recorded, the
/// forward output values and the gradient flowing into the output. It returns
/// one entry per parent; `None` means "no gradient" (the parent does not
/// require one, or the op is not differentiable w.r.t. it).
pub trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, parents: &[Tensor<T>], output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

/// Autodiff record of a non-leaf tensor.
pub struct Node<T: Element> {
    op: Box<dyn Backward<T>>,
    parents: Vec<Tensor<T>>,
}

struct Inner<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::Invalid {
            op,
            detail: format!("zero-sized dimension in shape {shape:?}"),
        });
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("shape {shape:?} holds {n} elements, data has {len}"),
        });
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Self {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node: None,
            }),
        }
    }

    /// Leaf tensor that does not take part in differentiation.
    pub fn constant(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape("constant", shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Leaf tensor whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape("param", shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(Vec::new(), vec![value], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![T::zero(); n], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false)
    }

    /// Builds the result of an operation. A node is recorded only if some
    /// parent requires a gradient.
    pub fn from_op(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, op: Box<dyn Backward<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then_some(Node { op, parents });
        Self {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn parents(&self) -> &[Tensor<T>] {
        self.inner.node.as_ref().map_or(&[], |n| n.parents.as_slice())
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op.name())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    /// Copy of this tensor with a different shape holding the same number of
    /// elements.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape("reshape", shape, self.numel())?;
        Ok(Self::from_op(
            shape.to_vec(),
            self.inner.data.clone(),
            vec![self.clone()],
            Box::new(ops::Identity),
        ))
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    fn accumulate_leaf(&self, g: Vec<T>) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a single-element loss. Gradients accumulate
    /// additively into the grad buffers of reachable leaves that require them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS; reversing it gives a topological order
        // from the loss towards the leaves.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key(), ());
        while let Some((t, next)) = stack.pop() {
            let parents = t.parents();
            if next < parents.len() {
                let p = parents[next].clone();
                stack.push((t, next + 1));
                if p.requires_grad() && visited.insert(p.key(), ()).is_none() {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.inner.node {
                None => t.accumulate_leaf(g),
                Some(node) => {
                    let parent_grads = node.op.backward(&node.parents, t.data(), &g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{}", node.op.name());
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Converts element type; the result is a leaf.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.inner.data.iter().map(|&x| U::lit(x.to_f64())).collect();
        Tensor::leaf(self.inner.shape.clone(), data, false)
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
