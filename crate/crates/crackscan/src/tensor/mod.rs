//! Dense f64 tensor with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once produced by an op. Every op returns a fresh
//! tensor; when any input has `requires_grad` set, the output carries a
//! graph node so that [`Tensor::backward`] can later push adjoints back to
//! the leaves. Data buffers are shared via `Arc`, so cloning a tensor is
//! cheap and concurrent forward evaluations never copy.
//!
//! Layout is row-major throughout; images use batch x channels x height x
//! width. All arithmetic runs in double precision with a fixed accumulation
//! order inside each op, so results are bit-identical regardless of how
//! many threads evaluate independent ops.

mod conv;
mod ops;

pub use conv::{avg_pool, conv2d, max_pool, ConvParams};
pub use ops::{
    avg_pool_global, batch_norm, bilinear_resize, concat, cross_entropy_loss, linear, mul, relu,
    reshape, softmax, sum_all,
};

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A node in the backward graph: the op that produced a tensor plus the
/// tensors it consumed, in a fixed documented order per op.
pub(crate) struct Node {
    op: Box<dyn Backward>,
    inputs: Vec<Tensor>,
    consumed: AtomicBool,
}

/// Backward rule of one op. `backward` returns one adjoint buffer per input
/// (None for inputs that are not differentiable, e.g. running statistics).
pub(crate) trait Backward: Send + Sync {
    fn op_name(&self) -> &'static str;
    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Dense N-dimensional array of f64 values in row-major order.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}{})",
            self.inner.shape,
            self.inner.requires_grad,
            if self.inner.node.is_some() { ", op" } else { "" }
        )
    }
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Build a leaf tensor, validating that the shape matches the data length.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} expects {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![0.0; numel]), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![value; numel]), false, None)
    }

    /// Scalar wrapper with shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], Arc::new(vec![value]), false, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, node: Option<Node>) -> Self {
        let requires_grad = node.is_some();
        Self::from_parts(shape, Arc::new(data), requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.inner.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Leaf view of the same data with `requires_grad` set. Used to arm
    /// model parameters before a training session.
    pub fn requiring_grad(&self) -> Tensor {
        Self::from_parts(self.inner.shape.clone(), self.data_arc(), true, None)
    }

    /// Leaf view of the same data with no graph attached.
    pub fn detached(&self) -> Tensor {
        Self::from_parts(self.inner.shape.clone(), self.data_arc(), false, None)
    }

    /// Gradient accumulated by the most recent backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Explicit NaN/Inf check; returns an error naming `context` when the
    /// tensor holds a non-finite value.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Row-major flat index for a 4-d coordinate.
    #[inline]
    pub fn index4(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let s = &self.inner.shape;
        ((b * s[1] + c) * s[2] + h) * s[3] + w
    }

    /// Value at a 4-d coordinate (convenience for tests and small code paths).
    #[inline]
    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.inner.data[self.index4(b, c, h, w)]
    }

    /// Extract one channel plane as a detached `1x1xHxW` tensor.
    pub fn channel_plane(&self, b: usize, c: usize) -> Result<Tensor> {
        if self.ndim() != 4 {
            return Err(Error::Shape(format!(
                "channel_plane expects 4-d tensor, got {:?}",
                self.shape()
            )));
        }
        let (h, w) = (self.inner.shape[2], self.inner.shape[3]);
        let start = self.index4(b, c, 0, 0);
        let data = self.inner.data[start..start + h * w].to_vec();
        Tensor::new(&[1, 1, h, w], data)
    }

    /// Contiguous slice along `axis` as a detached tensor.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = &self.inner.shape;
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&self.inner.data[base..base + len * inner]);
        }
        Tensor::new(&out_shape, data)
    }

    /// Stack `1xC...` tensors along the batch axis into one detached tensor.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("stack_batch of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if &t.shape()[1..] != tail || t.shape()[0] != 1 {
                return Err(Error::Shape(format!(
                    "stack_batch expects 1x{tail:?} items, got {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(tail);
        Tensor::new(&shape, data)
    }

    /// Elementwise map into a fresh detached tensor (no autograd).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.inner.data.iter().map(|&v| f(v)).collect();
        Tensor::from_parts(self.inner.shape.clone(), Arc::new(data), false, None)
    }

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every
    /// reachable tensor whose `requires_grad` flag is set. Each graph can be
    /// walked once; a second call on the same loss is an error.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if let Some(node) = &self.inner.node {
            if node.consumed.swap(true, Ordering::SeqCst) {
                return Err(Error::Autograd("graph already consumed".into()));
            }
        }

        let order = topo_order(self);
        let mut adjoints: HashMap<u64, Vec<f64>> = HashMap::new();
        adjoints.insert(self.id(), vec![1.0]);

        for tensor in order.iter().rev() {
            let Some(grad) = adjoints.remove(&tensor.id()) else {
                continue;
            };
            if tensor.inner.requires_grad {
                let mut slot = tensor.inner.grad.lock().unwrap();
                match slot.as_mut() {
                    Some(existing) => {
                        for (e, g) in existing.iter_mut().zip(&grad) {
                            *e += g;
                        }
                    }
                    None => *slot = Some(grad.clone()),
                }
            }
            let Some(node) = &tensor.inner.node else {
                continue;
            };
            let input_grads = node.op.backward(&node.inputs, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.len(), input.numel(), "{} adjoint", node.op.op_name());
                if !(input.inner.requires_grad || input.inner.node.is_some()) {
                    continue;
                }
                match adjoints.get_mut(&input.id()) {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&ig) {
                            *a += g;
                        }
                    }
                    None => {
                        adjoints.insert(input.id(), ig);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Iterative post-order over the graph rooted at `root` (leaves first).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // (tensor, children_pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.node {
            for input in &node.inputs {
                if !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Record an op output: attach a graph node only when some input wants one.
pub(crate) fn make_output(
    shape: Vec<usize>,
    data: Vec<f64>,
    inputs: Vec<Tensor>,
    op: Box<dyn Backward>,
) -> Tensor {
    let track = inputs
        .iter()
        .any(|t| t.requires_grad() || t.inner.node.is_some());
    let node = track.then(|| Node {
        op,
        inputs,
        consumed: AtomicBool::new(false),
    });
    Tensor::from_op(shape, data, node)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_element_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(&[2, 0], vec![]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn finite_check_flags_nan_and_inf() {
        let t = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(!t.all_finite());
        assert!(matches!(
            t.validate_finite("unit"),
            Err(Error::NonFinite(_))
        ));
        let t = Tensor::new(&[2], vec![1.0, f64::INFINITY]).unwrap();
        assert!(t.validate_finite("unit").is_err());
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        assert!(t.validate_finite("unit").is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(), Err(Error::Autograd(_))));
    }

    #[test]
    fn slice_axis_recovers_contiguous_block() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = t.slice_axis(1, 1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn stack_batch_concatenates_along_axis_zero() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack_batch(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
