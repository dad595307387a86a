//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] produced by a primitive whose inputs require gradients
//! keeps a backpointer to the primitive and its inputs. Calling
//! [`Tensor::backward`] on a scalar walks that graph once in reverse
//! topological order and accumulates `d loss / d leaf` into each leaf's
//! gradient buffer. A graph is single-use: a second `backward` through any
//! already-visited node fails with [`TensorError::GraphConsumed`].
//!
//! Leaf gradients are *summed* across backward passes until cleared, which is
//! how micro-batch gradient accumulation is expressed.

mod adam;
mod gradcheck;
mod ops;
mod registry;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_diff_check, relative_error, CheckReport, ParamCheck, REL_ERR_FLOOR};
pub(crate) use ops::stable_sigmoid;
pub use ops::{apply_primitive, Primitive};
pub use registry::{Param, ParamRegistry};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NumericOverflow(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by an earlier backward pass")]
    GraphConsumed,
    #[error("trainable parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("invalid optimizer setting: {0}")]
    InvalidHyperparameter(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node {
    op: Primitive,
    inputs: Vec<Tensor>,
    consumed: AtomicBool,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Reference-counted handle; cloning is cheap and shares the value.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::ShapeMismatch(format!("zero-sized dimension in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {len}")));
    }
    Ok(())
}

impl Tensor {
    /// A constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// A leaf that collects gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, true, None))
    }

    pub fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, requires_grad, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        Tensor(Arc::new(Inner { shape, data, requires_grad, grad: Mutex::new(None), node }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient, or `None` if no backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    /// Gradient with unreached leaves reported as zeros.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.lock().expect("grad lock").is_some()
    }

    pub fn set_grad(&self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape()
            )));
        }
        *self.0.grad.lock().expect("grad lock") = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Same values, no history, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Populates `d self / d leaf` in every reachable leaf that requires gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.is_leaf() {
            self.accumulate(&[1.0]);
            return Ok(());
        }

        // Iterative post-order DFS over interior nodes.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            let node = t.0.node.as_ref().expect("interior node");
            if node.consumed.swap(true, Ordering::SeqCst) {
                return Err(TensorError::GraphConsumed);
            }
            stack.push((t.clone(), true));
            for input in &node.inputs {
                if input.requires_grad() && !input.is_leaf() && !visited.contains(&input.key()) {
                    stack.push((input.clone(), false));
                }
            }
        }

        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(gout) = pending.remove(&t.key()) else {
                continue;
            };
            let node = t.0.node.as_ref().expect("interior node");
            let needs: Vec<bool> = node.inputs.iter().map(Tensor::requires_grad).collect();
            let grads = ops::vjp(&node.op, &node.inputs, t, &gout, &needs);
            for (input, g) in node.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if input.is_leaf() {
                    input.accumulate(&g);
                } else {
                    match pending.get_mut(&input.key()) {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                        None => {
                            pending.insert(input.key(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    // Convenience wrappers over `apply_primitive`.

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        apply_primitive(Primitive::Add, &[self, other])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        apply_primitive(Primitive::Mul, &[self, other])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        apply_primitive(Primitive::Div, &[self, other])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        apply_primitive(Primitive::MatMul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        apply_primitive(Primitive::Transpose, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        apply_primitive(Primitive::Reshape(shape.to_vec()), &[self])
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        apply_primitive(Primitive::Slice { axis, start, end }, &[self])
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        apply_primitive(Primitive::Concat { axis }, parts)
    }

    pub fn softmax(&self) -> Result<Tensor> {
        apply_primitive(Primitive::Softmax, &[self])
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        apply_primitive(Primitive::LogSoftmax, &[self])
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        apply_primitive(Primitive::Sigmoid, &[self])
    }

    pub fn gelu(&self) -> Result<Tensor> {
        apply_primitive(Primitive::Gelu, &[self])
    }

    /// Multi-head scaled dot-product attention; see [`Primitive::Attention`].
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, causal: bool) -> Result<Tensor> {
        apply_primitive(Primitive::Attention { n_heads, causal }, &[q, k, v])
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        apply_primitive(Primitive::LayerNorm { eps }, &[self, gain, bias])
    }

    pub fn mean(&self) -> Result<Tensor> {
        apply_primitive(Primitive::Mean, &[self])
    }

    pub fn sum(&self) -> Result<Tensor> {
        apply_primitive(Primitive::Sum, &[self])
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        apply_primitive(Primitive::Scale(factor), &[self])
    }

    pub fn add_scalar(&self, value: f64) -> Result<Tensor> {
        apply_primitive(Primitive::AddScalar(value), &[self])
    }

    /// Row gather; doubles as embedding lookup.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        apply_primitive(Primitive::GatherRows(rows.to_vec()), &[self])
    }

    /// `out[i] = self[i, cols[i]]` for a 2-D input.
    pub fn pick(&self, cols: &[usize]) -> Result<Tensor> {
        apply_primitive(Primitive::Pick(cols.to_vec()), &[self])
    }

    pub fn upsample_bilinear(&self, height: usize, width: usize) -> Result<Tensor> {
        apply_primitive(Primitive::UpsampleBilinear { height, width }, &[self])
    }

    pub fn bce_with_logits(&self, target: &[f64]) -> Result<Tensor> {
        apply_primitive(Primitive::BceWithLogits(target.to_vec()), &[self])
    }
}
