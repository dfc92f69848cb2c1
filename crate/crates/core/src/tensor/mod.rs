//! Dense-tensor core with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable shaped buffer of `f32` or `f64` values.
//! Differentiable computation runs through a [`Tape`]: leaves are registered
//! with [`Tape::leaf`], ops are tape methods, and [`Tape::backward`]
//! accumulates gradients for every leaf reachable from a scalar loss.
//!
//! Reductions accumulate in ascending index order and internal parallelism
//! only ever splits disjoint output regions, so results are bit-reproducible
//! run to run.

mod conv;
mod ops;
mod pool;
mod sample;
mod tape;

pub use conv::{conv3d_output_shape, ConvGeom};
pub use ops::MinMax;
pub use pool::maxpool3d;
pub use sample::sample_points;
pub use tape::{NodeId, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Element dtype tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Scalar types the engine computes with: `f32` for training,
/// `f64` for finite-difference gradient checks.
pub trait Elem:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dense N-dimensional value. Cloning is cheap (shared buffer); the payload
/// is immutable once an op has produced it.
#[derive(Clone)]
pub struct Tensor<T: Elem> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<TrackedNode>,
}

/// Identifies the tape node a tracked tensor was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TrackedNode {
    pub tape: u64,
    pub node: NodeId,
}

impl<T: Elem> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {} values",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![T::zero(); numel]), node: None }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; numel]), node: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Argument(format!(
                "item() requires a scalar tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Value at a multi-index (row-major). Test/debug helper.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Same buffer under a new shape with identical element count.
    /// Gradient tracking carries over (reshape is free).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data), node: self.node })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Whether this tensor participates in a tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Convert element type (drops any tracking).
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), node: None }
    }

    pub(crate) fn tracked(&self) -> Option<TrackedNode> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: Option<TrackedNode>) -> Self {
        self.node = node;
        self
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>, node: Option<TrackedNode>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data), node }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }
}

impl<T: Elem> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        if self.node.is_some() {
            write!(f, " (tracked)")?;
        }
        Ok(())
    }
}
