//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only arena built fresh for every forward pass.
//! Each op pushes one [`TensorNode`] holding the result values, an optional
//! gradient slot, and a record of the producing operation and its inputs;
//! a node with a [`Op::Leaf`] record is a parameter or input. Because the
//! arena is append-only, inputs always precede outputs, so walking node ids
//! in reverse *is* a reverse topological order and [`Tape::backward`] visits
//! each node exactly once. Nothing participating in the graph is mutated in
//! place; repeated `backward` calls accumulate into the same gradient slots
//! (documented behavior, call [`Tape::zero_grads`] to reset).

mod backward;
mod kernels;
mod ops;


use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: String, rhs: String },
    #[error("{op}: bad shape {shape}: {reason}")]
    InvalidShape { op: &'static str, shape: String, reason: String },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange { op: &'static str, index: usize, extent: usize },
    #[error("{op}: duplicate index {index}")]
    DuplicateIndex { op: &'static str, index: usize },
    #[error("{op}: index lists must all have length {expect}, got {got}")]
    RaggedIndexLists { op: &'static str, expect: usize, got: usize },
    #[error("{op}: expected {expect} index lists for batch, got {got}")]
    BatchCountMismatch { op: &'static str, expect: usize, got: usize },
    #[error("backward: root must be a single-element tensor, got {shape}")]
    NonScalarRoot { shape: String },
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let inner: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", inner.join(", "))
}

/// Handle into a [`Tape`]. Cheap to copy; only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) u32);

impl TensorId {
    #[inline]
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Row-index selection along axis 1, either one list shared by the whole
/// batch or one list per batch element (all the same length).
#[derive(Debug, Clone)]
pub enum Rows {
    Shared(Arc<Vec<usize>>),
    PerBatch(Arc<Vec<Vec<usize>>>),
}

impl Rows {
    pub fn shared(idx: Vec<usize>) -> Self {
        Rows::Shared(Arc::new(idx))
    }

    pub fn per_batch(idx: Vec<Vec<usize>>) -> Self {
        Rows::PerBatch(Arc::new(idx))
    }

    /// Selection length per batch element.
    pub fn sel_len(&self) -> usize {
        match self {
            Rows::Shared(v) => v.len(),
            Rows::PerBatch(v) => v.first().map_or(0, |l| l.len()),
        }
    }

    pub fn for_batch(&self, b: usize) -> &[usize] {
        match self {
            Rows::Shared(v) => v,
            Rows::PerBatch(v) => &v[b],
        }
    }

    fn validate(
        &self,
        op: &'static str,
        batch: usize,
        extent: usize,
        forbid_dup: bool,
    ) -> Result<(), TensorError> {
        let expect = self.sel_len();
        if expect == 0 {
            return Err(TensorError::InvalidShape {
                op,
                shape: "[0]".into(),
                reason: "empty index list".into(),
            });
        }
        let lists: &[Vec<usize>] = match self {
            Rows::Shared(v) => std::slice::from_ref(v.as_ref()),
            Rows::PerBatch(v) => {
                if v.len() != batch {
                    return Err(TensorError::BatchCountMismatch { op, expect: batch, got: v.len() });
                }
                v
            }
        };
        let mut seen = vec![false; extent];
        for list in lists {
            if list.len() != expect {
                return Err(TensorError::RaggedIndexLists { op, expect, got: list.len() });
            }
            if forbid_dup {
                seen.iter_mut().for_each(|s| *s = false);
            }
            for &i in list {
                if i >= extent {
                    return Err(TensorError::IndexOutOfRange { op, index: i, extent });
                }
                if forbid_dup {
                    if seen[i] {
                        return Err(TensorError::DuplicateIndex { op, index: i });
                    }
                    seen[i] = true;
                }
            }
        }
        Ok(())
    }
}

/// Pixel-block geometry for patch extraction: a `grid`×`grid` arrangement of
/// masking units, each `unit_px` pixels on a side, split into
/// `inner_px`-pixel patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeom {
    pub grid: usize,
    pub unit_px: usize,
    pub inner_px: usize,
    pub channels: usize,
}

impl PatchGeom {
    pub fn units(&self) -> usize {
        self.grid * self.grid
    }

    /// Inner tokens per unit side.
    pub fn tokens_per_side(&self) -> usize {
        self.unit_px / self.inner_px
    }

    /// Flattened length of one inner patch, ordered (channel, y, x).
    pub fn patch_len(&self) -> usize {
        self.inner_px * self.inner_px * self.channels
    }

    pub fn img_px(&self) -> usize {
        self.grid * self.unit_px
    }
}

/// Operation record: which op produced a node and from which inputs, plus
/// whatever forward-pass values the backward rule needs.
#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    MatmulNT { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    Scale { x: TensorId, c: T },
    ScaleRows { x: TensorId, factors: Arc<Vec<T>> },
    Softmax { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Arc<Vec<T>>, invstd: Arc<Vec<T>> },
    Gelu { x: TensorId },
    Reshape { x: TensorId },
    SwapAxes12 { x: TensorId },
    GatherUnits { x: TensorId, rows: Rows },
    ExtractUnits { img: TensorId, units: Rows, geom: PatchGeom },
    FillUnits { x: TensorId, token: TensorId, rows: Rows },
    ScatterUnits { latent: TensorId, token: TensorId, rows: Rows, total: usize },
    RpeBias { table: TensorId, pairs: Rows, n: usize },
    MeanTokens { x: TensorId },
    MeanAll { x: TensorId },
    CrossEntropy { logits: TensorId, labels: Arc<Vec<u16>>, probs: Arc<Vec<T>> },
}

/// One arena slot: values, gradient slot, and provenance.
#[derive(Debug)]
pub struct TensorNode<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<TensorNode<T>>,
    nonfinite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), nonfinite: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any softmax in this tape has seen a non-finite input.
    pub fn saw_non_finite(&self) -> bool {
        self.nonfinite
    }

    pub(crate) fn flag_non_finite(&mut self) {
        self.nonfinite = true;
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel == 0 || shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: op_name,
                shape: fmt_shape(&shape),
                reason: "zero-element tensors are not supported".into(),
            });
        }
        if data.len() != numel {
            return Err(TensorError::InvalidShape {
                op: op_name,
                shape: fmt_shape(&shape),
                reason: format!("shape wants {} elements, data has {}", numel, data.len()),
            });
        }
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(TensorNode { shape, data, grad: None, op, requires_grad });
        Ok(id)
    }

    /// Internal push for op results whose shape/data were built consistently.
    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(TensorNode { shape, data: Arc::new(data), grad: None, op, requires_grad });
        id
    }

    /// Gradient-tracked leaf (parameter or probed input).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorId, TensorError> {
        self.push_checked("leaf", shape.to_vec(), Arc::new(data), true, Op::Leaf)
    }

    /// Zero-copy gradient-tracked leaf sharing already-owned storage.
    pub fn leaf_shared(&mut self, shape: &[usize], data: Arc<Vec<T>>) -> Result<TensorId, TensorError> {
        self.push_checked("leaf", shape.to_vec(), data, true, Op::Leaf)
    }

    /// Non-differentiable input (images, targets, fixed position tables).
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorId, TensorError> {
        self.push_checked("constant", shape.to_vec(), Arc::new(data), false, Op::Leaf)
    }

    pub fn constant_shared(&mut self, shape: &[usize], data: Arc<Vec<T>>) -> Result<TensorId, TensorError> {
        self.push_checked("constant", shape.to_vec(), data, false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.idx()].shape.iter().product()
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.idx()].data
    }

    pub fn data_shared(&self, id: TensorId) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes[id.idx()].data)
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.idx()].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    pub fn is_leaf(&self, id: TensorId) -> bool {
        matches!(self.nodes[id.idx()].op, Op::Leaf)
    }

    /// Drop all accumulated gradients (values and graph stay intact).
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}
