//! Dense row-major f64 tensors.
//!
//! `Tensor` is the universal numeric carrier: a flat buffer plus shape
//! metadata and an optional handle into the gradient tape that produced it.
//! A tensor with no tape handle is an immutable constant and may be shared
//! freely across threads; tracked tensors are only meaningful together with
//! the tape that recorded them.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Index of a node on a [`crate::tape::Tape`].
pub type NodeId = usize;

/// Dense multi-dimensional array of 64-bit floats. Rank 0 (empty shape)
/// denotes a scalar holding exactly one value.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// Build a tensor, validating that the shape matches the buffer length
    /// and every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {:?}", shape)));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} in tensor of shape {:?}",
                bad, shape
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            node: None,
        }
    }

    /// One-dimensional tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    /// Two-dimensional tensor from rows.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Internal constructor for op outputs; skips the finiteness scan
    /// (callers check separately so the error can name the operation).
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Tape handle of the node that produced this tensor, if tracked.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    /// Shared handle to the underlying buffer (cheap to clone into tape nodes).
    pub(crate) fn buffer(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Extract the single value of a scalar tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Detached copy: same values, no tape handle.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Squared Euclidean norm of the whole buffer.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Euclidean norm of the whole buffer.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Shape of the result of broadcasting `a` against `b` under right-aligned
/// (trailing-dimension) rules, or a shape error.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        }
    }
    Ok(out)
}

/// Apply a binary function elementwise with trailing-dimension broadcasting.
pub(crate) fn broadcast_zip<F: Fn(f64, f64) -> f64>(
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    f: F,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let out_shape = broadcast_shape(a_shape, b_shape)?;
    let numel: usize = out_shape.iter().product();

    // Fast paths: identical shapes, or a scalar on either side.
    if a_shape == b_shape {
        let data = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return Ok((out_shape, data));
    }
    if b.len() == 1 {
        let y = b[0];
        return Ok((out_shape, a.iter().map(|&x| f(x, y)).collect()));
    }
    if a.len() == 1 {
        let x = a[0];
        return Ok((out_shape, b.iter().map(|&y| f(x, y)).collect()));
    }

    let rank = out_shape.len();
    let a_str = padded_broadcast_strides(a_shape, &out_shape);
    let b_str = padded_broadcast_strides(b_shape, &out_shape);
    let mut idx = vec![0usize; rank];
    let mut data = Vec::with_capacity(numel);
    let mut a_off = 0usize;
    let mut b_off = 0usize;
    for _ in 0..numel {
        data.push(f(a[a_off], b[b_off]));
        // Odometer increment over the output index space.
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            a_off += a_str[axis];
            b_off += b_str[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            a_off -= a_str[axis] * out_shape[axis];
            b_off -= b_str[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Ok((out_shape, data))
}

/// Strides of `shape` viewed inside `out_shape`, with 0 on broadcast axes.
fn padded_broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let offset = rank - shape.len();
    let mut s = vec![0; rank];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Sum `data` (of shape `from`) down to shape `to`, reversing a broadcast.
pub(crate) fn reduce_to_shape(from: &[usize], data: &[f64], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let to_numel: usize = to.iter().product();
    let mut out = vec![0.0; to_numel];
    if to_numel == 1 {
        out[0] = data.iter().sum();
        return out;
    }
    let rank = from.len();
    let to_str = padded_broadcast_strides(to, from);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in data {
        out[off] += v;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += to_str[axis];
            if idx[axis] < from[axis] {
                break;
            }
            off -= to_str[axis] * from[axis];
            idx[axis] = 0;
        }
    }
    out
}
