//! Lorentz-model hyperbolic geometry.
//!
//! Points live on the upper sheet of the two-sheeted hyperboloid
//! `<x, x>_L = -1/c` in Minkowski space, with full vectors laid out as
//! `[space components..., time component]`. Only the spatial components are
//! stored; the time component is recomputed on demand from the constraint
//! `x_time = sqrt(1/c + ||x_space||^2)`, so gradients never flow through an
//! independently stored time coordinate.
//!
//! Exponential and logarithmic maps are only provided at the hyperboloid
//! origin `O = [0, sqrt(1/c)]`, which is all the alignment objectives need.
//! The batched `*_space` functions are the differentiable kernels used by
//! the losses; the point-level API wraps them over a throwaway tape so both
//! paths share one formula.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Tolerance for claiming a full vector lies on the hyperboloid.
pub const MANIFOLD_TOL: f64 = 1e-9;

/// Positive curvature magnitude `c`; the manifold has curvature `-c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Curvature(c))
        } else {
            Err(Error::Config(format!("curvature must be positive, got {c}")))
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    pub fn sqrt(&self) -> f64 {
        self.0.sqrt()
    }

    /// Time coordinate of the origin, sqrt(1/c).
    pub fn origin_time(&self) -> f64 {
        (1.0 / self.0).sqrt()
    }
}

/// A tangent vector at the origin. The time component is identically zero,
/// which makes `<O, v>_L = 0` hold structurally.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    pub space: Tensor,
}

impl TangentVector {
    pub fn new(space: Tensor) -> Self {
        TangentVector { space }
    }

    pub fn from_slice(space: &[f64]) -> Result<Self> {
        Ok(TangentVector { space: Tensor::vector(space)? })
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }

    /// Euclidean norm of the space components, which for tangent vectors at
    /// the origin equals the Lorentzian norm.
    pub fn norm(&self) -> f64 {
        self.space.norm()
    }
}

/// A point on the upper sheet, stored space-only with its curvature.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperboloidPoint {
    space: Tensor,
    curvature: Curvature,
}

impl HyperboloidPoint {
    /// Lift spatial components onto the manifold (always valid: the time
    /// component is derived from the constraint).
    pub fn from_space(space: Tensor, curvature: Curvature) -> Self {
        HyperboloidPoint { space, curvature }
    }

    /// Validate a full `[space..., time]` vector and adopt its space part.
    pub fn from_full(full: &[f64], curvature: Curvature) -> Result<Self> {
        if full.len() < 2 {
            return Err(Error::Shape("full vector needs at least 2 components".into()));
        }
        let (space, time) = full.split_at(full.len() - 1);
        let time = time[0];
        if time <= 0.0 {
            return Err(Error::Manifold(format!(
                "time component {time} not on the upper sheet"
            )));
        }
        let expect = time_from_space(space, curvature);
        if (time - expect).abs() > MANIFOLD_TOL {
            return Err(Error::Manifold(format!(
                "time component {time} violates the constraint (expected {expect})"
            )));
        }
        Ok(HyperboloidPoint {
            space: Tensor::vector(space)?,
            curvature,
        })
    }

    /// The origin `O = [0, sqrt(1/c)]`.
    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        HyperboloidPoint {
            space: Tensor::zeros(&[dim]),
            curvature,
        }
    }

    pub fn space(&self) -> &Tensor {
        &self.space
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }

    /// Time component recomputed from the constraint.
    pub fn time(&self) -> f64 {
        time_from_space(self.space.data(), self.curvature)
    }

    /// Full ambient vector `[space..., time]`.
    pub fn to_full(&self) -> Vec<f64> {
        let mut v = self.space.data().to_vec();
        v.push(self.time());
        v
    }

    pub fn space_norm(&self) -> f64 {
        self.space.norm()
    }
}

/// Lorentzian inner product of two full `[space..., time]` vectors.
pub fn lorentz_inner_full(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!(
            "lorentz inner product needs equal dimensions, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() - 1;
    let spatial: f64 = x[..n].iter().zip(&y[..n]).map(|(a, b)| a * b).sum();
    Ok(spatial - x[n] * y[n])
}

/// Lorentzian inner product of two on-manifold points.
pub fn lorentz_inner(x: &HyperboloidPoint, y: &HyperboloidPoint) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "points have different dimensions: {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    let spatial: f64 = x
        .space()
        .data()
        .iter()
        .zip(y.space().data())
        .map(|(a, b)| a * b)
        .sum();
    Ok(spatial - x.time() * y.time())
}

/// Induced Lorentzian norm sqrt(|<x, x>_L|) of a full vector.
pub fn lorentz_norm(x: &[f64]) -> Result<f64> {
    Ok(lorentz_inner_full(x, x)?.abs().sqrt())
}

/// Time component satisfying the hyperboloid constraint.
pub fn time_from_space(space: &[f64], c: Curvature) -> f64 {
    let sq: f64 = space.iter().map(|v| v * v).sum();
    (1.0 / c.value() + sq).sqrt()
}

// ---------------------------------------------------------------------------
// Differentiable batched kernels. Rows of `[B, n]` tensors are independent
// vectors; everything broadcasts per row.
// ---------------------------------------------------------------------------

/// Squared row norms as a `[B, 1]` column.
fn row_norm_sq(tape: &Tape, rows: &Tensor) -> Result<Tensor> {
    let b = rows.shape()[0];
    let sq = tape.square(rows)?;
    let sums = tape.sum_last(&sq)?;
    tape.reshape(&sums, &[b, 1])
}

/// Exponential map at the origin applied to every row of a `[B, n]` tangent
/// batch: `y_space = sinh(sqrt(c)||v||) / (sqrt(c)||v||) * v_space`, with the
/// ratio evaluated as a smooth function of `c * ||v||^2` so the map stays
/// differentiable at the origin.
pub fn exp_map_space(tape: &Tape, v_space: &Tensor, c: Curvature) -> Result<Tensor> {
    if v_space.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "exp_map_space expects [B, n], got {:?}",
            v_space.shape()
        )));
    }
    let q = row_norm_sq(tape, v_space)?;
    let cq = tape.scale(&q, c.value())?;
    let ratio = tape.sinhc_sq(&cq)?;
    tape.mul(v_space, &ratio)
}

/// Logarithmic map at the origin applied to every row of a `[B, n]` batch of
/// on-manifold space components:
/// `v_space = arccosh(-c <O,x>_L) / sqrt((c <O,x>_L)^2 - 1) * x_space`.
/// With `u = -c <O,x>_L = sqrt(1 + c ||x_space||^2)`, the ratio equals
/// `asinh(sqrt(c) ||x_space||) / (sqrt(c) ||x_space||)`, smooth at the origin.
pub fn log_map_space(tape: &Tape, x_space: &Tensor, c: Curvature) -> Result<Tensor> {
    if x_space.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "log_map_space expects [B, n], got {:?}",
            x_space.shape()
        )));
    }
    let q = row_norm_sq(tape, x_space)?;
    let cq = tape.scale(&q, c.value())?;
    let ratio = tape.asinhc_sq(&cq)?;
    tape.mul(x_space, &ratio)
}

/// Time components of on-manifold rows as a `[B, 1]` column.
pub fn time_from_space_col(tape: &Tape, x_space: &Tensor, c: Curvature) -> Result<Tensor> {
    let q = row_norm_sq(tape, x_space)?;
    let shifted = tape.add_scalar(&q, 1.0 / c.value())?;
    tape.sqrt(&shifted)
}

/// Row-wise Lorentzian inner products `<x_i, y_i>_L` as a `[B, 1]` column.
pub fn paired_inner(
    tape: &Tape,
    x_space: &Tensor,
    y_space: &Tensor,
    c: Curvature,
) -> Result<Tensor> {
    if x_space.shape() != y_space.shape() {
        return Err(Error::Shape(format!(
            "paired_inner shapes differ: {:?} vs {:?}",
            x_space.shape(),
            y_space.shape()
        )));
    }
    let b = x_space.shape()[0];
    let prod = tape.mul(x_space, y_space)?;
    let spatial = tape.reshape(&tape.sum_last(&prod)?, &[b, 1])?;
    let tx = time_from_space_col(tape, x_space, c)?;
    let ty = time_from_space_col(tape, y_space, c)?;
    let times = tape.mul(&tx, &ty)?;
    tape.sub(&spatial, &times)
}

/// All-pairs Lorentzian inner products as a `[B, M]` matrix for rows of
/// `x_space` `[B, n]` against rows of `y_space` `[M, n]`.
pub fn pairwise_inner(
    tape: &Tape,
    x_space: &Tensor,
    y_space: &Tensor,
    c: Curvature,
) -> Result<Tensor> {
    if x_space.shape().len() != 2 || y_space.shape().len() != 2 || x_space.shape()[1] != y_space.shape()[1] {
        return Err(Error::Shape(format!(
            "pairwise_inner shapes incompatible: {:?} vs {:?}",
            x_space.shape(),
            y_space.shape()
        )));
    }
    let m = y_space.shape()[0];
    let spatial = tape.matmul(x_space, &tape.transpose(y_space)?)?;
    let tx = time_from_space_col(tape, x_space, c)?; // [B, 1]
    let ty = tape.reshape(&time_from_space_col(tape, y_space, c)?, &[1, m])?;
    let times = tape.mul(&tx, &ty)?; // broadcast to [B, M]
    tape.sub(&spatial, &times)
}

/// Geodesic distances `(1/sqrt(c)) arccosh(-c <x_i, y_j>_L)` for all pairs,
/// `[B, M]`. Rounding can push the arccosh argument slightly below 1 for
/// coincident points; the arccosh clamp band absorbs that.
pub fn pairwise_distance(
    tape: &Tape,
    x_space: &Tensor,
    y_space: &Tensor,
    c: Curvature,
) -> Result<Tensor> {
    let inner = pairwise_inner(tape, x_space, y_space, c)?;
    let arg = tape.scale(&inner, -c.value())?;
    let d = tape.arccosh(&arg)?;
    tape.scale(&d, 1.0 / c.sqrt())
}

// ---------------------------------------------------------------------------
// Point-level wrappers over the batched kernels.
// ---------------------------------------------------------------------------

fn single_row(t: &Tensor) -> Result<Tensor> {
    Tensor::new(vec![1, t.len()], t.data().to_vec())
}

fn flatten_row(t: &Tensor) -> Result<Tensor> {
    Tensor::new(vec![t.len()], t.data().to_vec())
}

/// Map a tangent vector at the origin onto the manifold.
pub fn exp_map_origin(v: &TangentVector, c: Curvature) -> Result<HyperboloidPoint> {
    let tape = Tape::new();
    let row = exp_map_space(&tape, &single_row(&v.space)?, c)?;
    Ok(HyperboloidPoint::from_space(flatten_row(&row)?, c))
}

/// Map a point back into the tangent space at the origin; inverse of
/// [`exp_map_origin`]. The exact origin maps to the zero vector.
pub fn log_map_origin(x: &HyperboloidPoint) -> Result<TangentVector> {
    let tape = Tape::new();
    let row = log_map_space(&tape, &single_row(x.space())?, x.curvature())?;
    Ok(TangentVector::new(flatten_row(&row)?))
}

/// Geodesic distance between two points of equal curvature.
pub fn lorentz_distance(x: &HyperboloidPoint, y: &HyperboloidPoint) -> Result<f64> {
    if x.curvature() != y.curvature() {
        return Err(Error::Config(format!(
            "curvatures differ: {} vs {}",
            x.curvature().value(),
            y.curvature().value()
        )));
    }
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "points have different dimensions: {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    let tape = Tape::new();
    let d = pairwise_distance(
        &tape,
        &single_row(x.space())?,
        &single_row(y.space())?,
        x.curvature(),
    )?;
    Ok(d.data()[0])
}
