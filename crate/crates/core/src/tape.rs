//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Operations are recorded as an append-only list of nodes; each node stores
//! its kind, the ids of its tracked inputs, and whatever forward values its
//! adjoint rule needs. [`Tape::backward`] consumes the tape and replays the
//! nodes in reverse, accumulating adjoints. Only scalar roots are supported:
//! every objective in this crate is a scalar loss.
//!
//! A tensor participates in recording only if it is tracked (registered with
//! [`Tape::var`] or produced by a tape op with at least one tracked input).
//! Arithmetic between constants is evaluated without recording, which is how
//! no-grad evaluation works. Tracked tensors must not be mixed across tapes.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_zip, reduce_to_shape, NodeId, Tensor};

/// The elementwise operation kinds exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Sinh,
    Cosh,
    Arccosh,
    Arcsin,
    Arccos,
    Max0,
    Square,
}

/// A saved input: optional tape id plus a shared handle to the forward value.
#[derive(Clone)]
struct Src {
    id: Option<NodeId>,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Src {
    fn of(t: &Tensor) -> Self {
        Src {
            id: t.node(),
            shape: t.shape().to_vec(),
            data: t.buffer(),
        }
    }
}

enum Op {
    Leaf,
    Add { a: Src, b: Src },
    Sub { a: Src, b: Src },
    Mul { a: Src, b: Src },
    Div { a: Src, b: Src },
    Matmul { a: Src, b: Src, m: usize, k: usize, n: usize },
    Neg { a: Src },
    Exp { a: Src, out: Arc<Vec<f64>> },
    Log { a: Src },
    Sqrt { a: Src, out: Arc<Vec<f64>> },
    Sinh { a: Src },
    Cosh { a: Src },
    /// `a` holds the raw (pre-clamp) inputs; the clamp band contributes zero
    /// gradient.
    Arccosh { a: Src },
    Arcsin { a: Src },
    Arccos { a: Src },
    Max0 { a: Src },
    Square { a: Src },
    /// sinh(sqrt(x))/sqrt(x), smooth in x >= 0.
    SinhcSq { a: Src },
    /// asinh(sqrt(x))/sqrt(x), smooth in x >= 0.
    AsinhcSq { a: Src },
    Softplus { a: Src },
    Scale { a: Src, factor: f64 },
    AddScalar { a: Src },
    /// `a` holds the raw inputs; gradient passes only where lo <= x <= hi.
    Clamp { a: Src, lo: f64, hi: f64 },
    Softmax { a: Src, out: Arc<Vec<f64>> },
    LogSoftmax { a: Src, softmax: Arc<Vec<f64>> },
    SumAll { a: Src },
    SumLast { a: Src },
    Reshape { a: Src },
    Transpose { a: Src, rows: usize, cols: usize },
    ConcatRows { a: Src, b: Src },
    SliceRows { a: Src, start: usize },
}

struct Node {
    op: Op,
    out_shape: Vec<usize>,
}

/// Append-only record of operations for one reverse-mode pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`], keyed by leaf node id.
pub struct Gradients {
    grads: Vec<Option<(Vec<usize>, Vec<f64>)>>,
}

impl Gradients {
    /// Gradient with respect to a tracked tensor, if the root depended on it.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node()?;
        let (shape, data) = self.grads.get(id)?.as_ref()?;
        Some(Tensor::from_op(shape.clone(), data.clone(), None))
    }

    /// Gradient with respect to a tensor, zeros when the root never touched it.
    pub fn wrt_or_zeros(&self, t: &Tensor) -> Tensor {
        self.wrt(t).unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{op} produced non-finite value {bad}")));
    }
    Ok(())
}

const ARCCOSH_CLAMP_BAND: f64 = 1e-6;
const SERIES_SWITCH: f64 = 1e-8;

fn sinhc_sq(x: f64) -> f64 {
    if x < SERIES_SWITCH {
        1.0 + x / 6.0 + x * x / 120.0
    } else {
        let t = x.sqrt();
        t.sinh() / t
    }
}

fn sinhc_sq_deriv(x: f64) -> f64 {
    if x < SERIES_SWITCH {
        1.0 / 6.0 + x / 60.0 + x * x / 1680.0
    } else {
        let t = x.sqrt();
        (t.cosh() - t.sinh() / t) / (2.0 * x)
    }
}

fn asinhc_sq(x: f64) -> f64 {
    if x < SERIES_SWITCH {
        1.0 - x / 6.0 + 3.0 * x * x / 40.0
    } else {
        let t = x.sqrt();
        t.asinh() / t
    }
}

fn asinhc_sq_deriv(x: f64) -> f64 {
    if x < SERIES_SWITCH {
        -1.0 / 6.0 + 3.0 * x / 20.0
    } else {
        let t = x.sqrt();
        (1.0 / (1.0 + x).sqrt() - t.asinh() / t) / (2.0 * x)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

// Dense matmul kernels used by forward and by the matmul adjoints.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B^T where B is [k,n].
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..n {
                acc += a[i * n + l] * b[j * n + l];
            }
            c[i * k + j] = acc;
        }
    }
    c
}

/// C[k,n] = A^T * B where A is [m,k], B is [m,n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Register a tensor as a tracked leaf (a parameter or differentiable
    /// input). Returns a tracked copy sharing the same buffer.
    pub fn var(&self, t: &Tensor) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            out_shape: t.shape().to_vec(),
        });
        t.detached().with_node(id)
    }

    fn record(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &str) -> Result<Tensor> {
        check_finite(&data, name)?;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            out_shape: shape.clone(),
        });
        Ok(Tensor::from_op(shape, data, Some(id)))
    }

    fn untracked(shape: Vec<usize>, data: Vec<f64>, name: &str) -> Result<Tensor> {
        check_finite(&data, name)?;
        Ok(Tensor::from_op(shape, data, None))
    }

    fn binary<F>(
        &self,
        a: &Tensor,
        b: &Tensor,
        f: F,
        make: impl FnOnce(Src, Src) -> Op,
        name: &str,
    ) -> Result<Tensor>
    where
        F: Fn(f64, f64) -> f64,
    {
        let (shape, data) = broadcast_zip(a.shape(), a.data(), b.shape(), b.data(), f)?;
        if a.node().is_some() || b.node().is_some() {
            self.record(make(Src::of(a), Src::of(b)), shape, data, name)
        } else {
            Self::untracked(shape, data, name)
        }
    }

    fn unary<F>(
        &self,
        a: &Tensor,
        f: F,
        make: impl FnOnce(Src) -> Op,
        name: &str,
    ) -> Result<Tensor>
    where
        F: Fn(f64) -> f64,
    {
        let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        let shape = a.shape().to_vec();
        if a.node().is_some() {
            self.record(make(Src::of(a)), shape, data, name)
        } else {
            Self::untracked(shape, data, name)
        }
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x + y, |a, b| Op::Add { a, b }, "add")
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x - y, |a, b| Op::Sub { a, b }, "sub")
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x * y, |a, b| Op::Mul { a, b }, "mul")
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x / y, |a, b| Op::Div { a, b }, "div")
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| -x, |a| Op::Neg { a }, "neg")
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|x| x.exp()).collect();
        check_finite(&data, "exp")?;
        let shape = a.shape().to_vec();
        if a.node().is_some() {
            let out = Arc::new(data.clone());
            self.record(Op::Exp { a: Src::of(a), out }, shape, data, "exp")
        } else {
            Self::untracked(shape, data, "exp")
        }
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.ln(), |a| Op::Log { a }, "log")
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|x| x.sqrt()).collect();
        check_finite(&data, "sqrt")?;
        let shape = a.shape().to_vec();
        if a.node().is_some() {
            let out = Arc::new(data.clone());
            self.record(Op::Sqrt { a: Src::of(a), out }, shape, data, "sqrt")
        } else {
            Self::untracked(shape, data, "sqrt")
        }
    }

    pub fn sinh(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.sinh(), |a| Op::Sinh { a }, "sinh")
    }

    pub fn cosh(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.cosh(), |a| Op::Cosh { a }, "cosh")
    }

    /// arccosh with the near-1 clamp policy: inputs in `[1 - 1e-6, 1)` are
    /// treated as exactly 1 (the value rounding can produce for coincident
    /// points); anything lower is a domain violation.
    pub fn arccosh(&self, a: &Tensor) -> Result<Tensor> {
        let mut data = Vec::with_capacity(a.len());
        for &x in a.data() {
            if x >= 1.0 {
                data.push(x.acosh());
            } else if x >= 1.0 - ARCCOSH_CLAMP_BAND {
                data.push(0.0);
            } else {
                return Err(Error::Domain(format!(
                    "arccosh argument {x} below clamp band"
                )));
            }
        }
        let shape = a.shape().to_vec();
        if a.node().is_some() {
            self.record(Op::Arccosh { a: Src::of(a) }, shape, data, "arccosh")
        } else {
            Self::untracked(shape, data, "arccosh")
        }
    }

    pub fn arcsin(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(bad) = a.data().iter().find(|x| x.abs() > 1.0) {
            return Err(Error::Domain(format!("arcsin argument {bad} outside [-1, 1]")));
        }
        self.unary(a, |x| x.asin(), |a| Op::Arcsin { a }, "arcsin")
    }

    pub fn arccos(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(bad) = a.data().iter().find(|x| x.abs() > 1.0) {
            return Err(Error::Domain(format!("arccos argument {bad} outside [-1, 1]")));
        }
        self.unary(a, |x| x.acos(), |a| Op::Arccos { a }, "arccos")
    }

    /// Hinge primitive max(0, x).
    pub fn max0(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.max(0.0), |a| Op::Max0 { a }, "max0")
    }

    pub fn square(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x * x, |a| Op::Square { a }, "square")
    }

    /// sinh(sqrt(x))/sqrt(x) as a smooth function of x >= 0, with a series
    /// branch below 1e-8 so the exponential map stays differentiable at the
    /// origin.
    pub fn sinhc_sq(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(bad) = a.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("sinhc_sq argument {bad} negative")));
        }
        self.unary(a, sinhc_sq, |a| Op::SinhcSq { a }, "sinhc_sq")
    }

    /// asinh(sqrt(x))/sqrt(x) as a smooth function of x >= 0 (the log-map
    /// ratio arccosh(u)/sqrt(u^2-1) expressed in u^2-1).
    pub fn asinhc_sq(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(bad) = a.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("asinhc_sq argument {bad} negative")));
        }
        self.unary(a, asinhc_sq, |a| Op::AsinhcSq { a }, "asinhc_sq")
    }

    pub fn softplus(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, softplus, |a| Op::Softplus { a }, "softplus")
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        if !factor.is_finite() {
            return Err(Error::Domain(format!("scale factor {factor} not finite")));
        }
        self.unary(a, |x| x * factor, |a| Op::Scale { a, factor }, "scale")
    }

    pub fn add_scalar(&self, a: &Tensor, value: f64) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::Domain(format!("add_scalar value {value} not finite")));
        }
        self.unary(a, |x| x + value, |a| Op::AddScalar { a }, "add_scalar")
    }

    /// Clamp to [lo, hi]; the gradient passes through only where the raw
    /// input already lay inside the band.
    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo < hi) {
            return Err(Error::Domain(format!("clamp bounds [{lo}, {hi}] inverted")));
        }
        self.unary(a, |x| x.clamp(lo, hi), |a| Op::Clamp { a, lo, hi }, "clamp")
    }

    /// Row-stable softmax over the last axis.
    pub fn softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = last_axis(a)?;
        let mut data = vec![0.0; a.len()];
        for r in 0..rows {
            let x = &a.data()[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            softmax_row(x, out);
        }
        let shape = a.shape().to_vec();
        if a.node().is_some() {
            let out = Arc::new(data.clone());
            self.record(Op::Softmax { a: Src::of(a), out }, shape, data, "softmax")
        } else {
            Self::untracked(shape, data, "softmax")
        }
    }

    /// Row-stable log-softmax over the last axis.
    pub fn log_softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = last_axis(a)?;
        let mut data = vec![0.0; a.len()];
        let mut soft = vec![0.0; a.len()];
        for r in 0..rows {
            let x = &a.data()[r * cols..(r + 1) * cols];
            let s = &mut soft[r * cols..(r + 1) * cols];
            softmax_row(x, s);
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let shape = a.shape().to_vec();
        if a.node().is_some() {
            self.record(
                Op::LogSoftmax {
                    a: Src::of(a),
                    softmax: Arc::new(soft),
                },
                shape,
                data,
                "log_softmax",
            )
        } else {
            Self::untracked(shape, data, "log_softmax")
        }
    }

    /// Sum of every element, yielding a scalar.
    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let total: f64 = a.data().iter().sum();
        if a.node().is_some() {
            self.record(Op::SumAll { a: Src::of(a) }, vec![], vec![total], "sum_all")
        } else {
            Self::untracked(vec![], vec![total], "sum_all")
        }
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = last_axis(a)?;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = a.data()[r * cols..(r + 1) * cols].iter().sum();
        }
        let shape = a.shape()[..a.shape().len() - 1].to_vec();
        if a.node().is_some() {
            self.record(Op::SumLast { a: Src::of(a) }, shape, data, "sum_last")
        } else {
            Self::untracked(shape, data, "sum_last")
        }
    }

    /// Mean of every element.
    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let s = self.sum_all(a)?;
        self.scale(&s, 1.0 / a.len() as f64)
    }

    /// Mean over the last axis.
    pub fn mean_last(&self, a: &Tensor) -> Result<Tensor> {
        let cols = *a
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("mean_last on scalar".into()))?;
        let s = self.sum_last(a)?;
        self.scale(&s, 1.0 / cols as f64)
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                a.shape(),
                shape
            )));
        }
        let data = a.data().to_vec();
        if a.node().is_some() {
            self.record(Op::Reshape { a: Src::of(a) }, shape.to_vec(), data, "reshape")
        } else {
            Self::untracked(shape.to_vec(), data, "reshape")
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs rank 2, got {:?}",
                a.shape()
            )));
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let src = a.data();
        let mut data = vec![0.0; src.len()];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let shape = vec![cols, rows];
        if a.node().is_some() {
            self.record(Op::Transpose { a: Src::of(a), rows, cols }, shape, data, "transpose")
        } else {
            Self::untracked(shape, data, "transpose")
        }
    }

    /// Standard rank-2 matrix product.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = mm_nn(a.data(), b.data(), m, k, n);
        let shape = vec![m, n];
        if a.node().is_some() || b.node().is_some() {
            self.record(
                Op::Matmul { a: Src::of(a), b: Src::of(b), m, k, n },
                shape,
                data,
                "matmul",
            )
        } else {
            Self::untracked(shape, data, "matmul")
        }
    }

    /// Stack two tensors along axis 0; trailing shapes must agree.
    pub fn concat_rows(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().is_empty() || b.shape().is_empty() || a.shape()[1..] != b.shape()[1..] {
            return Err(Error::Shape(format!(
                "concat_rows shapes {:?} and {:?} incompatible",
                a.shape(),
                b.shape()
            )));
        }
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        if a.node().is_some() || b.node().is_some() {
            self.record(Op::ConcatRows { a: Src::of(a), b: Src::of(b) }, shape, data, "concat_rows")
        } else {
            Self::untracked(shape, data, "concat_rows")
        }
    }

    /// Rows [start, end) along axis 0.
    pub fn slice_rows(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if a.shape().is_empty() || start >= end || end > a.shape()[0] {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {end}) invalid for shape {:?}",
                a.shape()
            )));
        }
        let row: usize = a.shape()[1..].iter().product();
        let mut shape = a.shape().to_vec();
        shape[0] = end - start;
        let data = a.data()[start * row..end * row].to_vec();
        if a.node().is_some() {
            self.record(Op::SliceRows { a: Src::of(a), start }, shape, data, "slice_rows")
        } else {
            Self::untracked(shape, data, "slice_rows")
        }
    }

    /// Dispatcher over the named elementwise kinds; binary kinds require `b`.
    pub fn elementwise(&self, kind: ElementwiseKind, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        use ElementwiseKind::*;
        fn need<'t>(kind: ElementwiseKind, b: Option<&'t Tensor>) -> Result<&'t Tensor> {
            b.ok_or_else(|| Error::Shape(format!("{kind:?} needs two operands")))
        }
        fn none(kind: ElementwiseKind, b: Option<&Tensor>) -> Result<()> {
            if b.is_some() {
                Err(Error::Shape(format!("{kind:?} takes one operand")))
            } else {
                Ok(())
            }
        }
        match kind {
            Add => self.add(a, need(kind, b)?),
            Sub => self.sub(a, need(kind, b)?),
            Mul => self.mul(a, need(kind, b)?),
            Div => self.div(a, need(kind, b)?),
            Neg => { none(kind, b)?; self.neg(a) }
            Exp => { none(kind, b)?; self.exp(a) }
            Log => { none(kind, b)?; self.log(a) }
            Sqrt => { none(kind, b)?; self.sqrt(a) }
            Sinh => { none(kind, b)?; self.sinh(a) }
            Cosh => { none(kind, b)?; self.cosh(a) }
            Arccosh => { none(kind, b)?; self.arccosh(a) }
            Arcsin => { none(kind, b)?; self.arcsin(a) }
            Arccos => { none(kind, b)?; self.arccos(a) }
            Max0 => { none(kind, b)?; self.max0(a) }
            Square => { none(kind, b)?; self.square(a) }
        }
    }

    /// Reverse pass from a scalar root. Consumes the tape; every leaf reached
    /// by the chain rule receives its adjoint. A constant (untracked) root is
    /// permitted and yields empty gradients, i.e. zeros for every parameter.
    pub fn backward(self, root: &Tensor) -> Result<Gradients> {
        if root.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        let nodes = self.nodes.into_inner();
        let mut adj: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut grads: Vec<Option<(Vec<usize>, Vec<f64>)>> =
            (0..nodes.len()).map(|_| None).collect();

        if let Some(rid) = root.node() {
            if rid >= nodes.len() {
                return Err(Error::Shape("backward root is not on this tape".into()));
            }
            adj[rid] = Some(vec![1.0]);
            for i in (0..nodes.len()).rev() {
                let Some(g) = adj[i].take() else { continue };
                let node = &nodes[i];
                match &node.op {
                    Op::Leaf => {
                        check_finite(&g, "gradient")?;
                        grads[i] = Some((node.out_shape.clone(), g));
                        continue;
                    }
                    op => apply_adjoint(op, &node.out_shape, &g, &mut adj)?,
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn last_axis(a: &Tensor) -> Result<(usize, usize)> {
    let cols = *a
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("operation needs rank >= 1".into()))?;
    Ok((a.len() / cols, cols))
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], src: &Src, contrib: Vec<f64>) {
    if let Some(id) = src.id {
        match &mut adj[id] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&contrib) {
                    *a += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }
}

/// Adjoint of `g` (shaped like the op output) with respect to input `src`,
/// for ops whose local derivative is an elementwise factor of the inputs.
fn bcast_adjoint(
    out_shape: &[usize],
    g: &[f64],
    src: &Src,
    factor_shape: &[usize],
    factor: &[f64],
) -> Result<Vec<f64>> {
    let (shape, prod) = broadcast_zip(out_shape, g, factor_shape, factor, |x, y| x * y)?;
    Ok(reduce_to_shape(&shape, &prod, &src.shape))
}

fn apply_adjoint(
    op: &Op,
    out_shape: &[usize],
    g: &[f64],
    adj: &mut [Option<Vec<f64>>],
) -> Result<()> {
    match op {
        Op::Leaf => unreachable!("leaf handled by caller"),
        Op::Add { a, b } => {
            accumulate(adj, a, reduce_to_shape(out_shape, g, &a.shape));
            accumulate(adj, b, reduce_to_shape(out_shape, g, &b.shape));
        }
        Op::Sub { a, b } => {
            accumulate(adj, a, reduce_to_shape(out_shape, g, &a.shape));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(adj, b, reduce_to_shape(out_shape, &neg, &b.shape));
        }
        Op::Mul { a, b } => {
            accumulate(adj, a, bcast_adjoint(out_shape, g, a, &b.shape, &b.data)?);
            accumulate(adj, b, bcast_adjoint(out_shape, g, b, &a.shape, &a.data)?);
        }
        Op::Div { a, b } => {
            // d/da (a/b) = 1/b ; d/db (a/b) = -a/b^2
            let (s1, ga) = broadcast_zip(out_shape, g, &b.shape, &b.data, |g, b| g / b)?;
            accumulate(adj, a, reduce_to_shape(&s1, &ga, &a.shape));
            let (s2, gn) = broadcast_zip(out_shape, g, &a.shape, &a.data, |g, a| g * a)?;
            let (_, gb) = broadcast_zip(&s2, &gn, &b.shape, &b.data, |x, b| -x / (b * b))?;
            accumulate(adj, b, reduce_to_shape(&s2, &gb, &b.shape));
        }
        Op::Matmul { a, b, m, k, n } => {
            accumulate(adj, a, mm_nt(g, &b.data, *m, *n, *k));
            accumulate(adj, b, mm_tn(&a.data, g, *m, *k, *n));
        }
        Op::Neg { a } => {
            accumulate(adj, a, g.iter().map(|v| -v).collect());
        }
        Op::Exp { a, out } => {
            accumulate(adj, a, g.iter().zip(out.iter()).map(|(g, y)| g * y).collect());
        }
        Op::Log { a } => {
            accumulate(adj, a, g.iter().zip(a.data.iter()).map(|(g, x)| g / x).collect());
        }
        Op::Sqrt { a, out } => {
            accumulate(adj, a, g.iter().zip(out.iter()).map(|(g, y)| g / (2.0 * y)).collect());
        }
        Op::Sinh { a } => {
            accumulate(adj, a, g.iter().zip(a.data.iter()).map(|(g, x)| g * x.cosh()).collect());
        }
        Op::Cosh { a } => {
            accumulate(adj, a, g.iter().zip(a.data.iter()).map(|(g, x)| g * x.sinh()).collect());
        }
        Op::Arccosh { a } => {
            // Zero through the clamp band; guarded just above 1 where the
            // true derivative diverges.
            let contrib = g
                .iter()
                .zip(a.data.iter())
                .map(|(g, &x)| {
                    if x <= 1.0 {
                        0.0
                    } else {
                        g / (x * x - 1.0).max(1e-30).sqrt()
                    }
                })
                .collect();
            accumulate(adj, a, contrib);
        }
        Op::Arcsin { a } => {
            let contrib = g
                .iter()
                .zip(a.data.iter())
                .map(|(g, &x)| g / (1.0 - x * x).max(1e-30).sqrt())
                .collect();
            accumulate(adj, a, contrib);
        }
        Op::Arccos { a } => {
            let contrib = g
                .iter()
                .zip(a.data.iter())
                .map(|(g, &x)| -g / (1.0 - x * x).max(1e-30).sqrt())
                .collect();
            accumulate(adj, a, contrib);
        }
        Op::Max0 { a } => {
            let contrib = g
                .iter()
                .zip(a.data.iter())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(adj, a, contrib);
        }
        Op::Square { a } => {
            accumulate(adj, a, g.iter().zip(a.data.iter()).map(|(g, x)| 2.0 * g * x).collect());
        }
        Op::SinhcSq { a } => {
            let contrib = g
                .iter()
                .zip(a.data.iter())
                .map(|(g, &x)| g * sinhc_sq_deriv(x))
                .collect();
            accumulate(adj, a, contrib);
        }
        Op::AsinhcSq { a } => {
            let contrib = g
                .iter()
                .zip(a.data.iter())
                .map(|(g, &x)| g * asinhc_sq_deriv(x))
                .collect();
            accumulate(adj, a, contrib);
        }
        Op::Softplus { a } => {
            accumulate(adj, a, g.iter().zip(a.data.iter()).map(|(g, &x)| g * sigmoid(x)).collect());
        }
        Op::Scale { a, factor } => {
            accumulate(adj, a, g.iter().map(|v| v * factor).collect());
        }
        Op::AddScalar { a } => {
            accumulate(adj, a, g.to_vec());
        }
        Op::Clamp { a, lo, hi } => {
            let contrib = g
                .iter()
                .zip(a.data.iter())
                .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                .collect();
            accumulate(adj, a, contrib);
        }
        Op::Softmax { a, out } => {
            let cols = *out_shape.last().expect("softmax output has rank >= 1");
            let rows = g.len() / cols;
            let mut contrib = vec![0.0; g.len()];
            for r in 0..rows {
                let y = &out[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..cols {
                    contrib[r * cols + j] = y[j] * (gr[j] - dot);
                }
            }
            accumulate(adj, a, contrib);
        }
        Op::LogSoftmax { a, softmax } => {
            let cols = *out_shape.last().expect("log_softmax output has rank >= 1");
            let rows = g.len() / cols;
            let mut contrib = vec![0.0; g.len()];
            for r in 0..rows {
                let p = &softmax[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let gsum: f64 = gr.iter().sum();
                for j in 0..cols {
                    contrib[r * cols + j] = gr[j] - p[j] * gsum;
                }
            }
            accumulate(adj, a, contrib);
        }
        Op::SumAll { a } => {
            accumulate(adj, a, vec![g[0]; a.data.len()]);
        }
        Op::SumLast { a } => {
            let cols = *a.shape.last().expect("sum_last input has rank >= 1");
            let mut contrib = Vec::with_capacity(a.data.len());
            for &v in g {
                contrib.extend(std::iter::repeat(v).take(cols));
            }
            accumulate(adj, a, contrib);
        }
        Op::Reshape { a } => {
            accumulate(adj, a, g.to_vec());
        }
        Op::Transpose { a, rows, cols } => {
            // Output is [cols, rows]; transpose g back to [rows, cols].
            let mut contrib = vec![0.0; g.len()];
            for i in 0..*cols {
                for j in 0..*rows {
                    contrib[j * cols + i] = g[i * rows + j];
                }
            }
            accumulate(adj, a, contrib);
        }
        Op::ConcatRows { a, b } => {
            let split = a.data.len();
            accumulate(adj, a, g[..split].to_vec());
            accumulate(adj, b, g[split..].to_vec());
        }
        Op::SliceRows { a, start } => {
            let row: usize = a.shape[1..].iter().product();
            let mut contrib = vec![0.0; a.data.len()];
            contrib[start * row..start * row + g.len()].copy_from_slice(g);
            accumulate(adj, a, contrib);
        }
    }
    Ok(())
}
