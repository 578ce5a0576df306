//! Dense row-major `f64` tensors and a small reverse-mode tape.
//!
//! The plain functions in this module ([`matmul`], [`softmax`],
//! [`max_over_time`], ...) compute values only. [`Tape`] records the same
//! operations so that [`Tape::backward`] can push gradients back into a
//! [`ParamSet`].

mod param;
mod tape;

pub use param::{Gradients, Param, ParamId, ParamSet};
pub use tape::{BackwardFault, Tape, Var, LOG_CLAMP};

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of range for length {len}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadLength {
                op: "new",
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            }),
        }
    }

    pub fn row(&self, index: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[index * cols..(index + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::BadLength {
                op: "reshape",
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// Dot product with sixteen independent accumulators, which keeps several
/// add chains in flight. The summation order is fixed, so results are
/// bit-reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 16;
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

/// `out += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a.data[i * k + p], &b.data[p * n..(p + 1) * n], row_out);
        }
    }
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

/// Matrix `[m, k]` times vector `[k]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, k) = w.dims2("matvec")?;
    if x.shape != [k] {
        return Err(TensorError::ShapeMismatch {
            op: "matvec",
            left: w.shape.clone(),
            right: x.shape.clone(),
        });
    }
    let out = (0..m).map(|i| dot(w.row(i), &x.data)).collect();
    Tensor::vector(out).ensure_finite("matvec")
}

/// Applies `w [m, k]` to every row of `x [T, k]`, giving `[T, m]`. Row `t`
/// equals `matvec(w, x[t])` bit for bit; the loop order only keeps each
/// weight row hot across all of `x`.
pub fn rows_matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, k) = w.dims2("rows_matvec")?;
    let (t, k2) = x.dims2("rows_matvec")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "rows_matvec",
            left: w.shape.clone(),
            right: x.shape.clone(),
        });
    }
    let mut out = vec![0.0; t * m];
    for j in 0..m {
        let wj = w.row(j);
        for step in 0..t {
            out[step * m + j] = dot(wj, x.row(step));
        }
    }
    Tensor::new(vec![t, m], out)?.ensure_finite("rows_matvec")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pointwise binary op. A scalar operand broadcasts against the other.
pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f = match op {
        BinaryOp::Add => |x: f64, y: f64| x + y,
        BinaryOp::Mul => |x: f64, y: f64| x * y,
    };
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Mul => "mul",
    };
    let out = if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape.clone(), data)?
    } else if b.is_scalar() {
        let y = b.data[0];
        Tensor::new(a.shape.clone(), a.data.iter().map(|&x| f(x, y)).collect())?
    } else if a.is_scalar() {
        let x = a.data[0];
        Tensor::new(b.shape.clone(), b.data.iter().map(|&y| f(x, y)).collect())?
    } else {
        return Err(TensorError::ShapeMismatch {
            op: name,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    };
    out.ensure_finite(name)
}

pub fn unary(op: UnaryOp, a: &Tensor) -> Result<Tensor> {
    let (f, name): (fn(f64) -> f64, _) = match op {
        UnaryOp::Tanh => (f64::tanh, "tanh"),
        UnaryOp::Sigmoid => (sigmoid, "sigmoid"),
    };
    Tensor::new(a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())?.ensure_finite(name)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.data.is_empty() {
        return Err(TensorError::Empty { op: "softmax" });
    }
    let max = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.data.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let data = exps.into_iter().map(|e| e / total).collect();
    Tensor::new(x.shape.clone(), data)?.ensure_finite("softmax")
}

/// Column-wise maximum over the rows of a `[T, d]` matrix, with the row
/// index that won each column. Ties go to the smallest row index.
pub fn max_over_time_with_argmax(r: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (t, d) = r.dims2("max_over_time")?;
    if t == 0 {
        return Err(TensorError::Empty {
            op: "max_over_time",
        });
    }
    let mut best = r.row(0).to_vec();
    let mut arg = vec![0usize; d];
    for step in 1..t {
        for (j, &v) in r.row(step).iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = step;
            }
        }
    }
    Ok((Tensor::vector(best).ensure_finite("max_over_time")?, arg))
}

pub fn max_over_time(r: &Tensor) -> Result<Tensor> {
    max_over_time_with_argmax(r).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_matvec_matches_per_row_matvec() {
        let w = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let x = Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let all = rows_matvec(&w, &x).unwrap();
        assert_eq!(all.shape(), &[4, 3]);
        for t in 0..4 {
            let one = matvec(&w, &Tensor::vector(x.row(t).to_vec())).unwrap();
            assert_eq!(all.row(t), one.data());
        }
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn pointwise_basics() {
        let z = Tensor::vector(vec![0.0]);
        assert_eq!(unary(UnaryOp::Tanh, &z).unwrap().data(), &[0.0]);
        assert_eq!(unary(UnaryOp::Sigmoid, &z).unwrap().data(), &[0.5]);
        let a = Tensor::vector(vec![1.0, 2.0]);
        let s = Tensor::scalar(3.0);
        assert_eq!(binary(BinaryOp::Mul, &a, &s).unwrap().data(), &[3.0, 6.0]);
        assert!(binary(BinaryOp::Add, &a, &Tensor::vector(vec![1.0; 3])).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let a = Tensor::vector(vec![f64::MAX]);
        let err = binary(BinaryOp::Mul, &a, &Tensor::scalar(10.0)).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "mul" });
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::vector(vec![0.0; 3])).unwrap();
        for &p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax(&Tensor::vector(vec![1000.0, 1000.0])).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        assert_eq!(
            softmax(&Tensor::vector(vec![])).unwrap_err(),
            TensorError::Empty { op: "softmax" }
        );
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0, -0.7]);
        let shifted = Tensor::vector(x.data().iter().map(|v| v + 7.3).collect());
        let a = softmax(&x).unwrap();
        let b = softmax(&shifted).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn max_over_time_cases() {
        let r = Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(max_over_time(&r).unwrap().data(), &[3.0, 5.0]);
        let single = Tensor::matrix(1, 2, vec![4.0, -1.0]).unwrap();
        assert_eq!(max_over_time(&single).unwrap().data(), &[4.0, -1.0]);
        let empty = Tensor::zeros(&[0, 3]);
        assert!(max_over_time(&empty).is_err());
    }

    #[test]
    fn max_over_time_ties_pick_first_row() {
        let r = Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap();
        let (_, arg) = max_over_time_with_argmax(&r).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn dot_matches_naive_sum_closely() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
