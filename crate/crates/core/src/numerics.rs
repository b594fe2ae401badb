//! Minimal dense-tensor kernel for the scorer graph.
//!
//! Storage and arithmetic are f32 in the production path; reductions
//! (dot products, softmax denominators) accumulate in f64. Every op is
//! generic over [`Scalar`] so the gradient checker can instantiate the
//! identical formulas at f64, where central differences are meaningful.
//! Transposes are explicit operations, never implicit views, so oracle
//! comparisons stay unambiguous.

use crate::error::{EngineError, Result};
use serde::{Deserialize, Serialize};

/// Element type of the kernel: f32 (production) or f64 (verification).
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;
    fn finite(self) -> bool;
    fn neg_inf() -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline]
    fn finite(self) -> bool {
        self.is_finite()
    }
    #[inline]
    fn neg_inf() -> Self {
        f32::NEG_INFINITY
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn finite(self) -> bool {
        self.is_finite()
    }
    #[inline]
    fn neg_inf() -> Self {
        f64::NEG_INFINITY
    }
}

/// Row-major 2-D tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorG<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// The production tensor: f32 storage.
pub type Tensor2 = TensorG<f32>;

impl<T: Scalar> TensorG<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TensorG {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        TensorG { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        TensorG::zeros(self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Explicit transpose (materialized copy).
    pub fn transpose(&self) -> TensorG<T> {
        let mut out = TensorG::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.finite())
    }

    pub fn cast<U: Scalar>(&self) -> TensorG<U> {
        TensorG {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Parameter tensor paired with its gradient accumulator.
///
/// The gradient is additive across backward calls until cleared.
#[derive(Debug, Clone)]
pub struct GradPair<T: Scalar = f32> {
    pub value: TensorG<T>,
    pub grad: TensorG<T>,
}

impl<T: Scalar> GradPair<T> {
    pub fn new(value: TensorG<T>) -> Self {
        let grad = value.zeros_like();
        GradPair { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = T::ZERO);
    }
}

fn dim_err<T>(ctx: &'static str, a: &TensorG<T>, b: &TensorG<T>) -> EngineError {
    EngineError::DimMismatch {
        ctx,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}

/// Standard matrix product a·b with f64 accumulation per entry.
pub fn matmul<T: Scalar>(a: &TensorG<T>, b: &TensorG<T>) -> Result<TensorG<T>> {
    if a.cols != b.rows {
        return Err(dim_err("matmul", a, b));
    }
    let mut out = TensorG::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..b.cols {
            let mut acc = 0.0f64;
            for k in 0..a.cols {
                acc += arow[k].to_f64() * b.data[k * b.cols + j].to_f64();
            }
            orow[j] = T::from_f64(acc);
        }
    }
    Ok(out)
}

/// aᵀ·b without materializing the transpose.
pub fn matmul_at_b<T: Scalar>(a: &TensorG<T>, b: &TensorG<T>) -> Result<TensorG<T>> {
    if a.rows != b.rows {
        return Err(dim_err("matmul_at_b", a, b));
    }
    let mut out = TensorG::zeros(a.cols, b.cols);
    for i in 0..a.cols {
        let orow = out.row_mut(i);
        for j in 0..b.cols {
            let mut acc = 0.0f64;
            for k in 0..a.rows {
                acc += a.data[k * a.cols + i].to_f64() * b.data[k * b.cols + j].to_f64();
            }
            orow[j] = T::from_f64(acc);
        }
    }
    Ok(out)
}

/// a·bᵀ without materializing the transpose.
pub fn matmul_a_bt<T: Scalar>(a: &TensorG<T>, b: &TensorG<T>) -> Result<TensorG<T>> {
    if a.cols != b.cols {
        return Err(dim_err("matmul_a_bt", a, b));
    }
    let mut out = TensorG::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..b.rows {
            orow[j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// Dot product with f64 accumulation.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for k in 0..a.len() {
        acc += a[k].to_f64() * b[k].to_f64();
    }
    T::from_f64(acc)
}

/// Row-wise softmax over the valid columns only; masked columns are
/// exactly zero. Stabilized by row-max subtraction, f64 denominator.
pub fn masked_softmax_rows<T: Scalar>(scores: &TensorG<T>, mask: &[bool]) -> Result<TensorG<T>> {
    assert_eq!(mask.len(), scores.cols, "mask length != score cols");
    let mut out = scores.zeros_like();
    for r in 0..scores.rows {
        let row = scores.row(r);
        let mut max = T::neg_inf();
        for (c, &m) in mask.iter().enumerate() {
            if m && row[c] > max {
                max = row[c];
            }
        }
        if max == T::neg_inf() {
            return Err(EngineError::DegenerateMask { row: r });
        }
        let mut denom = 0.0f64;
        let orow = out.row_mut(r);
        for (c, &m) in mask.iter().enumerate() {
            if m {
                let e = (row[c].to_f64() - max.to_f64()).exp();
                orow[c] = T::from_f64(e);
                denom += e;
            }
        }
        for (c, &m) in mask.iter().enumerate() {
            if m {
                orow[c] = T::from_f64(orow[c].to_f64() / denom);
            }
        }
    }
    Ok(out)
}

/// Backward of `masked_softmax_rows`: given the softmax output `weights`
/// and the upstream gradient `d_weights`, returns d(logits).
pub fn masked_softmax_backward<T: Scalar>(
    weights: &TensorG<T>,
    d_weights: &TensorG<T>,
    mask: &[bool],
) -> TensorG<T> {
    let mut out = weights.zeros_like();
    for r in 0..weights.rows {
        let w = weights.row(r);
        let dw = d_weights.row(r);
        let mut s = 0.0f64;
        for (c, &m) in mask.iter().enumerate() {
            if m {
                s += dw[c].to_f64() * w[c].to_f64();
            }
        }
        let orow = out.row_mut(r);
        for (c, &m) in mask.iter().enumerate() {
            if m {
                orow[c] = T::from_f64(w[c].to_f64() * (dw[c].to_f64() - s));
            }
        }
    }
    out
}

/// Logistic sigmoid, f64 internally. Saturates gracefully at both ends.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::from_f64(1.0 / (1.0 + (-x.to_f64()).exp()))
}

/// Central-difference gradient check over a flat parameter vector.
///
/// `loss` must be a pure function of `params`. Returns the maximum
/// relative error between the analytic gradient and finite differences.
pub fn finite_diff_check<T, F>(
    mut loss: F,
    params: &mut [T],
    analytic_grad: &[T],
    eps: f64,
) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<f64>,
{
    assert_eq!(params.len(), analytic_grad.len());
    assert!((1e-5..=1e-3).contains(&eps), "eps {eps} outside [1e-5, 1e-3]");
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = T::from_f64(orig.to_f64() + eps);
        let lp = loss(params)?;
        params[i] = T::from_f64(orig.to_f64() - eps);
        let lm = loss(params)?;
        params[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(EngineError::Numeric(format!(
                "non-finite loss during finite-difference probe at parameter {i}"
            )));
        }
        let fd = (lp - lm) / (2.0 * eps);
        let g = analytic_grad[i].to_f64();
        let denom = fd.abs().max(g.abs()).max(1e-4);
        let rel = (fd - g).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
