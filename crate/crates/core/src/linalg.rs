//! Small dense kernels shared by every scoring routine.
//!
//! All softmax and log-sum-exp variants subtract the running maximum before
//! exponentiating, so entries of any magnitude are safe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows with Euclidean norm below this are treated as degenerate features.
pub const NORM_FLOOR: f64 = 1e-12;

/// Dense row-major matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from a generator. The caller guarantees finite output.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Row order reversed (last frame first).
    pub fn reversed_rows(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self.get(self.rows - 1 - i, j))
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    for n in [na, nb] {
        if !(n >= NORM_FLOOR) {
            return Err(Error::ZeroNormVector { norm: n });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `lambda * ln(sum_j exp(v_j / lambda))`, stabilised by the maximum.
pub fn log_sum_exp(v: &[f64], lambda: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "log-sum-exp temperature must be positive, got {lambda}"
        )));
    }
    Ok(lse_unchecked(v, lambda))
}

#[inline]
pub(crate) fn lse_unchecked(v: &[f64], lambda: f64) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| ((x - max) / lambda).exp()).sum();
    max + lambda * sum.ln()
}

/// Softmax of one row, max-subtracted.
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

#[inline]
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Log-softmax of one row, max-subtracted.
#[inline]
pub(crate) fn log_softmax_in_place(v: &mut [f64]) {
    let lse = lse_unchecked(v, 1.0);
    v.iter_mut().for_each(|x| *x -= lse);
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - 0.707_106_781_186_547_5).abs() < 1e-6);
    }

    #[test]
    fn cosine_rejects_degenerate() {
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNormVector { .. })
        ));
        assert!(matches!(
            cosine_sim(&[1e-13, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNormVector { .. })
        ));
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn cosine_is_clamped() {
        let a = [0.1, 0.2, 0.3, 1e-3, 7.0];
        let c = cosine_sim(&a, &a).unwrap();
        assert!(c <= 1.0);
        assert!((c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lse_examples() {
        let zeros = [0.0; 8];
        let v = log_sum_exp(&zeros, 0.1).unwrap();
        assert!((v - 0.1 * 8f64.ln()).abs() < 1e-12);

        let mut one_hot = [0.0; 8];
        one_hot[0] = 1.0;
        // 0.1 * ln(e^10 + 7)
        let v = log_sum_exp(&one_hot, 0.1).unwrap();
        assert!((v - 1.000_031_776).abs() < 1e-5, "{v}");

        assert_eq!(log_sum_exp(&[5.0], 0.1).unwrap(), 5.0);
    }

    #[test]
    fn lse_errors() {
        assert!(matches!(log_sum_exp(&[], 0.1), Err(Error::EmptyVector)));
        assert!(matches!(
            log_sum_exp(&[1.0], 0.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax_row(&[3f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let p = softmax_row(&[100.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        // exp(-100) ~ 3.72e-44
        assert!((p[1] / (-100f64).exp() - 1.0).abs() < 1e-12);
        assert!(softmax_row(&[f64::NAN]).is_err());
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
