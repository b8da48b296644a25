use alloc::format;
use alloc::vec;

use super::math;
use super::Tensor;
use crate::{Error, Result};

/// Lower-triangular `L` with `a = L * L^T`.
///
/// Only the lower triangle of `a` is read. Fails on the first pivot that is
/// not strictly positive (or not finite).
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(Error::dim("cholesky", format!("expected a square matrix, got {:?}", a.shape())));
    }
    let n = a.rows();
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = src[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = math::sqrt(d);
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = src[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Tensor::matrix(n, n, l)
}

/// Solves `L * x = b` for lower-triangular `L` (row-major `n x n`).
pub fn forward_substitution(l: &[f64], b: &[f64]) -> alloc::vec::Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
        x[i] = (b[i] - s) / l[i * n + i];
    }
    x
}

/// `ln det(L L^T) = 2 sum ln L_ii`.
pub fn log_det_from_cholesky(l: &Tensor) -> f64 {
    let n = l.rows();
    2.0 * (0..n).map(|i| math::ln(l.get(i, i))).sum::<f64>()
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    math::sqrt(a.data().iter().map(|v| v * v).sum())
}
