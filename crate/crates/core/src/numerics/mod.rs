//! Dense tensors, reverse-mode gradients and the small amount of linear
//! algebra the rest of the crate needs. Everything is `f64`.

mod adam;
pub mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use linalg::{cholesky, forward_substitution, frobenius_norm, log_det_from_cholesky};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// `ln`, `exp` and `sqrt` routed through `libm` so results are identical
/// with and without `std`.
pub(crate) mod math {
    #[inline]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    #[inline]
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
}

/// Row-wise numerically stable log-softmax of a `rows x cols` buffer.
pub fn log_softmax_rows(data: &[f64], cols: usize) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec::Vec::with_capacity(data.len());
    for row in data.chunks_exact(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| math::exp(v - max)).sum();
        let lse = max + math::ln(sum);
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

/// Row-wise softmax of a `rows x cols` buffer.
pub fn softmax_rows(data: &[f64], cols: usize) -> alloc::vec::Vec<f64> {
    let mut out = log_softmax_rows(data, cols);
    for v in &mut out {
        *v = math::exp(*v);
    }
    out
}
