//! Dense helpers shared by the encoder and decoder.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative diagonal jitter tried first, as a fraction of the signal variance.
pub const JITTER: f64 = 1e-10;

/// Jitter levels tried in order until a factorization succeeds.
const JITTER_LADDER: [f64; 5] = [JITTER, 1e-8, 1e-6, 1e-4, 1e-2];

/// Lower Cholesky factor of `k + jitter * I`, or `None` if not positive definite.
pub(crate) fn cholesky_with_jitter(k: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut m = k.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    m.cholesky().map(|c| c.unpack())
}

/// Factors `k + level * scale * I`, escalating the level until it succeeds.
/// Returns the factor and the absolute jitter that was added.
pub(crate) fn jittered_cholesky(k: &DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, f64)> {
    for level in JITTER_LADDER {
        let jitter = level * scale;
        if let Some(l) = cholesky_with_jitter(k, jitter) {
            if level > JITTER {
                log::debug!("cholesky needed relative jitter {level:e}");
            }
            return Ok((l, jitter));
        }
    }
    Err(Error::Numerical(format!(
        "{0}x{0} matrix is not positive definite even with jitter",
        k.nrows()
    )))
}

/// Like [`jittered_cholesky`] but tries the matrix unchanged first; for
/// matrices that already carry a noise term on the diagonal.
pub(crate) fn noisy_cholesky(k: &DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, f64)> {
    match k.clone().cholesky() {
        Some(c) => Ok((c.unpack(), 0.0)),
        None => jittered_cholesky(k, scale),
    }
}

pub(crate) fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::identity(n, n);
    let ok = l.solve_lower_triangular_mut(&mut inv);
    debug_assert!(ok, "singular triangular factor");
    inv
}

pub(crate) fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of `l * l^T` from its lower factor.
pub(crate) fn inverse_from_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
    let linv = lower_inverse(l);
    linv.transpose() * &linv
}

/// Solves `l * x = b` for lower-triangular `l`.
pub(crate) fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    let ok = l.solve_lower_triangular_mut(&mut x);
    debug_assert!(ok, "singular triangular factor");
    x
}
