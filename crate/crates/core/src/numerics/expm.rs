//! Matrix exponential by scaling and squaring with a truncated Taylor series.
//!
//! The evaluation order is fixed (scale, Horner steps, squarings) so the
//! reverse-mode tape in `diffkit` can replay exactly the same primitives.

use super::matrix::{Matrix, SkewSymmetric};
use crate::error::{Error, Result};

/// Truncation order of the Taylor series.
pub const TAYLOR_ORDER: usize = 10;

/// The input is halved until its Frobenius norm is at most this value.
pub const SCALED_NORM_LIMIT: f64 = 0.5;

/// Number of squarings needed so that `norm / 2^s <= SCALED_NORM_LIMIT`.
pub fn squarings_for(norm: f64) -> u32 {
    let mut s = 0u32;
    let mut scaled = norm;
    while scaled > SCALED_NORM_LIMIT {
        scaled *= 0.5;
        s += 1;
    }
    s
}

/// `exp(a)` for any finite square matrix.
pub fn expm(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::invalid("matrix exponential input is not finite"));
    }
    Ok(expm_unchecked(a))
}

/// `exp(a)` for a skew-symmetric generator; the result is orthogonal.
pub fn mat_exp(a: &SkewSymmetric) -> Matrix {
    expm_unchecked(a.as_matrix())
}

fn expm_unchecked(a: &Matrix) -> Matrix {
    let s = squarings_for(a.frobenius_norm());
    let x = a.scale(0.5f64.powi(s as i32));
    let mut p = taylor_horner(&x);
    for _ in 0..s {
        p = p.matmul(&p);
    }
    p
}

/// `I + X + X²/2! + … + X^10/10!` in nested Horner form.
pub(crate) fn taylor_horner(x: &Matrix) -> Matrix {
    let mut p = x.scale(1.0 / TAYLOR_ORDER as f64).add_identity(1.0);
    for k in (1..TAYLOR_ORDER).rev() {
        p = x.matmul(&p).scale(1.0 / k as f64).add_identity(1.0);
    }
    p
}
