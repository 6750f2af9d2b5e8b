//! Regularized orthogonal Procrustes.
//!
//! `argmin_{WᵀW = I} ‖H_t W − H_s‖² + β‖W − I‖²` expands to
//! `argmax tr(Wᵀ(H_tᵀH_s + βI))`, solved by `W = U Vᵀ` from the SVD of the
//! regularized cross matrix. Reflections are admitted.

use super::matrix::Matrix;
use super::svd::{svd, Svd};
use crate::error::{Error, Result};

/// Solution of a Procrustes problem together with the decomposition it came from.
#[derive(Clone, Debug)]
pub struct ProcrustesSolution {
    pub rotation: Matrix,
    pub cross: Matrix,
    pub svd: Svd,
}

impl ProcrustesSolution {
    /// `tr(Ŵᵀ C)`, the maximized objective.
    pub fn objective(&self) -> f64 {
        trace_objective(&self.rotation, &self.cross)
    }

    /// Number of singular values of the cross matrix that are numerically zero.
    pub fn null_directions(&self) -> usize {
        let s = &self.svd.singular_values;
        let top = s.first().copied().unwrap_or(0.0);
        let cutoff = top * s.len() as f64 * 1e-12;
        s.iter().filter(|v| **v <= cutoff).count()
    }
}

/// `tr(Wᵀ C)`.
pub fn trace_objective(w: &Matrix, c: &Matrix) -> f64 {
    assert_eq!(w.shape(), c.shape());
    w.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// `H_tᵀ H_s + β I`.
pub fn regularized_cross(h_t: &Matrix, h_s: &Matrix, beta: f64) -> Result<Matrix> {
    if h_t.shape() != h_s.shape() {
        return Err(Error::invalid(format!(
            "latent matrices differ in shape: {:?} vs {:?}",
            h_t.shape(),
            h_s.shape()
        )));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!(
            "regularization weight must be finite and non-negative, got {beta}"
        )));
    }
    if !h_t.is_finite() || !h_s.is_finite() {
        return Err(Error::invalid("latent matrices must be finite"));
    }
    Ok(h_t.t_matmul(h_s).add_identity(beta))
}

pub fn solve_procrustes_full(h_t: &Matrix, h_s: &Matrix, beta: f64) -> Result<ProcrustesSolution> {
    let cross = regularized_cross(h_t, h_s, beta)?;
    let decomposition = svd(&cross)?;
    let rotation = decomposition.u.matmul_t(&decomposition.v);
    let sol = ProcrustesSolution {
        rotation,
        cross,
        svd: decomposition,
    };
    let nulls = sol.null_directions();
    if nulls > 0 {
        log::warn!(
            "cross matrix is rank deficient ({nulls} null directions); Procrustes solution is not unique"
        );
    }
    Ok(sol)
}

/// Orthogonal `Ŵ` aligning `H_t Ŵ ≈ H_s`, shrunk toward identity by `beta`.
pub fn solve_procrustes(h_t: &Matrix, h_s: &Matrix, beta: f64) -> Result<Matrix> {
    Ok(solve_procrustes_full(h_t, h_s, beta)?.rotation)
}
