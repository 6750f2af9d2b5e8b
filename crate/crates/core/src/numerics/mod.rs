//! Dense linear algebra: matrices, matrix exponential, SVD, Procrustes.

mod expm;
mod matrix;
mod procrustes;
mod svd;

pub use expm::{expm, mat_exp, squarings_for, SCALED_NORM_LIMIT, TAYLOR_ORDER};
pub(crate) use matrix::dot;
pub use matrix::{Exec, Matrix, SkewSymmetric, SKEW_TOLERANCE};
pub use procrustes::{
    regularized_cross, solve_procrustes, solve_procrustes_full, trace_objective,
    ProcrustesSolution,
};
pub use svd::{svd, Svd, JACOBI_TOLERANCE, MAX_SWEEPS};

/// `‖WᵀW − I‖_F`.
pub fn orthogonality_defect(w: &Matrix) -> f64 {
    w.t_matmul(w).add_identity(-1.0).frobenius_norm()
}
