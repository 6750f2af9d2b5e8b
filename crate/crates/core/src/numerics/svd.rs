//! Thin singular value decomposition by one-sided (Hestenes) Jacobi.
//!
//! Column pairs are visited in round-robin order; the pairs of one round are
//! disjoint, so they are rotated concurrently when the `parallel` feature is on.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};
use crate::par;

/// Relative off-orthogonality below which a column pair counts as converged.
pub const JACOBI_TOLERANCE: f64 = 1e-15;

/// Maximum number of full sweeps before giving up.
pub const MAX_SWEEPS: usize = 80;

/// `A = U · diag(S) · Vᵀ` with `U: m×k`, `V: n×k`, `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::invalid("svd input is not finite"));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }
    svd_tall(a)
}

/// Round-robin schedule: `n` (padded to even) players, `n − 1` rounds of disjoint pairs.
fn round_robin(n: usize) -> Vec<Vec<(usize, usize)>> {
    let size = n + n % 2;
    let mut ring: Vec<usize> = (0..size).collect();
    let mut rounds = Vec::with_capacity(size.saturating_sub(1));
    for _ in 0..size.saturating_sub(1) {
        let mut pairs = Vec::with_capacity(size / 2);
        for k in 0..size / 2 {
            let (p, q) = (ring[k], ring[size - 1 - k]);
            if p < n && q < n {
                pairs.push((p.min(q), p.max(q)));
            }
        }
        rounds.push(pairs);
        ring[1..].rotate_right(1);
    }
    rounds
}

struct Rotated {
    p: usize,
    q: usize,
    cols: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
    off: f64,
}

fn rotate_pair(cols: &[Vec<f64>], vcols: &[Vec<f64>], p: usize, q: usize) -> Rotated {
    let (ap, aq) = (&cols[p], &cols[q]);
    let alpha = dot(ap, ap);
    let beta = dot(aq, aq);
    let gamma = dot(ap, aq);
    let scale = (alpha * beta).sqrt();
    let off = if scale > 0.0 { gamma.abs() / scale } else { 0.0 };
    if gamma == 0.0 || off <= JACOBI_TOLERANCE {
        return Rotated { p, q, cols: None, off };
    }
    let zeta = (beta - alpha) / (2.0 * gamma);
    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = c * t;
    let rot = |x: &[f64], y: &[f64]| -> (Vec<f64>, Vec<f64>) {
        x.iter()
            .zip(y)
            .map(|(&xi, &yi)| (c * xi - s * yi, s * xi + c * yi))
            .unzip()
    };
    let (np, nq) = rot(ap, aq);
    let (vp, vq) = rot(&vcols[p], &vcols[q]);
    Rotated {
        p,
        q,
        cols: Some((np, nq, vp, vq)),
        off,
    }
}

fn svd_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let at = a.transpose();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| at.row(j).to_vec()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let schedule = round_robin(n);
    let parallel = m * n >= 4096;
    let mut converged = n < 2;
    let mut worst = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated_any = false;
        worst = 0.0;
        for pairs in &schedule {
            let results: Vec<Rotated> = if parallel {
                par::map_indices(pairs.len(), |k| {
                    let (p, q) = pairs[k];
                    rotate_pair(&cols, &vcols, p, q)
                })
            } else {
                pairs
                    .iter()
                    .map(|&(p, q)| rotate_pair(&cols, &vcols, p, q))
                    .collect()
            };
            for r in results {
                worst = worst.max(r.off);
                if let Some((np, nq, vp, vq)) = r.cols {
                    rotated_any = true;
                    cols[r.p] = np;
                    cols[r.q] = nq;
                    vcols[r.p] = vp;
                    vcols[r.q] = vq;
                }
            }
        }
        converged = !rotated_any;
    }
    if !converged {
        return Err(Error::NumericFailure {
            message: format!("one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"),
            residual: worst,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = norms.iter().cloned().fold(0.0, f64::max);
    let cutoff = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        singular_values.push(norms[j]);
        if norms[j] > cutoff && norms[j] > 0.0 {
            let inv = 1.0 / norms[j];
            ucols.push(cols[j].iter().map(|v| v * inv).collect());
        } else {
            ucols.push(Vec::new());
            deficient.push(slot);
        }
    }
    complete_basis(&mut ucols, &deficient, m);

    let u = Matrix::from_fn(m, n, |i, k| ucols[k][i]);
    let v = Matrix::from_fn(n, n, |i, k| vcols[order[k]][i]);
    Ok(Svd {
        u,
        singular_values,
        v,
    })
}

/// Fill the `missing` slots with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0usize;
    for &slot in missing {
        loop {
            assert!(candidate < m, "cannot complete orthonormal basis");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram–Schmidt passes.
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.is_empty() {
                        continue;
                    }
                    let d = dot(&e, c);
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= d * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                for ei in &mut e {
                    *ei /= norm;
                }
                cols[slot] = e;
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::orthogonality_defect;

    fn check(a: &Matrix) -> Svd {
        let d = svd(a).unwrap();
        let recon = d.reconstruct();
        assert!(
            recon.sub(a).frobenius_norm() <= 1e-9 * a.frobenius_norm().max(1e-300),
            "reconstruction"
        );
        assert!(orthogonality_defect(&d.u) < 1e-10);
        assert!(orthogonality_defect(&d.v) < 1e-10);
        assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.singular_values.iter().all(|s| *s >= 0.0));
        d
    }

    #[test]
    fn identity() {
        let d = check(&Matrix::identity(3));
        assert_eq!(d.singular_values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn rank_deficient_diagonal() {
        let a = Matrix::diag(&[3.0, 0.0]);
        let d = check(&a);
        assert_eq!(d.singular_values, vec![3.0, 0.0]);
        assert_eq!(d.reconstruct(), a);
    }

    #[test]
    fn two_by_two_values() {
        // Singular values are square roots of the eigenvalues of AᵀA = [[10,14],[14,20]]:
        // λ = 15 ± √221.
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let d = check(&a);
        let disc = 221f64.sqrt();
        assert!((d.singular_values[0] - (15.0 + disc).sqrt()).abs() < 1e-12);
        assert!((d.singular_values[1] - (15.0 - disc).sqrt()).abs() < 1e-12);
        assert!((d.singular_values[0] - 5.46499).abs() < 1e-5);
        assert!((d.singular_values[1] - 0.36597).abs() < 1e-5);
    }

    #[test]
    fn wide_and_tall() {
        let a = Matrix::from_fn(3, 7, |i, j| ((i * 7 + j) as f64).sin());
        let d = check(&a);
        assert_eq!(d.u.shape(), (3, 3));
        assert_eq!(d.v.shape(), (7, 3));
        check(&a.transpose());
    }

    #[test]
    fn zero_matrix() {
        let d = check(&Matrix::zeros(4, 4));
        assert!(d.singular_values.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn large_parallel_path() {
        let a = Matrix::from_fn(80, 80, |i, j| ((i * 31 + j * 17) as f64 * 0.37).cos());
        check(&a);
    }

    #[test]
    fn schedule_covers_all_pairs() {
        for n in 1..9 {
            let mut seen = std::collections::BTreeSet::new();
            for round in round_robin(n) {
                let mut used = std::collections::BTreeSet::new();
                for (p, q) in round {
                    assert!(used.insert(p) && used.insert(q));
                    assert!(seen.insert((p, q)));
                }
            }
            assert_eq!(seen.len(), n * (n - 1) / 2);
        }
    }
}
