//! Temperature-scaled softmax losses on logit rows.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// `log softmax(z / tau)`.
pub fn log_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) / tau;
    let shifted: Vec<f64> = z.iter().map(|v| v / tau - max).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    log_softmax(z, tau).into_iter().map(f64::exp).collect()
}

fn check_pair(a: usize, b: usize, tau_teacher: f64, tau_student: f64) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!(
            "teacher and student logits differ in length: {a} vs {b}"
        )));
    }
    if a < 2 {
        return Err(Error::invalid("KL loss needs at least two classes"));
    }
    for (name, t) in [("teacher", tau_teacher), ("student", tau_student)] {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::invalid(format!(
                "{name} temperature must be positive, got {t}"
            )));
        }
    }
    Ok(())
}

/// `KL(softmax(z_t/τ_t) ‖ softmax(z_s/τ_s))`.
pub fn kl_loss(z_teacher: &[f64], z_student: &[f64], tau_teacher: f64, tau_student: f64) -> Result<f64> {
    check_pair(z_teacher.len(), z_student.len(), tau_teacher, tau_student)?;
    Ok(kl_row(z_teacher, z_student, tau_teacher, tau_student))
}

pub(crate) fn kl_row(z_teacher: &[f64], z_student: &[f64], tau_teacher: f64, tau_student: f64) -> f64 {
    let lp = log_softmax(z_teacher, tau_teacher);
    let lq = log_softmax(z_student, tau_student);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum();
    kl.max(0.0)
}

/// Gradient of [`kl_loss`] with respect to the student logits: `(q − p) / τ_s`.
pub fn kl_loss_grad(
    z_teacher: &[f64],
    z_student: &[f64],
    tau_teacher: f64,
    tau_student: f64,
) -> Result<Vec<f64>> {
    check_pair(z_teacher.len(), z_student.len(), tau_teacher, tau_student)?;
    Ok(kl_row_grad(z_teacher, z_student, tau_teacher, tau_student))
}

pub(crate) fn kl_row_grad(z_teacher: &[f64], z_student: &[f64], tau_teacher: f64, tau_student: f64) -> Vec<f64> {
    let p = softmax(z_teacher, tau_teacher);
    let q = softmax(z_student, tau_student);
    q.iter()
        .zip(&p)
        .map(|(q, p)| (q - p) / tau_student)
        .collect()
}

/// Mean KL over the rows of two equally shaped logit matrices.
pub fn kl_loss_batch(teacher: &Matrix, student: &Matrix, tau_teacher: f64, tau_student: f64) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::invalid(format!(
            "teacher {:?} and student {:?} logit matrices differ in shape",
            teacher.shape(),
            student.shape()
        )));
    }
    check_pair(teacher.cols(), student.cols(), tau_teacher, tau_student)?;
    if teacher.rows() == 0 {
        return Err(Error::invalid("KL loss over an empty batch"));
    }
    let total: f64 = (0..teacher.rows())
        .map(|i| kl_row(teacher.row(i), student.row(i), tau_teacher, tau_student))
        .sum();
    Ok(total / teacher.rows() as f64)
}

/// Cross-entropy of `softmax(z/τ)` against class `label`.
pub fn cross_entropy(z: &[f64], label: usize, tau: f64) -> f64 {
    -log_softmax(z, tau)[label]
}

pub(crate) fn cross_entropy_grad(z: &[f64], label: usize, tau: f64) -> Vec<f64> {
    let mut q = softmax(z, tau);
    q[label] -= 1.0;
    q.iter_mut().for_each(|v| *v /= tau);
    q
}
