//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::diffkit::{GradientSet, ParamId};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl OptimizerState {
    /// Zero moments for parameters of the given shapes.
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }

    /// Moments for every adapter parameter, in [`ParamId::ALL`] order.
    pub fn for_adapter(adapter: &Adapter) -> Self {
        let shapes: Vec<_> = ParamId::ALL.iter().map(|&id| adapter.param(id).shape()).collect();
        Self::new(&shapes)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Matrix {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Matrix {
        &self.second[index]
    }
}

fn update(param: &mut Matrix, grad: &Matrix, m: &mut Matrix, v: &mut Matrix, step: u64, hp: &AdamWConfig) {
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    let theta = param.data_mut();
    for (((t, &g), m), v) in theta
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *t -= hp.learning_rate * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * *t);
    }
}

/// One AdamW step over parallel slices of parameters and gradients.
pub fn adamw_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    hp: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[k].shape() {
            return Err(Error::invalid(format!(
                "parameter {k}: shape {:?}, gradient {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.first[k].shape()
            )));
        }
    }
    state.step += 1;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        update(p, g, &mut state.first[k], &mut state.second[k], state.step, hp);
    }
    Ok(())
}

/// Apply one step to every adapter parameter. The skew gradient is antisymmetric
/// and every operation is elementwise and sign-symmetric, so the generator
/// stays exactly skew-symmetric.
pub(crate) fn step_adapter(
    adapter: &mut Adapter,
    grads: &GradientSet,
    state: &mut OptimizerState,
    hp: &AdamWConfig,
) -> Result<()> {
    for (k, &id) in ParamId::ALL.iter().enumerate() {
        let g = grads
            .get(id)
            .ok_or_else(|| Error::invalid(format!("missing gradient for {id}")))?;
        if g.shape() != adapter.param(id).shape() || g.shape() != state.first[k].shape() {
            return Err(Error::invalid(format!("gradient shape mismatch for {id}")));
        }
    }
    state.step += 1;
    let step = state.step;
    adapter.update_params(|id, p| {
        let k = ParamId::ALL.iter().position(|&x| x == id).expect("known parameter");
        let g = grads.get(id).expect("checked above");
        update(p, g, &mut state.first[k], &mut state.second[k], step, hp);
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::new(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Matrix::from_fn(2, 3, |i, j| (i + j) as f64 - 1.5)];
        let before = p.clone();
        let mut st = OptimizerState::new(&[(2, 3)]);
        adamw_step(&mut p, &[Matrix::zeros(2, 3)], &mut st, &AdamWConfig::new(0.01, 0.0)).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = vec![Matrix::from_fn(2, 2, |i, j| 1.0 + (i * 2 + j) as f64)];
        let before = p[0].clone();
        let mut st = OptimizerState::new(&[(2, 2)]);
        adamw_step(&mut p, &[Matrix::zeros(2, 2)], &mut st, &AdamWConfig::new(0.01, 0.1)).unwrap();
        assert!(p[0].max_abs_diff(&before.scale(1.0 - 0.001)) < 1e-15);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = vec![scalar(1.0)];
        let mut st = OptimizerState::new(&[(1, 1)]);
        adamw_step(&mut p, &[scalar(1.0)], &mut st, &AdamWConfig::new(0.1, 0.0)).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0][(0, 0)] - expected).abs() < 1e-15);
        assert!((p[0][(0, 0)] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![scalar(1.0)];
        let mut st = OptimizerState::new(&[(1, 1)]);
        let hp = AdamWConfig::new(0.1, 0.0);
        assert!(adamw_step(&mut p, &[Matrix::zeros(1, 2)], &mut st, &hp).is_err());
        assert!(adamw_step(&mut p, &[], &mut st, &hp).is_err());
        assert_eq!(st.step(), 0);
    }
}
