//! Finite-difference verification of the backward rules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::loss::kl_loss_batch;
use super::tape::{backprop, Activation, BackwardFault, GradientSet, ParamId, Tape};
use crate::adapter::{adapter_init, Adapter};
use crate::error::Result;
use crate::numerics::{Matrix, SkewSymmetric};

/// Maximum accepted relative error between analytic and numeric gradients.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// `‖a − n‖_∞ / max(‖a‖_∞, ‖n‖_∞)`; zero when both vanish.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    analytic.max_abs_diff(numeric) / scale
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub d: usize,
    pub m: usize,
    pub batch: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub activation: Activation,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            d: 6,
            m: 6,
            batch: 4,
            seed: 3,
            step: 1e-6,
            tau_teacher: 0.5,
            tau_student: 0.7,
            activation: Activation::GeluTanh,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub errors: Vec<(ParamId, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }
}

/// Adapter with every parameter randomized (including the zero-initialized
/// last layer), plus random input and teacher logits.
pub(crate) fn random_problem(config: &GradCheckConfig) -> Result<(Adapter, Matrix, Matrix)> {
    let mut adapter = adapter_init(config.d, config.m, config.seed)?;
    adapter.mlp.activation = config.activation;
    adapter.tau_teacher = config.tau_teacher;
    adapter.tau_student = config.tau_student;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
    let normal = Normal::new(0.0, 0.3).expect("valid normal");
    let skew = SkewSymmetric::from_upper(config.d, |_, _| normal.sample(&mut rng));
    adapter.update_params(|id, p| {
        if id == ParamId::Skew {
            *p = skew.as_matrix().clone();
            return;
        }
        for v in p.data_mut() {
            *v += normal.sample(&mut rng);
        }
    })?;
    let uniform = Uniform::new(-1.0, 1.0).expect("valid range");
    let z = Matrix::from_fn(config.batch, config.m, |_, _| uniform.sample(&mut rng));
    let teacher = Matrix::from_fn(config.batch, config.m, |_, _| uniform.sample(&mut rng));
    Ok((adapter, z, teacher))
}

pub(crate) fn adapter_loss(adapter: &Adapter, z: &Matrix, teacher: &Matrix) -> Result<f64> {
    let out = adapter.forward(z)?;
    kl_loss_batch(teacher, &out, adapter.tau_teacher, adapter.tau_student)
}

pub(crate) fn adapter_gradients(
    adapter: &Adapter,
    z: &Matrix,
    teacher: &Matrix,
    fault: Option<BackwardFault>,
) -> Result<GradientSet> {
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let out = adapter.record(&mut tape, z)?;
    tape.kl_loss(out, teacher.clone(), adapter.tau_teacher, adapter.tau_student)?;
    backprop(&tape, 1.0)
}

/// Central differences of the adapter loss for every parameter entry. The
/// skew generator is perturbed antisymmetrically, one upper-triangle
/// coordinate at a time.
pub(crate) fn numeric_gradients(
    adapter: &Adapter,
    z: &Matrix,
    teacher: &Matrix,
    step: f64,
) -> Result<GradientSet> {
    let mut out = Vec::new();
    for id in ParamId::ALL {
        let p = adapter.param(id);
        let (rows, cols) = p.shape();
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                if id == ParamId::Skew && j <= i {
                    continue;
                }
                let eval = |delta: f64| -> Result<f64> {
                    let mut a = adapter.clone();
                    a.update_params(|pid, m| {
                        if pid == id {
                            m[(i, j)] += delta;
                            if id == ParamId::Skew {
                                m[(j, i)] -= delta;
                            }
                        }
                    })?;
                    adapter_loss(&a, z, teacher)
                };
                let d = (eval(step)? - eval(-step)?) / (2.0 * step);
                g[(i, j)] = d;
                if id == ParamId::Skew {
                    g[(j, i)] = -d;
                }
            }
        }
        out.push((id, g));
    }
    Ok(GradientSet::new(out))
}

/// Compare analytic and finite-difference gradients of the full adapter loss.
pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let (adapter, z, teacher) = random_problem(config)?;
    let analytic = adapter_gradients(&adapter, &z, &teacher, config.fault)?;
    let numeric = numeric_gradients(&adapter, &z, &teacher, config.step)?;
    let errors = ParamId::ALL
        .iter()
        .map(|&id| {
            let a = analytic.get(id).expect("analytic gradient");
            let n = numeric.get(id).expect("numeric gradient");
            (id, relative_error(a, n))
        })
        .collect();
    Ok(GradCheckReport {
        errors,
        tolerance: GRAD_CHECK_TOLERANCE,
    })
}

/// Individual primitives covered by [`check_layer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    MatMul,
    MatMulT,
    Add,
    Scale,
    AddIdentity,
    AddRowBias,
    SliceCols,
    LayerNorm,
    Gelu,
    Relu,
    MatExp,
    MatExpAtZero,
    Kl,
    CrossEntropy,
}

impl LayerKind {
    pub const ALL: [LayerKind; 14] = [
        LayerKind::MatMul,
        LayerKind::MatMulT,
        LayerKind::Add,
        LayerKind::Scale,
        LayerKind::AddIdentity,
        LayerKind::AddRowBias,
        LayerKind::SliceCols,
        LayerKind::LayerNorm,
        LayerKind::Gelu,
        LayerKind::Relu,
        LayerKind::MatExp,
        LayerKind::MatExpAtZero,
        LayerKind::Kl,
        LayerKind::CrossEntropy,
    ];

    fn input_shapes(self) -> Vec<(usize, usize)> {
        match self {
            LayerKind::MatMul => vec![(4, 5), (5, 3)],
            LayerKind::MatMulT => vec![(4, 5), (3, 5)],
            LayerKind::Add => vec![(4, 5), (4, 5)],
            LayerKind::Scale | LayerKind::Gelu | LayerKind::Relu | LayerKind::SliceCols => {
                vec![(4, 5)]
            }
            LayerKind::AddIdentity | LayerKind::MatExp | LayerKind::MatExpAtZero => vec![(5, 5)],
            LayerKind::AddRowBias => vec![(4, 5), (1, 5)],
            LayerKind::LayerNorm => vec![(4, 6), (1, 6), (1, 6)],
            LayerKind::Kl | LayerKind::CrossEntropy => vec![(4, 5)],
        }
    }

    fn record(self, inputs: &[Matrix], weights: &Matrix, aux: &Matrix) -> Result<Tape> {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|m| tape.variable(m.clone())).collect();
        let out = match self {
            LayerKind::MatMul => tape.matmul(ids[0], ids[1]),
            LayerKind::MatMulT => tape.matmul_t(ids[0], ids[1]),
            LayerKind::Add => tape.add(ids[0], ids[1]),
            LayerKind::Scale => tape.scale(ids[0], -1.7),
            LayerKind::AddIdentity => tape.add_identity(ids[0], 0.5),
            LayerKind::AddRowBias => tape.add_row_bias(ids[0], ids[1]),
            LayerKind::SliceCols => tape.slice_cols(ids[0], 1, 3),
            LayerKind::LayerNorm => tape.layer_norm(ids[0], ids[1], ids[2]),
            LayerKind::Gelu => tape.activation(ids[0], Activation::GeluTanh),
            LayerKind::Relu => tape.activation(ids[0], Activation::Relu),
            LayerKind::MatExp | LayerKind::MatExpAtZero => tape.mat_exp(ids[0]),
            LayerKind::Kl => {
                tape.kl_loss(ids[0], aux.clone(), 0.4, 0.6)?;
                return Ok(tape);
            }
            LayerKind::CrossEntropy => {
                tape.cross_entropy(ids[0], vec![0, 4, 2, 1], 0.3)?;
                return Ok(tape);
            }
        };
        let w = if tape.value(out).shape() == weights.shape() {
            weights.clone()
        } else {
            let (r, c) = tape.value(out).shape();
            Matrix::from_fn(r, c, |i, j| weights[(i % weights.rows(), j % weights.cols())])
        };
        tape.weighted_sum(out, w);
        Ok(tape)
    }
}

/// Largest relative error over the inputs of a single primitive.
pub fn check_layer(kind: LayerKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = Uniform::new(-1.0, 1.0).expect("valid range");
    let mut inputs: Vec<Matrix> = kind
        .input_shapes()
        .into_iter()
        .map(|(r, c)| Matrix::from_fn(r, c, |_, _| uniform.sample(&mut rng)))
        .collect();
    match kind {
        LayerKind::MatExp => inputs[0] = inputs[0].scale(0.8),
        LayerKind::MatExpAtZero => inputs[0] = Matrix::zeros(5, 5),
        _ => {}
    }
    let weights = Matrix::from_fn(5, 6, |_, _| uniform.sample(&mut rng));
    let aux = Matrix::from_fn(4, 5, |_, _| uniform.sample(&mut rng));

    let tape = kind.record(&inputs, &weights, &aux)?;
    let grads = tape.gradients(1.0)?;
    let loss = |inputs: &[Matrix]| -> Result<f64> {
        let t = kind.record(inputs, &weights, &aux)?;
        Ok(t.value(super::tape::NodeId::last(&t))[(0, 0)])
    };
    let step = 1e-6;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Matrix::zeros(input.rows(), input.cols());
        for i in 0..input.rows() {
            for j in 0..input.cols() {
                let mut up = inputs.clone();
                up[k][(i, j)] += step;
                let mut dn = inputs.clone();
                dn[k][(i, j)] -= step;
                numeric[(i, j)] = (loss(&up)? - loss(&dn)?) / (2.0 * step);
            }
        }
        let analytic = grads[k].as_ref().expect("inputs are trainable");
        worst = worst.max(relative_error(analytic, &numeric));
    }
    Ok(worst)
}
