//! The prediction-space adapter.
//!
//! Logits `z` (rows, `M` columns) are projected into a `D`-dimensional latent
//! space by `h = z Wᵀ`, refined by a residual MLP `ĥ = h + MLP(h)`, and mapped
//! back with `ẑ = ĥ W`. `W` (D×M) has orthonormal columns: it is the leading
//! `M` columns of `exp(A)` for a trainable skew-symmetric `A`, optionally
//! left-multiplied by a fixed orthogonal basis installed by a basis change.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::banks::Schema;
use crate::diffkit::{add_row_bias, layer_norm, Activation, NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::numerics::{mat_exp, orthogonality_defect, Matrix, SkewSymmetric};

pub use io::{adapter_load, adapter_serialize, decode_adapter, encode_adapter, ADAPTER_MAGIC, ADAPTER_VERSION};

/// Student (pre-trained side) temperature.
pub const DEFAULT_TAU_STUDENT: f64 = 0.01;
/// Teacher (fine-tuned side) temperature.
pub const DEFAULT_TAU_TEACHER: f64 = 0.005;
/// Standard deviation of the initial skew generator entries.
pub const SKEW_INIT_STD: f64 = 0.02;
/// MLP bottleneck width relative to `D`.
pub const HIDDEN_MULTIPLIER: usize = 4;

/// Orthonormal-column transition matrix and its cached products.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    skew: SkewSymmetric,
    m: usize,
    in_basis: Option<Matrix>,
    out_basis: Option<Matrix>,
    projection: Matrix,
    reconstruction: Matrix,
}

impl TransitionMatrix {
    pub fn new(skew: SkewSymmetric, m: usize) -> Result<Self> {
        Self::with_bases(skew, m, None, None)
    }

    pub fn with_bases(
        skew: SkewSymmetric,
        m: usize,
        in_basis: Option<Matrix>,
        out_basis: Option<Matrix>,
    ) -> Result<Self> {
        let d = skew.dim();
        if m > d {
            return Err(Error::invalid(format!(
                "latent dimension {d} must be at least the logit dimension {m}"
            )));
        }
        for b in [&in_basis, &out_basis].into_iter().flatten() {
            if b.shape() != (d, d) {
                return Err(Error::invalid(format!(
                    "basis must be {d}x{d}, got {:?}",
                    b.shape()
                )));
            }
        }
        let mut t = Self {
            skew,
            m,
            in_basis,
            out_basis,
            projection: Matrix::zeros(0, 0),
            reconstruction: Matrix::zeros(0, 0),
        };
        t.refresh();
        Ok(t)
    }

    fn refresh(&mut self) {
        let core = mat_exp(&self.skew).columns(0, self.m);
        self.projection = match &self.in_basis {
            Some(b) => b.matmul(&core),
            None => core.clone(),
        };
        self.reconstruction = match &self.out_basis {
            Some(b) => b.matmul(&core),
            None => core,
        };
    }

    pub fn d(&self) -> usize {
        self.skew.dim()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn skew(&self) -> &SkewSymmetric {
        &self.skew
    }

    pub fn in_basis(&self) -> Option<&Matrix> {
        self.in_basis.as_ref()
    }

    pub fn out_basis(&self) -> Option<&Matrix> {
        self.out_basis.as_ref()
    }

    /// Matrix whose transpose projects logits into the latent space (D×M).
    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// Matrix mapping latent features back to logits (D×M).
    pub fn reconstruction(&self) -> &Matrix {
        &self.reconstruction
    }

    /// Largest `‖WᵀW − I‖_F` over the projection and reconstruction matrices.
    pub fn orthogonality_defect(&self) -> f64 {
        orthogonality_defect(&self.projection).max(orthogonality_defect(&self.reconstruction))
    }

    /// `W_inᵀ-side · W_out`, i.e. `projectionᵀ · reconstruction` (M×M).
    pub fn round_trip(&self) -> Matrix {
        self.projection.t_matmul(&self.reconstruction)
    }

    /// Left-multiply the projection basis, the reconstruction basis, or both.
    pub(crate) fn rebased(&self, left: &Matrix, projection: bool, reconstruction: bool) -> Result<Self> {
        let apply = |b: &Option<Matrix>, yes: bool| -> Option<Matrix> {
            if !yes {
                return b.clone();
            }
            Some(match b {
                Some(b) => left.matmul(b),
                None => left.clone(),
            })
        };
        Self::with_bases(
            self.skew.clone(),
            self.m,
            apply(&self.in_basis, projection),
            apply(&self.out_basis, reconstruction),
        )
    }

    fn record(&self, tape: &mut Tape) -> (NodeId, NodeId) {
        let a = tape.param(ParamId::Skew, self.skew.as_matrix().clone());
        let e = tape.mat_exp(a);
        let core = tape.slice_cols(e, 0, self.m);
        let mut lift = |b: &Option<Matrix>| match b {
            Some(b) => {
                let c = tape.constant(b.clone());
                tape.matmul(c, core)
            }
            None => core,
        };
        let p = lift(&self.in_basis);
        let r = lift(&self.out_basis);
        (p, r)
    }
}

/// Residual branch `[layernorm, linear, activation, linear]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMlp {
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub activation: Activation,
}

impl ResidualMlp {
    /// Layer norm at (1, 0), first linear layer uniform in ±1/√D, last layer zero.
    pub fn init(d: usize, hidden: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut uniform = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        let w1 = uniform(d, hidden);
        let b1 = uniform(1, hidden);
        Self {
            ln_gain: Matrix::from_fn(1, d, |_, _| 1.0),
            ln_bias: Matrix::zeros(1, d),
            w1,
            b1,
            w2: Matrix::zeros(hidden, d),
            b2: Matrix::zeros(1, d),
            activation,
        }
    }

    pub fn d(&self) -> usize {
        self.ln_gain.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// The residual branch alone.
    pub fn branch(&self, h: &Matrix) -> Matrix {
        let (n, _, _) = layer_norm(h, &self.ln_gain, &self.ln_bias);
        let u = add_row_bias(&n.matmul(&self.w1), &self.b1);
        let act = self.activation;
        let a = u.map(|v| act.apply(v));
        add_row_bias(&a.matmul(&self.w2), &self.b2)
    }

    /// `f(h) = h + MLP(h)`.
    pub fn apply(&self, h: &Matrix) -> Matrix {
        h.add(&self.branch(h))
    }

    fn record(&self, tape: &mut Tape, h: NodeId) -> NodeId {
        let gain = tape.param(ParamId::LnGain, self.ln_gain.clone());
        let bias = tape.param(ParamId::LnBias, self.ln_bias.clone());
        let w1 = tape.param(ParamId::W1, self.w1.clone());
        let b1 = tape.param(ParamId::B1, self.b1.clone());
        let w2 = tape.param(ParamId::W2, self.w2.clone());
        let b2 = tape.param(ParamId::B2, self.b2.clone());
        let n = tape.layer_norm(h, gain, bias);
        let u = tape.matmul(n, w1);
        let u = tape.add_row_bias(u, b1);
        let a = tape.activation(u, self.activation);
        let o = tape.matmul(a, w2);
        let o = tape.add_row_bias(o, b2);
        tape.add(h, o)
    }
}

/// Where a transferred adapter came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_model_id: String,
    pub target_model_id: String,
    pub beta: f64,
    pub mode: String,
    pub basis_feature: String,
    pub apply: String,
    pub logit_slice: String,
}

/// Hyper-parameters needed to build a fresh adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d: usize,
    pub activation: Activation,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn new(d: usize, seed: u64) -> Self {
        Self {
            d,
            activation: Activation::GeluTanh,
            tau_student: DEFAULT_TAU_STUDENT,
            tau_teacher: DEFAULT_TAU_TEACHER,
            seed,
        }
    }
}

/// The complete adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub transition: TransitionMatrix,
    pub mlp: ResidualMlp,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub schema: Schema,
    pub provenance: Option<Provenance>,
}

impl Adapter {
    pub fn init(config: &AdapterConfig, schema: Schema) -> Result<Self> {
        let m = schema.len();
        let d = config.d;
        if m < 2 {
            return Err(Error::invalid(format!("logit dimension must be at least 2, got {m}")));
        }
        if d < m {
            return Err(Error::invalid(format!(
                "latent dimension {d} is smaller than logit dimension {m}"
            )));
        }
        check_temperature("student", config.tau_student)?;
        check_temperature("teacher", config.tau_teacher)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, SKEW_INIT_STD).expect("valid normal");
        let skew = SkewSymmetric::from_upper(d, |_, _| normal.sample(&mut rng));
        let transition = TransitionMatrix::new(skew, m)?;
        let mlp = ResidualMlp::init(d, HIDDEN_MULTIPLIER * d, config.activation, &mut rng);
        Ok(Self {
            transition,
            mlp,
            tau_student: config.tau_student,
            tau_teacher: config.tau_teacher,
            schema,
            provenance: None,
        })
    }

    pub fn d(&self) -> usize {
        self.transition.d()
    }

    pub fn m(&self) -> usize {
        self.transition.m()
    }

    pub fn n_task(&self) -> usize {
        self.schema.n_task()
    }

    fn check_input(&self, z: &Matrix) -> Result<()> {
        if z.cols() != self.m() {
            return Err(Error::invalid(format!(
                "expected logits with M = {} columns, got {}",
                self.m(),
                z.cols()
            )));
        }
        Ok(())
    }

    /// `h = z · projectionᵀ`.
    pub fn latent(&self, z: &Matrix) -> Result<Matrix> {
        self.check_input(z)?;
        Ok(z.matmul_t(self.transition.projection()))
    }

    /// `ẑ = f(z Wᵀ) W`.
    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        let h = self.latent(z)?;
        Ok(self.mlp.apply(&h).matmul(self.transition.reconstruction()))
    }

    /// Record the forward pass on `tape`; returns the refined-logit node.
    pub fn record(&self, tape: &mut Tape, z: &Matrix) -> Result<NodeId> {
        self.check_input(z)?;
        let (projection, reconstruction) = self.transition.record(tape);
        let zin = tape.constant(z.clone());
        let h = tape.matmul_t(zin, projection);
        let hh = self.mlp.record(tape, h);
        Ok(tape.matmul(hh, reconstruction))
    }

    pub fn param(&self, id: ParamId) -> &Matrix {
        match id {
            ParamId::Skew => self.transition.skew.as_matrix(),
            ParamId::LnGain => &self.mlp.ln_gain,
            ParamId::LnBias => &self.mlp.ln_bias,
            ParamId::W1 => &self.mlp.w1,
            ParamId::B1 => &self.mlp.b1,
            ParamId::W2 => &self.mlp.w2,
            ParamId::B2 => &self.mlp.b2,
        }
    }

    /// Mutate parameters in place, then rebuild the transition cache. The
    /// skew generator must remain skew-symmetric.
    pub fn update_params(&mut self, mut f: impl FnMut(ParamId, &mut Matrix)) -> Result<()> {
        for id in ParamId::ALL {
            let slot = match id {
                ParamId::Skew => self.transition.skew.matrix_mut(),
                ParamId::LnGain => &mut self.mlp.ln_gain,
                ParamId::LnBias => &mut self.mlp.ln_bias,
                ParamId::W1 => &mut self.mlp.w1,
                ParamId::B1 => &mut self.mlp.b1,
                ParamId::W2 => &mut self.mlp.w2,
                ParamId::B2 => &mut self.mlp.b2,
            };
            f(id, slot);
        }
        let skew = SkewSymmetric::new(self.transition.skew.as_matrix().clone())?;
        self.transition.skew = skew;
        self.transition.refresh();
        Ok(())
    }

    /// Error unless `schema` matches the one this adapter was trained on.
    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        self.schema.check_matches(schema)
    }
}

fn check_temperature(name: &str, t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("{name} temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Convenience: fresh adapter over a generic `M`-class schema, all classes task classes.
pub fn adapter_init(d: usize, m: usize, seed: u64) -> Result<Adapter> {
    let names = (0..m).map(|i| format!("class_{i}")).collect();
    Adapter::init(&AdapterConfig::new(d, seed), Schema::new(names, m)?)
}
