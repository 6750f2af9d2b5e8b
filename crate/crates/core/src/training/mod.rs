//! Adapter training: distillation from the fine-tuned weak model, and the
//! supervised refinement that follows a transfer.

mod adamw;

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterConfig, DEFAULT_TAU_STUDENT, DEFAULT_TAU_TEACHER};
use crate::banks::LogitBank;
use crate::diffkit::{backprop, kl_loss_batch, Activation, Tape};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};

/// Largest orthogonality defect tolerated after an optimizer step.
pub const ORTHOGONALITY_LIMIT: f64 = 1e-8;

/// Which logit columns the distillation loss covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSlice {
    TaskOnly,
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub loss_slice: LossSlice,
    pub seed: u64,
    /// Latent width `D`; `None` uses `M`.
    pub latent_dim: Option<usize>,
    pub activation: Activation,
    pub tau_student: f64,
    pub tau_teacher: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            batch_size: 256,
            noise_sigma: 0.01,
            loss_slice: LossSlice::Full,
            seed: 0,
            latent_dim: None,
            activation: Activation::GeluTanh,
            tau_student: DEFAULT_TAU_STUDENT,
            tau_teacher: DEFAULT_TAU_TEACHER,
        }
    }
}

fn check_common(epochs: usize, lr: f64, wd: f64, batch: usize, sigma: f64) -> Result<()> {
    if epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if batch == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    for (name, v) in [("learning_rate", lr), ("weight_decay", wd), ("noise_sigma", sigma)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(
            self.epochs,
            self.learning_rate,
            self.weight_decay,
            self.batch_size,
            self.noise_sigma,
        )
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: f64,
}

/// Per-step information passed to an observer.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: u64,
    pub batch_loss: f64,
    pub orthogonality_defect: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Epoch 0 is the untrained adapter; epoch `e` is measured after the `e`-th pass.
    pub log: Vec<EpochRecord>,
    pub steps: u64,
    pub max_orthogonality_defect: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.log.first().map_or(f64::NAN, |r| r.mean_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.mean_loss)
    }

    /// The log as line-delimited JSON.
    pub fn to_json_lines(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// `z + σ·N(0, 1)` elementwise, seeded. `σ = 0` returns `z` unchanged.
pub fn add_noise(z: &Matrix, sigma: f64, seed: u64) -> Matrix {
    add_noise_with(z, sigma, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn add_noise_with(z: &Matrix, sigma: f64, rng: &mut impl Rng) -> Matrix {
    if sigma == 0.0 {
        return z.clone();
    }
    z.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
}

fn loss_columns(z: &Matrix, slice: LossSlice, n_task: usize) -> Matrix {
    match slice {
        LossSlice::Full => z.clone(),
        LossSlice::TaskOnly => z.columns(0, n_task),
    }
}

/// Noise-free mean distillation loss of `adapter` over the full banks.
pub fn distillation_loss(
    adapter: &Adapter,
    student: &Matrix,
    teacher: &Matrix,
    slice: LossSlice,
) -> Result<f64> {
    let n_task = adapter.n_task();
    let out = adapter.forward(student)?;
    kl_loss_batch(
        &loss_columns(teacher, slice, n_task),
        &loss_columns(&out, slice, n_task),
        adapter.tau_teacher,
        adapter.tau_student,
    )
}

fn training_loss(tape: &mut Tape, adapter: &Adapter, z: &Matrix, teacher: &Matrix, slice: LossSlice) -> Result<()> {
    let out = adapter.record(tape, z)?;
    let out = match slice {
        LossSlice::Full => out,
        LossSlice::TaskOnly => tape.slice_cols(out, 0, adapter.n_task()),
    };
    tape.kl_loss(
        out,
        loss_columns(teacher, slice, adapter.n_task()),
        adapter.tau_teacher,
        adapter.tau_student,
    )?;
    Ok(())
}

fn check_defect(adapter: &Adapter, epoch: usize) -> Result<f64> {
    let defect = adapter.transition.orthogonality_defect();
    if !(defect < ORTHOGONALITY_LIMIT) {
        return Err(Error::NumericFailure {
            message: format!("transition lost orthonormal columns in epoch {epoch}"),
            residual: defect,
        });
    }
    Ok(defect)
}

/// Train a fresh adapter so that refined `weak_pt` logits match `weak_ft`.
pub fn extract_adaptation(weak_pt: &LogitBank, weak_ft: &LogitBank, config: &TrainConfig) -> Result<Adapter> {
    extract_adaptation_with(weak_pt, weak_ft, config, |_| {}).map(|(a, _)| a)
}

/// [`extract_adaptation`] with a per-step observer and the full report.
pub fn extract_adaptation_with(
    weak_pt: &LogitBank,
    weak_ft: &LogitBank,
    config: &TrainConfig,
    mut observer: impl FnMut(&StepInfo),
) -> Result<(Adapter, TrainReport)> {
    config.validate()?;
    weak_pt.check_aligned(weak_ft)?;
    let m = weak_pt.schema.len();
    let adapter_config = AdapterConfig {
        d: config.latent_dim.unwrap_or(m),
        activation: config.activation,
        tau_student: config.tau_student,
        tau_teacher: config.tau_teacher,
        seed: config.seed,
    };
    let mut adapter = Adapter::init(&adapter_config, weak_pt.schema.clone())?;
    let hp = AdamWConfig::new(config.learning_rate, config.weight_decay);
    let (student, teacher) = (&weak_pt.logits, &weak_ft.logits);
    let mut report = TrainReport::default();
    let mut max_defect = check_defect(&adapter, 0)?;
    if student.rows() == 0 {
        warn!("no training samples; returning the initialized adapter");
        return Ok((adapter, report));
    }
    let start = Instant::now();
    report.log.push(EpochRecord {
        epoch: 0,
        mean_loss: distillation_loss(&adapter, student, teacher, config.loss_slice)?,
        wall_ms: 0.0,
    });
    let mut state = OptimizerState::for_adapter(&adapter);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..student.rows()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let z = add_noise_with(&student.select_rows(batch), config.noise_sigma, &mut rng);
            let t = teacher.select_rows(batch);
            let mut tape = Tape::new();
            training_loss(&mut tape, &adapter, &z, &t, config.loss_slice)?;
            let batch_loss = tape.value(crate::diffkit::NodeId::last(&tape))[(0, 0)];
            let grads = backprop(&tape, 1.0)?;
            if !grads.is_finite() {
                return Err(Error::NumericFailure {
                    message: format!("non-finite gradient in epoch {epoch}"),
                    residual: f64::NAN,
                });
            }
            adamw::step_adapter(&mut adapter, &grads, &mut state, &hp)?;
            let defect = check_defect(&adapter, epoch)?;
            max_defect = max_defect.max(defect);
            observer(&StepInfo {
                epoch,
                step: state.step(),
                batch_loss,
                orthogonality_defect: defect,
            });
        }
        let mean_loss = distillation_loss(&adapter, student, teacher, config.loss_slice)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        info!("epoch {epoch}: mean loss {mean_loss:.6e}");
        report.log.push(EpochRecord {
            epoch,
            mean_loss,
            wall_ms,
        });
    }
    report.steps = state.step();
    report.max_orthogonality_defect = max_defect;
    Ok((adapter, report))
}

/// Settings for the supervised refinement after transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlusConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PlusConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 2e-5,
            weight_decay: 1e-3,
            batch_size: 16,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// Continue training `adapter` with cross-entropy over the task-class outputs
/// at the student temperature.
pub fn finetune_plus(adapter: &Adapter, labeled: &LogitBank, config: &PlusConfig) -> Result<Adapter> {
    check_common(
        config.epochs,
        config.learning_rate,
        config.weight_decay,
        config.batch_size,
        config.noise_sigma,
    )?;
    adapter.check_schema(&labeled.schema)?;
    let labels = labeled
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("fine-tuning bank has no labels"))?;
    let n_task = adapter.n_task();
    if let Some(i) = labels.iter().position(|&l| l as usize >= n_task) {
        return Err(Error::invalid(format!(
            "label {} at sample index {i} is outside the {n_task} task classes",
            labels[i]
        )));
    }
    if labeled.n_samples() == 0 {
        warn!("no labelled samples; adapter left unchanged");
        return Ok(adapter.clone());
    }
    let mut adapter = adapter.clone();
    let hp = AdamWConfig::new(config.learning_rate, config.weight_decay);
    let mut state = OptimizerState::for_adapter(&adapter);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9105));
    let mut order: Vec<usize> = (0..labeled.n_samples()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let z = add_noise_with(&labeled.logits.select_rows(batch), config.noise_sigma, &mut rng);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i] as usize).collect();
            let mut tape = Tape::new();
            let out = adapter.record(&mut tape, &z)?;
            let task = tape.slice_cols(out, 0, n_task);
            tape.cross_entropy(task, y, adapter.tau_student)?;
            let grads = backprop(&tape, 1.0)?;
            adamw::step_adapter(&mut adapter, &grads, &mut state, &hp)?;
            check_defect(&adapter, epoch)?;
        }
    }
    Ok(adapter)
}
