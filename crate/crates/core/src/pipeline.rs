//! In-memory end-to-end run on synthetic banks: anchors, extraction,
//! transfer, refinement and evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::anchors::{sample_anchors, AnchorPool, Strategy};
use crate::banks::{cosine_logits, synth_generate, FeatureBank, LogitBank, Schema, SynthBanks, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{inequality_check, EvalReport, InequalityVerdict, Method};
use crate::training::{extract_adaptation_with, finetune_plus, PlusConfig, TrainConfig, TrainReport};
use crate::transfer::{basis_change, eft_logits, TransferConfig, TransferMode};

/// Smallest logit dimension used when none is given.
pub const MIN_LOGIT_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    /// Logit dimension `M`; `None` means `max(64, n_task)`.
    pub m: Option<usize>,
    pub anchor_strategy: Strategy,
    pub anchor_seed: u64,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
    pub plus: PlusConfig,
    /// Labelled strong-model samples per class for the refinement; 0 skips it.
    pub shots: usize,
    pub eft_alpha: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            m: None,
            anchor_strategy: Strategy::Random,
            anchor_seed: 0,
            train: TrainConfig::default(),
            transfer: TransferConfig::default(),
            plus: PlusConfig::default(),
            shots: 16,
            eft_alpha: 1.0,
        }
    }
}

impl PipelineConfig {
    /// The default run with every seed derived from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut c = Self::default();
        c.synth.seed = seed;
        c.anchor_seed = seed;
        c.train.seed = seed;
        c.plus.seed = seed;
        c
    }
}

/// Task classes of `bank` followed by `m − n_task` sampled auxiliary classes.
pub fn build_schema(
    bank: &FeatureBank,
    pool: &FeatureBank,
    m: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<Schema> {
    let task = bank.task_classes();
    let task_features: Vec<Vec<f64>> = task
        .iter()
        .map(|c| {
            bank.text(c)
                .map(|t| t.iter().map(|&v| v as f64).collect())
                .ok_or_else(|| Error::MissingClass(c.clone()))
        })
        .collect::<Result<_>>()?;
    let aux = sample_anchors(&AnchorPool::from_bank(pool), &task, &task_features, m, strategy, seed)?;
    Schema::from_parts(&task, &aux)
}

/// Cosine logits of `bank` over `schema`, auxiliary text taken from `pool`.
pub fn logits_with_pool(bank: &FeatureBank, pool: &FeatureBank, schema: &Schema) -> Result<LogitBank> {
    cosine_logits(&bank.with_text_from(pool, schema.aux_classes())?, schema)
}

/// The first `shots` samples of every task class, in bank order.
pub fn few_shot_indices(bank: &LogitBank, shots: usize) -> Result<Vec<usize>> {
    let labels = bank
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("few-shot selection needs labels"))?;
    let mut taken = vec![0usize; bank.schema.n_task()];
    let mut out = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if taken[l as usize] < shots {
            taken[l as usize] += 1;
            out.push(i);
        }
    }
    Ok(out)
}

/// Logit banks for every role and split of a synthetic run.
#[derive(Clone, Debug)]
pub struct RunBanks {
    pub schema: Schema,
    pub weak_pt: (LogitBank, LogitBank),
    pub weak_ft: (LogitBank, LogitBank),
    pub strong_pt: (LogitBank, LogitBank),
    pub strong_ft: (LogitBank, LogitBank),
}

impl RunBanks {
    pub fn from_synth(banks: &SynthBanks, m: Option<usize>, strategy: Strategy, seed: u64) -> Result<Self> {
        let n_task = banks.weak_pt.train.task_classes().len();
        let m = m.unwrap_or(MIN_LOGIT_DIM.max(n_task));
        let schema = build_schema(&banks.weak_pt.train, &banks.weak_pool, m, strategy, seed)?;
        let pair = |role: &crate::banks::RoleBanks, pool: &FeatureBank| -> Result<(LogitBank, LogitBank)> {
            Ok((
                logits_with_pool(&role.train, pool, &schema)?,
                logits_with_pool(&role.test, pool, &schema)?,
            ))
        };
        Ok(Self {
            weak_pt: pair(&banks.weak_pt, &banks.weak_pool)?,
            weak_ft: pair(&banks.weak_ft, &banks.weak_pool)?,
            strong_pt: pair(&banks.strong_pt, &banks.strong_pool)?,
            strong_ft: pair(&banks.strong_ft_reference, &banks.strong_pool)?,
            schema,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineOutcome {
    pub reports: Vec<EvalReport>,
    /// Source adapter applied unchanged to the strong model.
    pub naive: EvalReport,
    /// Source adapter on the weak model's own logits.
    pub weak_refined: EvalReport,
    pub weak_zero_shot: EvalReport,
    pub verdict: InequalityVerdict,
    #[serde(skip)]
    pub train: TrainReport,
    pub max_orthogonality_defect: f64,
    pub transfer_orthogonality_defect: f64,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub source: Option<Adapter>,
    #[serde(skip)]
    pub transferred: Option<Adapter>,
}

impl PipelineOutcome {
    pub fn report(&self, method: Method) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method)
    }

    pub fn accuracy(&self, method: Method) -> f64 {
        self.report(method).map_or(f64::NAN, EvalReport::headline)
    }
}

/// Headline numbers of one run, as stored in reference files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub domain_shift: f64,
    pub zero_shot: f64,
    pub source_ft: f64,
    pub transferred: f64,
    pub naive: f64,
    pub refined: Option<f64>,
    pub eft: f64,
    pub target_ft: f64,
    pub weak_zero_shot: f64,
    pub weak_refined: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl RunSummary {
    pub fn new(config: &PipelineConfig, outcome: &PipelineOutcome) -> Self {
        Self {
            seed: config.synth.seed,
            domain_shift: config.synth.domain_shift,
            zero_shot: outcome.accuracy(Method::ZeroShot),
            source_ft: outcome.accuracy(Method::SourceFt),
            transferred: outcome.accuracy(Method::Transmiter),
            naive: outcome.naive.headline(),
            refined: outcome.report(Method::TransmiterPlus).map(EvalReport::headline),
            eft: outcome.accuracy(Method::Eft),
            target_ft: outcome.accuracy(Method::TargetFtReference),
            weak_zero_shot: outcome.weak_zero_shot.headline(),
            weak_refined: outcome.weak_refined.headline(),
            initial_loss: outcome.train.initial_loss(),
            final_loss: outcome.train.final_loss(),
        }
    }

    /// Largest absolute difference over every accuracy and loss field.
    pub fn max_abs_diff(&self, other: &RunSummary) -> f64 {
        let a = self.values();
        let b = other.values();
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn values(&self) -> [f64; 12] {
        [
            self.zero_shot,
            self.source_ft,
            self.transferred,
            self.naive,
            self.refined.unwrap_or(f64::NAN),
            self.eft,
            self.target_ft,
            self.weak_zero_shot,
            self.weak_refined,
            self.initial_loss,
            self.final_loss,
            self.domain_shift,
        ]
    }
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    let start = Instant::now();
    let synth = synth_generate(&config.synth)?;
    let split = synth
        .weak_pt
        .test
        .class_split()
        .map(|s| (s.base.clone(), s.novel.clone()));
    let banks = RunBanks::from_synth(&synth, config.m, config.anchor_strategy, config.anchor_seed)?;
    let split_ref = split.as_ref().map(|(b, n)| (b.as_slice(), n.as_slice()));

    let (source, train) = extract_adaptation_with(&banks.weak_pt.0, &banks.weak_ft.0, &config.train, |_| {})?;
    let transferred = basis_change(&source, &banks.weak_pt.0, &banks.strong_pt.0, &config.transfer)?;
    let naive_cfg = TransferConfig {
        mode: TransferMode::Naive,
        ..config.transfer.clone()
    };
    let naive_adapter = basis_change(&source, &banks.weak_pt.0, &banks.strong_pt.0, &naive_cfg)?;

    let test = &banks.strong_pt.1;
    let eval = |method: Method, bank: &LogitBank, logits: &crate::numerics::Matrix| {
        EvalReport::evaluate(method, bank, logits, split_ref)
    };
    let mut reports = vec![
        eval(Method::ZeroShot, test, &test.logits)?,
        eval(Method::SourceFt, &banks.weak_ft.1, &banks.weak_ft.1.logits)?,
        eval(Method::Transmiter, test, &transferred.forward(&test.logits)?)?,
    ];
    if config.shots > 0 {
        let idx = few_shot_indices(&banks.strong_pt.0, config.shots)?;
        let plus = finetune_plus(&transferred, &banks.strong_pt.0.select(&idx), &config.plus)?;
        reports.push(eval(Method::TransmiterPlus, test, &plus.forward(&test.logits)?)?);
    }
    let eft = eft_logits(
        &test.task_logits(),
        &banks.weak_ft.1.task_logits(),
        &banks.weak_pt.1.task_logits(),
        config.eft_alpha,
    )?;
    reports.push(eval(Method::Eft, test, &eft)?);
    reports.push(eval(Method::TargetFtReference, &banks.strong_ft.1, &banks.strong_ft.1.logits)?);

    let naive = eval(Method::Transmiter, test, &naive_adapter.forward(&test.logits)?)?;
    let weak_test = &banks.weak_pt.1;
    let weak_refined = eval(Method::SourceFt, weak_test, &source.forward(&weak_test.logits)?)?;
    let weak_zero_shot = eval(Method::ZeroShot, weak_test, &weak_test.logits)?;
    let find = |m: Method| reports.iter().find(|r| r.method == m).expect("report present");
    let verdict = inequality_check(
        find(Method::ZeroShot),
        find(Method::SourceFt),
        find(Method::Transmiter),
        Some(find(Method::TargetFtReference)),
    )?;
    Ok(PipelineOutcome {
        max_orthogonality_defect: train.max_orthogonality_defect,
        transfer_orthogonality_defect: transferred.transition.orthogonality_defect(),
        reports,
        naive,
        weak_refined,
        weak_zero_shot,
        verdict,
        train,
        wall_seconds: start.elapsed().as_secs_f64(),
        source: Some(source),
        transferred: Some(transferred),
    })
}
