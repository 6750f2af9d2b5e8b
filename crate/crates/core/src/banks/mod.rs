//! Feature and logit banks.
//!
//! Features are stored as unit-norm `f32` rows; all arithmetic upcasts to `f64`.

pub(crate) mod format;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::par;

pub use format::{
    read_bank, read_logit_bank, write_bank, write_logit_bank, FEATURE_MAGIC, FORMAT_VERSION,
    LOGIT_MAGIC,
};
pub use synth::{synth_generate, RoleBanks, SynthBanks, SynthConfig};

/// Allowed deviation of a stored feature row's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Partition of the task classes into seen (base) and unseen (novel).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

/// Ordered class names: task classes first, then auxiliary anchors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    classes: Vec<String>,
    n_task: usize,
}

impl Schema {
    pub fn new(classes: Vec<String>, n_task: usize) -> Result<Self> {
        if n_task > classes.len() {
            return Err(Error::invalid(format!(
                "n_task = {n_task} exceeds schema length {}",
                classes.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = classes.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::invalid(format!("duplicate class `{dup}` in schema")));
        }
        Ok(Self { classes, n_task })
    }

    /// Task classes followed by auxiliary classes.
    pub fn from_parts(task: &[String], aux: &[String]) -> Result<Self> {
        let mut classes = task.to_vec();
        classes.extend_from_slice(aux);
        Self::new(classes, task.len())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn task_classes(&self) -> &[String] {
        &self.classes[..self.n_task]
    }

    pub fn aux_classes(&self) -> &[String] {
        &self.classes[self.n_task..]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn n_task(&self) -> usize {
        self.n_task
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Schema-mismatch error naming the first differing class.
    pub fn check_matches(&self, other: &Schema) -> Result<()> {
        let n = self.classes.len().max(other.classes.len());
        for i in 0..n {
            let a = self.classes.get(i);
            let b = other.classes.get(i);
            if a != b {
                return Err(Error::SchemaMismatch {
                    index: i,
                    expected: a.cloned().unwrap_or_else(|| "<end of schema>".into()),
                    found: b.cloned().unwrap_or_else(|| "<end of schema>".into()),
                });
            }
        }
        if self.n_task != other.n_task {
            return Err(Error::invalid(format!(
                "task class count differs: {} vs {}",
                self.n_task, other.n_task
            )));
        }
        Ok(())
    }
}

/// Pre-extracted image and text features for one (model, dataset, split).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    model_id: String,
    dataset_id: String,
    split: Split,
    feature_dim: usize,
    image_features: Vec<f32>,
    labels: Option<Vec<u32>>,
    text_features: IndexMap<String, Vec<f32>>,
    class_split: Option<ClassSplit>,
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Unit-normalize in `f64` and store as `f32`.
pub fn normalize_to_f32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

impl FeatureBank {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        split: Split,
        feature_dim: usize,
        image_features: Vec<f32>,
        labels: Option<Vec<u32>>,
        text_features: IndexMap<String, Vec<f32>>,
        class_split: Option<ClassSplit>,
    ) -> Result<Self> {
        let bank = Self {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            split,
            feature_dim,
            image_features,
            labels,
            text_features,
            class_split,
        };
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        if d == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if self.image_features.len() % d != 0 {
            return Err(Error::invalid(format!(
                "image feature buffer of {} values is not a multiple of feature_dim {d}",
                self.image_features.len()
            )));
        }
        for (i, row) in self.image_features.chunks(d).enumerate() {
            let n = row_norm(row);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::invalid(format!("image feature {i} has norm {n}")));
            }
        }
        for (name, v) in &self.text_features {
            if v.len() != d {
                return Err(Error::invalid(format!(
                    "text feature `{name}` has length {}, expected {d}",
                    v.len()
                )));
            }
            let n = row_norm(v);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::invalid(format!("text feature `{name}` has norm {n}")));
            }
        }
        let n = self.n_samples();
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::invalid(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
            let c = self.text_features.len();
            if let Some(bad) = labels.iter().find(|l| **l as usize >= c) {
                return Err(Error::invalid(format!(
                    "label {bad} out of range for {c} classes"
                )));
            }
        }
        if let Some(split) = &self.class_split {
            let mut seen = HashSet::new();
            for name in split.base.iter().chain(&split.novel) {
                if !self.text_features.contains_key(name) {
                    return Err(Error::MissingClass(name.clone()));
                }
                if !seen.insert(name) {
                    return Err(Error::invalid(format!(
                        "class `{name}` appears twice in the base/novel split"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_samples(&self) -> usize {
        self.image_features.len() / self.feature_dim
    }

    pub fn image_features(&self) -> &[f32] {
        &self.image_features
    }

    pub fn image_row(&self, i: usize) -> &[f32] {
        &self.image_features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn text_features(&self) -> &IndexMap<String, Vec<f32>> {
        &self.text_features
    }

    pub fn text(&self, class: &str) -> Option<&[f32]> {
        self.text_features.get(class).map(Vec::as_slice)
    }

    pub fn class_names(&self) -> impl Iterator<Item = &String> {
        self.text_features.keys()
    }

    pub fn class_split(&self) -> Option<&ClassSplit> {
        self.class_split.as_ref()
    }

    /// Classes the labels refer to: the base and novel classes (in bank
    /// order) when a split is recorded, otherwise every class in the bank.
    pub fn task_classes(&self) -> Vec<String> {
        match &self.class_split {
            Some(split) => self
                .class_names()
                .filter(|c| split.base.contains(c) || split.novel.contains(c))
                .cloned()
                .collect(),
            None => self.class_names().cloned().collect(),
        }
    }

    /// Copy of this bank with the listed classes' text features taken from `pool`.
    pub fn with_text_from(&self, pool: &FeatureBank, names: &[String]) -> Result<FeatureBank> {
        if pool.feature_dim != self.feature_dim {
            return Err(Error::invalid(format!(
                "anchor pool feature_dim {} differs from bank feature_dim {}",
                pool.feature_dim, self.feature_dim
            )));
        }
        let mut out = self.clone();
        for name in names {
            if out.text_features.contains_key(name) {
                continue;
            }
            let v = pool
                .text(name)
                .ok_or_else(|| Error::MissingClass(name.clone()))?;
            out.text_features.insert(name.clone(), v.to_vec());
        }
        Ok(out)
    }
}

/// Cosine-similarity logits over an ordered class schema.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBank {
    pub model_id: String,
    pub dataset_id: String,
    pub split: Split,
    pub schema: Schema,
    pub logits: Matrix,
    pub labels: Option<Vec<u32>>,
}

/// Allowed excursion of a cosine logit outside `[-1, 1]`.
pub const LOGIT_RANGE_TOLERANCE: f64 = 1e-6;

impl LogitBank {
    pub fn new(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        split: Split,
        schema: Schema,
        logits: Matrix,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if logits.cols() != schema.len() {
            return Err(Error::invalid(format!(
                "logit matrix has {} columns for a schema of {} classes",
                logits.cols(),
                schema.len()
            )));
        }
        let bound = 1.0 + LOGIT_RANGE_TOLERANCE;
        if let Some(v) = logits.data().iter().find(|v| !(v.abs() <= bound)) {
            return Err(Error::invalid(format!("cosine logit {v} outside [-1, 1]")));
        }
        if let Some(labels) = &labels {
            if labels.len() != logits.rows() {
                return Err(Error::invalid(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    logits.rows()
                )));
            }
            if let Some(bad) = labels.iter().find(|l| **l as usize >= schema.n_task()) {
                return Err(Error::invalid(format!(
                    "label {bad} is not a task class index (n_task = {})",
                    schema.n_task()
                )));
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            split,
            schema,
            logits,
            labels,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.logits.rows()
    }

    /// Rows restricted to the task classes.
    pub fn task_logits(&self) -> Matrix {
        self.logits.columns(0, self.schema.n_task())
    }

    /// Copy restricted to the given sample indices.
    pub fn select(&self, indices: &[usize]) -> LogitBank {
        LogitBank {
            model_id: self.model_id.clone(),
            dataset_id: self.dataset_id.clone(),
            split: self.split,
            schema: self.schema.clone(),
            logits: self.logits.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Error unless both banks cover the same samples under the same schema.
    pub fn check_aligned(&self, other: &LogitBank) -> Result<()> {
        self.schema.check_matches(&other.schema)?;
        if self.n_samples() != other.n_samples() {
            return Err(Error::invalid(format!(
                "banks differ in sample count: {} vs {}",
                self.n_samples(),
                other.n_samples()
            )));
        }
        Ok(())
    }
}

/// `logits[i][j] = cos(image_i, text(schema_j))`, labels re-indexed into the schema.
pub fn cosine_logits(bank: &FeatureBank, schema: &Schema) -> Result<LogitBank> {
    let d = bank.feature_dim();
    let mut text = Vec::with_capacity(schema.len() * d);
    for class in schema.classes() {
        let t = bank.text(class).ok_or_else(|| Error::MissingClass(class.clone()))?;
        let n = row_norm(t);
        text.extend(t.iter().map(|&v| v as f64 / n));
    }
    let m = schema.len();
    let mut logits = Matrix::zeros(bank.n_samples(), m);
    par::for_each_row(logits.data_mut(), m, |i, out| {
        let img = bank.image_row(i);
        let n = row_norm(img);
        let x: Vec<f64> = img.iter().map(|&v| v as f64 / n).collect();
        for (j, o) in out.iter_mut().enumerate() {
            let t = &text[j * d..(j + 1) * d];
            *o = crate::numerics::dot(&x, t).clamp(-1.0, 1.0);
        }
    });
    let labels = match bank.labels() {
        None => None,
        Some(labels) => {
            let names: Vec<&String> = bank.class_names().collect();
            let mut remap = Vec::with_capacity(names.len());
            for name in &names {
                remap.push(schema.task_classes().iter().position(|c| c == *name));
            }
            let mut out = Vec::with_capacity(labels.len());
            for &l in labels {
                let idx = remap[l as usize].ok_or_else(|| {
                    Error::invalid(format!(
                        "labelled class `{}` is not a task class of the schema",
                        names[l as usize]
                    ))
                })?;
                out.push(idx as u32);
            }
            Some(out)
        }
    };
    LogitBank::new(
        bank.model_id(),
        bank.dataset_id(),
        bank.split(),
        schema.clone(),
        logits,
        labels,
    )
}
