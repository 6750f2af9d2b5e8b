//! Run configuration: one JSON document, overridden by command-line flags.

use std::path::{Path, PathBuf};

use logit_bridge::anchors::Strategy;
use logit_bridge::banks::{Split, SynthConfig};
use logit_bridge::eval::Method;
use logit_bridge::training::{PlusConfig, TrainConfig};
use logit_bridge::transfer::TransferConfig;
use logit_bridge::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolePaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankPaths {
    pub weak_pt: RolePaths,
    pub weak_ft: RolePaths,
    pub strong_pt: RolePaths,
    pub strong_ft: RolePaths,
}

impl BankPaths {
    fn role(&self, role: &str) -> &RolePaths {
        match role {
            "weak_pt" => &self.weak_pt,
            "weak_ft" => &self.weak_ft,
            "strong_pt" => &self.strong_pt,
            "strong_ft" => &self.strong_ft,
            other => panic!("unknown role {other}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorsConfig {
    /// Candidate pool with the weak model's text features.
    pub pool_path: Option<PathBuf>,
    /// The same candidates embedded by the strong model.
    pub strong_pool_path: Option<PathBuf>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for AnchorsConfig {
    fn default() -> Self {
        Self {
            pool_path: None,
            strong_pool_path: None,
            m: None,
            strategy: Strategy::Random,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Labelled samples per class taken from the strong model's train split.
    pub shots: usize,
    #[serde(flatten)]
    pub plus: PlusConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            shots: 16,
            plus: PlusConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub splits: Vec<Split>,
    pub methods: Vec<Method>,
    pub eft_alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: vec![Split::Test],
            methods: vec![
                Method::ZeroShot,
                Method::SourceFt,
                Method::Transmiter,
                Method::TransmiterPlus,
                Method::Eft,
                Method::TargetFtReference,
            ],
            eft_alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub d: usize,
    pub m: usize,
    pub batch: usize,
    pub iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d: 1024,
            m: 1024,
            batch: 256,
            iterations: 5,
        }
    }
}

/// Adapter files read and written by the stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterPaths {
    pub source: Option<PathBuf>,
    pub transferred: Option<PathBuf>,
    pub refined: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub banks: BankPaths,
    pub anchors: AnchorsConfig,
    pub adapters: AdapterPaths,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            synth: SynthConfig::default(),
            banks: BankPaths::default(),
            anchors: AnchorsConfig::default(),
            adapters: AdapterPaths::default(),
            train: TrainConfig::default(),
            transfer: TransferConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

pub fn bank_file(role: &str, split: Split) -> String {
    format!("{role}_{split}.fbank")
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Apply `--seed`: every stage seed follows it.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.anchors.seed = seed;
        self.train.seed = seed;
        self.finetune.plus.seed = seed;
    }

    pub fn banks_dir(&self) -> PathBuf {
        self.out_dir.join("banks")
    }

    pub fn bank_path(&self, role: &str, split: Split) -> PathBuf {
        let paths = self.banks.role(role);
        let explicit = match split {
            Split::Train => &paths.train,
            Split::Test => &paths.test,
        };
        explicit.clone().unwrap_or_else(|| self.banks_dir().join(bank_file(role, split)))
    }

    pub fn pool_path(&self) -> PathBuf {
        self.anchors
            .pool_path
            .clone()
            .unwrap_or_else(|| self.banks_dir().join("weak_pool.fbank"))
    }

    pub fn strong_pool_path(&self) -> PathBuf {
        self.anchors
            .strong_pool_path
            .clone()
            .unwrap_or_else(|| self.banks_dir().join("strong_pool.fbank"))
    }

    pub fn source_adapter(&self) -> PathBuf {
        self.adapters.source.clone().unwrap_or_else(|| self.out_dir.join("source.tmad"))
    }

    pub fn transferred_adapter(&self) -> PathBuf {
        self.adapters
            .transferred
            .clone()
            .unwrap_or_else(|| self.out_dir.join("transferred.tmad"))
    }

    pub fn refined_adapter(&self) -> PathBuf {
        self.adapters.refined.clone().unwrap_or_else(|| self.out_dir.join("refined.tmad"))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.transfer.validate()?;
        if self.eval.methods.is_empty() {
            return Err(Error::InvalidArgument("eval.methods is empty".into()).into());
        }
        if self.eval.splits.is_empty() {
            return Err(Error::InvalidArgument("eval.splits is empty".into()).into());
        }
        if self.bench.d < self.bench.m || self.bench.m == 0 || self.bench.batch == 0 || self.bench.iterations == 0 {
            return Err(Error::InvalidArgument("bench needs d >= m > 0, batch > 0 and iterations > 0".into()).into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_fields_fail() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"out_dri": "x"}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"anchors": {"M": 80}, "transfer": {"beta": 3}}"#).unwrap();
        assert_eq!(partial.anchors.m, Some(80));
        assert_eq!(partial.transfer.beta, 3.0);
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut c = RunConfig::default();
        c.set_seed(9);
        assert_eq!((c.synth.seed, c.anchors.seed, c.train.seed, c.finetune.plus.seed), (9, 9, 9, 9));
    }

    #[test]
    fn default_paths_live_under_out_dir() {
        let c = RunConfig { out_dir: "x".into(), ..RunConfig::default() };
        assert_eq!(c.bank_path("weak_ft", Split::Test), PathBuf::from("x/banks/weak_ft_test.fbank"));
        assert_eq!(c.source_adapter(), PathBuf::from("x/source.tmad"));
    }
}
