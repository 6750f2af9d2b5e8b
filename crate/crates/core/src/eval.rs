//! Prediction, accuracy, harmonic means and the weak-to-strong inequality.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::banks::{LogitBank, Split};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::par;
use crate::transfer::eft_logits;

/// Index of the largest entry; the lowest index wins ties.
pub fn predict(row: &[f64]) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::invalid("cannot predict from an empty logit row"));
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

/// How logits are produced from a bank before prediction.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    Raw,
    Adapter(&'a Adapter),
    /// `z + α (z_ft_s − z_pt_s)` with weak-model banks aligned to the scored bank.
    Eft {
        weak_ft: &'a LogitBank,
        weak_pt: &'a LogitBank,
        alpha: f64,
    },
}

impl Scorer<'_> {
    pub fn logits(&self, bank: &LogitBank) -> Result<Matrix> {
        match self {
            Scorer::Raw => Ok(bank.logits.clone()),
            Scorer::Adapter(a) => {
                a.check_schema(&bank.schema)?;
                a.forward(&bank.logits)
            }
            Scorer::Eft {
                weak_ft,
                weak_pt,
                alpha,
            } => {
                let n = bank.schema.n_task();
                weak_ft.check_aligned(bank)?;
                weak_pt.check_aligned(bank)?;
                eft_logits(
                    &bank.task_logits(),
                    &weak_ft.logits.columns(0, n),
                    &weak_pt.logits.columns(0, n),
                    *alpha,
                )
            }
        }
    }
}

/// Percentage of correct predictions over the task classes or, when
/// `class_subset` is given, over samples of those classes with candidates
/// restricted to them.
pub fn accuracy(bank: &LogitBank, scorer: Scorer<'_>, class_subset: Option<&[String]>) -> Result<f64> {
    let logits = scorer.logits(bank)?;
    accuracy_of(bank, &logits, class_subset).map(|(acc, _)| acc)
}

/// Accuracy of precomputed logits (columns in schema order; only the task
/// columns are read). Returns the percentage and the number of samples scored.
pub fn accuracy_of(bank: &LogitBank, logits: &Matrix, class_subset: Option<&[String]>) -> Result<(f64, usize)> {
    let labels = bank
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("accuracy needs a labelled bank"))?;
    let n_task = bank.schema.n_task();
    if logits.rows() != bank.n_samples() || logits.cols() < n_task {
        return Err(Error::invalid(format!(
            "logits of shape {:?} do not cover {} samples × {n_task} task classes",
            logits.shape(),
            bank.n_samples()
        )));
    }
    let candidates: Vec<usize> = match class_subset {
        None => (0..n_task).collect(),
        Some(names) => {
            if names.is_empty() {
                return Err(Error::invalid("empty class subset"));
            }
            names
                .iter()
                .map(|n| {
                    bank.schema.task_classes().iter().position(|c| c == n).ok_or_else(|| {
                        Error::invalid(format!("subset class `{n}` is not a task class"))
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let samples: Vec<usize> = (0..bank.n_samples())
        .filter(|&i| candidates.contains(&(labels[i] as usize)))
        .collect();
    if samples.is_empty() {
        return Err(Error::invalid("no labelled samples fall in the evaluated classes"));
    }
    let hits = par::map_indices(samples.len(), |k| {
        let i = samples[k];
        let row = logits.row(i);
        let scores: Vec<f64> = candidates.iter().map(|&c| row[c]).collect();
        let pick = predict(&scores).expect("non-empty candidates");
        candidates[pick] == labels[i] as usize
    });
    let correct = hits.iter().filter(|&&h| h).count();
    Ok((100.0 * correct as f64 / samples.len() as f64, samples.len()))
}

/// `2·base·novel / (base + novel)`.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base > 0.0 && novel > 0.0) {
        return Err(Error::invalid(format!(
            "harmonic mean needs positive inputs, got {base} and {novel}"
        )));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// HM of the averaged base and novel accuracies.
pub fn hm_of_means(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no datasets to average"));
    }
    let n = pairs.len() as f64;
    let base = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let novel = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    harmonic_mean(base, novel)
}

/// Mean of the per-dataset HMs.
pub fn mean_of_hms(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no datasets to average"));
    }
    let mut sum = 0.0;
    for &(b, n) in pairs {
        sum += harmonic_mean(b, n)?;
    }
    Ok(sum / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroShot,
    SourceFt,
    Transmiter,
    TransmiterPlus,
    Eft,
    TargetFtReference,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ZeroShot,
        Method::SourceFt,
        Method::Transmiter,
        Method::TransmiterPlus,
        Method::Eft,
        Method::TargetFtReference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::SourceFt => "source_ft",
            Method::Transmiter => "transmiter",
            Method::TransmiterPlus => "transmiter_plus",
            Method::Eft => "eft",
            Method::TargetFtReference => "target_ft_reference",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::invalid(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub model_id: String,
    pub dataset_id: String,
    pub split: Split,
    /// Accuracy over all task classes.
    pub accuracy: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<SubsetScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel: Option<SubsetScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub accuracy: f64,
    pub n_samples: usize,
}

impl EvalReport {
    /// Score `logits` on `bank`, adding base/novel/HM when a split is given.
    pub fn evaluate(
        method: Method,
        bank: &LogitBank,
        logits: &Matrix,
        split: Option<(&[String], &[String])>,
    ) -> Result<Self> {
        let (accuracy, n_samples) = accuracy_of(bank, logits, None)?;
        let (mut base, mut novel, mut hm) = (None, None, None);
        if let Some((b, n)) = split {
            let score = |names: &[String]| -> Result<Option<SubsetScore>> {
                if names.is_empty() {
                    return Ok(None);
                }
                let (accuracy, n_samples) = accuracy_of(bank, logits, Some(names))?;
                Ok(Some(SubsetScore { accuracy, n_samples }))
            };
            base = score(b)?;
            novel = score(n)?;
            if let (Some(b), Some(n)) = (base, novel) {
                hm = Some(if b.accuracy > 0.0 && n.accuracy > 0.0 {
                    harmonic_mean(b.accuracy, n.accuracy)?
                } else {
                    0.0
                });
            }
        }
        Ok(Self {
            method,
            model_id: bank.model_id.clone(),
            dataset_id: bank.dataset_id.clone(),
            split: bank.split,
            accuracy,
            n_samples,
            base,
            novel,
            hm,
            fingerprint: None,
        })
    }

    /// HM when both subsets were scored, otherwise overall accuracy.
    pub fn headline(&self) -> f64 {
        self.hm.unwrap_or(self.accuracy)
    }
}

/// Aligned text table with one row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let width = reports.iter().map(|r| r.method.name().len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "method", "acc", "base", "novel", "hm"
    );
    for r in reports {
        out += &format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            r.method.name(),
            cell(Some(r.accuracy)),
            cell(r.base.map(|s| s.accuracy)),
            cell(r.novel.map(|s| s.accuracy)),
            cell(r.hm),
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub passed: bool,
    pub margin: f64,
}

impl Clause {
    fn at_least(lhs: f64, rhs: f64) -> Self {
        Self {
            passed: lhs >= rhs,
            margin: lhs - rhs,
        }
    }
}

/// Clause 1: `max(pt_t, ft_s) ≤ t*`. Clause 2: `t* ≤ ft_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityVerdict {
    pub lower: Clause,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Clause>,
}

/// Check the weak-to-strong ordering on the reports' headline scores.
pub fn inequality_check(
    pt_t: &EvalReport,
    ft_s: &EvalReport,
    t_star: &EvalReport,
    ft_t: Option<&EvalReport>,
) -> Result<InequalityVerdict> {
    let all: Vec<&EvalReport> = [pt_t, ft_s, t_star].into_iter().chain(ft_t).collect();
    for r in &all[1..] {
        if r.dataset_id != all[0].dataset_id || r.split != all[0].split || r.n_samples != all[0].n_samples {
            return Err(Error::invalid(format!(
                "reports cover different banks: {}/{}/{} vs {}/{}/{}",
                all[0].dataset_id, all[0].split, all[0].n_samples, r.dataset_id, r.split, r.n_samples
            )));
        }
    }
    let t = t_star.headline();
    Ok(InequalityVerdict {
        lower: Clause::at_least(t, pt_t.headline().max(ft_s.headline())),
        upper: ft_t.map(|r| Clause::at_least(r.headline(), t)),
    })
}

/// Per-sample multiply-accumulate count of the adapter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub macs: u64,
    pub flops: u64,
}

impl FlopEstimate {
    pub fn for_dims(d: usize, m: usize, hidden: usize) -> Self {
        let (d, m, h) = (d as u64, m as u64, hidden as u64);
        let macs = m * d + d * h + h * d + d * m;
        Self { macs, flops: 2 * macs }
    }

    pub fn giga_macs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn giga_flops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// Projection, both MLP layers and reconstruction.
pub fn flops_estimate(adapter: &Adapter) -> FlopEstimate {
    FlopEstimate::for_dims(adapter.d(), adapter.m(), adapter.mlp.hidden())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::adapter_init;
    use crate::banks::Schema;
    use proptest::prelude::*;

    fn labelled(logits: Matrix, labels: Vec<u32>, n_task: usize) -> LogitBank {
        let m = logits.cols();
        let schema = Schema::new((0..m).map(|i| format!("c{i}")).collect(), n_task).unwrap();
        LogitBank::new("m", "d", Split::Test, schema, logits, Some(labels)).unwrap()
    }

    fn report(acc: f64) -> EvalReport {
        EvalReport {
            method: Method::ZeroShot,
            model_id: "m".into(),
            dataset_id: "d".into(),
            split: Split::Test,
            accuracy: acc,
            n_samples: 10,
            base: None,
            novel: None,
            hm: None,
            fingerprint: None,
        }
    }

    #[test]
    fn predict_rules() {
        assert_eq!(predict(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(predict(&[0.0, 0.0, 1.0, 0.0]).unwrap(), 2);
        assert_eq!(predict(&[0.5, 0.5, 0.5]).unwrap(), 0);
        assert!(predict(&[]).is_err());
    }

    #[test]
    fn perfect_and_wrong() {
        let labels = vec![0, 1, 2, 1];
        let hot = Matrix::from_fn(4, 3, |i, j| if j == labels[i] as usize { 1.0 } else { 0.0 });
        let bank = labelled(hot.clone(), labels.clone(), 3);
        assert_eq!(accuracy(&bank, Scorer::Raw, None).unwrap(), 100.0);
        let wrong = Matrix::from_fn(4, 3, |i, j| if j == (labels[i] as usize + 1) % 3 { 1.0 } else { 0.0 });
        assert_eq!(accuracy(&labelled(wrong, labels, 3), Scorer::Raw, None).unwrap(), 0.0);
    }

    #[test]
    fn subsets_restrict_samples_and_candidates() {
        // Sample 0 (class 0) prefers class 2, which is outside the subset.
        let logits = Matrix::from_rows(&[
            vec![0.5, 0.1, 0.9],
            vec![0.2, 0.6, 0.1],
            vec![0.1, 0.0, 0.8],
        ])
        .unwrap();
        let bank = labelled(logits, vec![0, 1, 2], 3);
        let subset = vec!["c0".to_string(), "c1".to_string()];
        assert_eq!(accuracy(&bank, Scorer::Raw, Some(&subset)).unwrap(), 100.0);
        assert!((accuracy(&bank, Scorer::Raw, None).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!(accuracy(&bank, Scorer::Raw, Some(&[])).is_err());
        assert!(accuracy(&bank, Scorer::Raw, Some(&["zz".to_string()])).is_err());
        let unlabelled = LogitBank { labels: None, ..bank };
        assert!(accuracy(&unlabelled, Scorer::Raw, None).is_err());
    }

    #[test]
    fn auxiliary_columns_are_not_candidates() {
        let logits = Matrix::from_rows(&[vec![0.2, 0.1, 0.9], vec![0.1, 0.3, 0.9]]).unwrap();
        let bank = labelled(logits, vec![0, 1], 2);
        assert_eq!(accuracy(&bank, Scorer::Raw, None).unwrap(), 100.0);
    }

    #[test]
    fn fresh_adapter_matches_raw_accuracy() {
        let n = 200;
        let logits = Matrix::from_fn(n, 8, |i, j| 0.9 * ((i * 8 + j) as f64 * 1.7).sin());
        let labels = (0..n).map(|i| (i % 5) as u32).collect();
        let bank = labelled(logits, labels, 5);
        let a = adapter_init(8, 8, 3).unwrap();
        let mut a = a;
        a.schema = bank.schema.clone();
        assert_eq!(
            accuracy(&bank, Scorer::Adapter(&a), None).unwrap(),
            accuracy(&bank, Scorer::Raw, None).unwrap()
        );
    }

    #[test]
    fn harmonic_mean_anchors() {
        assert!((harmonic_mean(81.73, 75.84).unwrap() - 78.67).abs() <= 0.01);
        assert!((harmonic_mean(76.71, 80.85).unwrap() - 78.73).abs() <= 0.01);
        assert_eq!(harmonic_mean(42.0, 42.0).unwrap(), 42.0);
        assert!(harmonic_mean(0.0, 10.0).is_err());
        let pairs = [(80.0, 60.0), (70.0, 90.0)];
        assert!((hm_of_means(&pairs).unwrap() - 75.0).abs() < 1e-12);
        let m = (harmonic_mean(80.0, 60.0).unwrap() + harmonic_mean(70.0, 90.0).unwrap()) / 2.0;
        assert!((mean_of_hms(&pairs).unwrap() - m).abs() < 1e-12);
    }

    #[test]
    fn inequality_examples() {
        let v = inequality_check(&report(60.0), &report(70.0), &report(75.0), Some(&report(80.0))).unwrap();
        assert!(v.lower.passed && v.upper.unwrap().passed);
        assert!((v.lower.margin - 5.0).abs() < 1e-12 && (v.upper.unwrap().margin - 5.0).abs() < 1e-12);
        let v = inequality_check(&report(60.0), &report(70.0), &report(65.0), Some(&report(80.0))).unwrap();
        assert!(!v.lower.passed);
        assert!((v.lower.margin + 5.0).abs() < 1e-12);
        let mut other = report(80.0);
        other.n_samples = 11;
        assert!(inequality_check(&report(60.0), &report(70.0), &report(65.0), Some(&other)).is_err());
    }

    #[test]
    fn flop_counts() {
        assert_eq!(FlopEstimate::for_dims(1024, 1024, 4096).macs, 10_485_760);
        assert_eq!(FlopEstimate::for_dims(2, 2, 8).macs, 40);
        let small = FlopEstimate::for_dims(16, 8, 64);
        let big = FlopEstimate::for_dims(32, 8, 128);
        assert_eq!(big.macs - 2 * 8 * 32, 4 * (small.macs - 2 * 8 * 16));
        let a = adapter_init(6, 4, 0).unwrap();
        assert_eq!(flops_estimate(&a).macs, 4 * 6 * 2 + 2 * 6 * 24);
    }

    #[test]
    fn table_layout() {
        let mut r = report(71.234);
        r.base = Some(SubsetScore { accuracy: 80.0, n_samples: 5 });
        r.novel = Some(SubsetScore { accuracy: 60.0, n_samples: 5 });
        r.hm = Some(harmonic_mean(80.0, 60.0).unwrap());
        let t = format_table(&[r, report(50.0)]);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("71.23") && lines[1].contains("68.57"));
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }

    proptest! {
        #[test]
        fn hm_is_at_most_the_arithmetic_mean(b in 0.1f64..100.0, n in 0.1f64..100.0) {
            let hm = harmonic_mean(b, n).unwrap();
            prop_assert!(hm <= (b + n) / 2.0 + 1e-12);
        }

        #[test]
        fn predict_ignores_positive_scaling(row in prop::collection::vec(-1.0f64..1.0, 1..12), k in -8i32..8) {
            let s = 2f64.powi(k);
            let scaled: Vec<f64> = row.iter().map(|v| v / s).collect();
            prop_assert_eq!(predict(&row).unwrap(), predict(&scaled).unwrap());
        }

        #[test]
        fn accuracy_ignores_class_permutation(seed in 0u64..200) {
            let n_task = 4;
            let logits = Matrix::from_fn(30, 4, |i, j| (((i * 4 + j) as f64 + seed as f64) * 0.77).sin());
            let labels: Vec<u32> = (0..30).map(|i| ((i as u64 + seed) % 4) as u32).collect();
            let perm = [2usize, 0, 3, 1];
            let permuted = Matrix::from_fn(30, 4, |i, j| logits[(i, perm[j])]);
            let inv: Vec<u32> = labels.iter().map(|&l| perm.iter().position(|&p| p == l as usize).unwrap() as u32).collect();
            let a = accuracy(&labelled(logits, labels, n_task), Scorer::Raw, None).unwrap();
            let b = accuracy(&labelled(permuted, inv, n_task), Scorer::Raw, None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
