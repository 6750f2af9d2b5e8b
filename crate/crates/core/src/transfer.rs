//! Moving a trained adapter to a stronger model without backpropagation.
//!
//! The source adapter's latent space is re-aligned to the target model by the
//! orthogonal map `Ŵ` that best carries target latents `H_t` onto source
//! latents `H_s` over a shared set of unlabeled samples, with a pull towards
//! the identity of weight `β`.

use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, Provenance};
use crate::banks::LogitBank;
use crate::error::{Error, Result};
use crate::numerics::{solve_procrustes_full, Matrix, ProcrustesSolution};

pub const DEFAULT_BETA: f64 = 500.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Naive,
    #[default]
    BasisChange,
}

/// Which latent features the alignment is fitted on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFeature {
    /// `h = z Wᵀ`, before the MLP.
    #[default]
    InputH,
    /// `f(h)`, after the residual MLP.
    OutputH,
}

/// Which sides of the transition matrix receive the new basis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    /// Projection and reconstruction both, keeping them mutually inverse.
    #[default]
    Transposed,
    /// Only the input projection.
    ProjectionOnly,
}

/// Logit columns used to build the latent features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitSlice {
    #[default]
    Full,
    /// Task columns only, auxiliary columns zeroed.
    TaskOnly,
}

macro_rules! display_snake {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = serde_json::to_value(self).expect("unit variant serializes");
                f.write_str(s.as_str().expect("unit variant is a string"))
            }
        }
    )*};
}

display_snake!(TransferMode, BasisFeature, ApplyMode, LogitSlice);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub beta: f64,
    pub mode: TransferMode,
    pub basis_feature: BasisFeature,
    pub apply: ApplyMode,
    pub logit_slice_for_h: LogitSlice,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            mode: TransferMode::BasisChange,
            basis_feature: BasisFeature::InputH,
            apply: ApplyMode::Transposed,
            logit_slice_for_h: LogitSlice::Full,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

fn check_inputs(adapter: &Adapter, weak_pt: &LogitBank, strong_pt: &LogitBank) -> Result<()> {
    adapter.check_schema(&weak_pt.schema)?;
    weak_pt.check_aligned(strong_pt)
}

fn latent_features(adapter: &Adapter, bank: &LogitBank, config: &TransferConfig) -> Result<Matrix> {
    let z = match config.logit_slice_for_h {
        LogitSlice::Full => bank.logits.clone(),
        LogitSlice::TaskOnly => bank.task_logits().with_cols(bank.schema.len()),
    };
    let h = adapter.latent(&z)?;
    Ok(match config.basis_feature {
        BasisFeature::InputH => h,
        BasisFeature::OutputH => adapter.mlp.apply(&h),
    })
}

/// The fitted basis map `Ŵ` (D×D) and its decomposition.
pub fn basis_map(
    adapter: &Adapter,
    weak_pt: &LogitBank,
    strong_pt: &LogitBank,
    config: &TransferConfig,
) -> Result<ProcrustesSolution> {
    config.validate()?;
    check_inputs(adapter, weak_pt, strong_pt)?;
    if weak_pt.n_samples() == 0 {
        return Err(Error::invalid("basis change needs at least one unlabeled sample"));
    }
    let h_s = latent_features(adapter, weak_pt, config)?;
    let h_t = latent_features(adapter, strong_pt, config)?;
    let solution = solve_procrustes_full(&h_t, &h_s, config.beta)?;
    if config.beta == 0.0 && solution.null_directions() > 0 {
        warn!(
            "latent cross matrix is rank deficient ({} null directions); the basis map is not unique",
            solution.null_directions()
        );
    }
    Ok(solution)
}

/// Re-target `adapter` (trained on the weak model) to the strong model.
pub fn basis_change(
    adapter: &Adapter,
    weak_pt: &LogitBank,
    strong_pt: &LogitBank,
    config: &TransferConfig,
) -> Result<Adapter> {
    config.validate()?;
    check_inputs(adapter, weak_pt, strong_pt)?;
    let mut out = adapter.clone();
    if config.mode == TransferMode::BasisChange {
        let w_hat = basis_map(adapter, weak_pt, strong_pt, config)?.rotation;
        let reconstruction = config.apply == ApplyMode::Transposed;
        out.transition = adapter
            .transition
            .rebased(&w_hat.transpose(), true, reconstruction)?;
    }
    out.provenance = Some(Provenance {
        source_model_id: weak_pt.model_id.clone(),
        target_model_id: strong_pt.model_id.clone(),
        beta: config.beta,
        mode: config.mode.to_string(),
        basis_feature: config.basis_feature.to_string(),
        apply: config.apply.to_string(),
        logit_slice: config.logit_slice_for_h.to_string(),
    });
    Ok(out)
}

/// The source adapter applied unchanged to the strong model's logits.
pub fn naive_transfer(adapter: &Adapter, strong_pt: &LogitBank) -> Result<Matrix> {
    adapter.check_schema(&strong_pt.schema)?;
    adapter.forward(&strong_pt.logits)
}

/// `z_pt_t + α (z_ft_s − z_pt_s)`.
pub fn eft_logits(z_pt_t: &Matrix, z_ft_s: &Matrix, z_pt_s: &Matrix, alpha: f64) -> Result<Matrix> {
    if z_pt_t.shape() != z_ft_s.shape() || z_pt_t.shape() != z_pt_s.shape() {
        return Err(Error::invalid(format!(
            "EFT needs equal shapes, got {:?}, {:?}, {:?}",
            z_pt_t.shape(),
            z_ft_s.shape(),
            z_pt_s.shape()
        )));
    }
    if alpha == 0.0 {
        return Ok(z_pt_t.clone());
    }
    let delta = z_ft_s.sub(z_pt_s);
    let mut out = z_pt_t.clone();
    out.axpy(alpha, &delta);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::adapter_init;
    use crate::banks::{Schema, Split};
    use crate::numerics::{mat_exp, orthogonality_defect, SkewSymmetric};
    use proptest::prelude::*;

    fn bank(model: &str, logits: Matrix) -> LogitBank {
        let m = logits.cols();
        let schema = Schema::new((0..m).map(|i| format!("class_{i}")).collect(), m).unwrap();
        LogitBank::new(model, "toy", Split::Train, schema, logits, None).unwrap()
    }

    fn trained(d: usize, m: usize, seed: u64) -> Adapter {
        let mut a = adapter_init(d, m, seed).unwrap();
        let mut k = 0.0;
        a.update_params(|id, p| {
            if id != crate::diffkit::ParamId::Skew {
                for v in p.data_mut() {
                    k += 1.0;
                    *v += 0.05 * (k * 0.37f64).sin();
                }
            }
        })
        .unwrap();
        a
    }

    fn logits(n: usize, m: usize, phase: f64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(phase.to_bits());
        Matrix::from_fn(n, m, |_, _| rng.random_range(-0.8..0.8))
    }

    #[test]
    fn self_transfer_is_a_no_op() {
        let a = trained(6, 6, 2);
        let weak = bank("weak", logits(50, 6, 0.0));
        let t = basis_change(&a, &weak, &weak, &TransferConfig::default()).unwrap();
        let w = basis_map(&a, &weak, &weak, &TransferConfig::default()).unwrap().rotation;
        assert!(w.max_abs_diff(&Matrix::identity(6)) < 1e-6);
        let diff = t.forward(&weak.logits).unwrap().max_abs_diff(&a.forward(&weak.logits).unwrap());
        assert!(diff < 1e-6);
        let twice = basis_change(&t, &weak, &weak, &TransferConfig::default()).unwrap();
        assert!(twice.forward(&weak.logits).unwrap().max_abs_diff(&a.forward(&weak.logits).unwrap()) < 1e-6);
        let p = t.provenance.unwrap();
        assert_eq!((p.beta, p.mode.as_str(), p.apply.as_str()), (500.0, "basis_change", "transposed"));
    }

    #[test]
    fn huge_beta_matches_naive() {
        let a = trained(6, 6, 3);
        let weak = bank("weak", logits(40, 6, 0.0));
        let strong = bank("strong", logits(40, 6, 1.3));
        let cfg = TransferConfig { beta: 1e12, ..TransferConfig::default() };
        let t = basis_change(&a, &weak, &strong, &cfg).unwrap();
        let naive = naive_transfer(&a, &strong).unwrap();
        assert!(t.forward(&strong.logits).unwrap().max_abs_diff(&naive) < 1e-4);
    }

    #[test]
    fn planted_rotation_is_recovered() {
        let a = trained(5, 5, 4);
        let w_s = a.transition.projection().clone();
        let r = mat_exp(&SkewSymmetric::from_upper(5, |i, j| 0.3 * (i as f64 - j as f64 + 0.5)));
        let z_s = logits(30, 5, 0.2);
        let z_t = z_s.matmul_t(&w_s).matmul_t(&r).matmul(&w_s);
        let weak = bank("weak", z_s);
        let strong = LogitBank { logits: z_t, ..bank("strong", Matrix::zeros(30, 5)) };
        let cfg = TransferConfig { beta: 0.0, ..TransferConfig::default() };
        let w = basis_map(&a, &weak, &strong, &cfg).unwrap().rotation;
        assert!(w.max_abs_diff(&r) < 1e-5, "{w:?} {r:?}");
    }

    #[test]
    fn transferred_transition_stays_orthonormal_and_inverse() {
        let a = trained(8, 6, 5);
        let weak = bank("weak", logits(40, 6, 0.0));
        let strong = bank("strong", logits(40, 6, 2.0));
        for basis_feature in [BasisFeature::InputH, BasisFeature::OutputH] {
            for logit_slice_for_h in [LogitSlice::Full, LogitSlice::TaskOnly] {
                let cfg = TransferConfig { basis_feature, logit_slice_for_h, ..TransferConfig::default() };
                let t = basis_change(&a, &weak, &strong, &cfg).unwrap();
                assert!(t.transition.orthogonality_defect() < 1e-8);
                assert!(t.transition.round_trip().max_abs_diff(&Matrix::identity(6)) < 1e-8);
                assert_eq!(t.mlp, a.mlp);
            }
        }
        let cfg = TransferConfig { apply: ApplyMode::ProjectionOnly, ..TransferConfig::default() };
        let t = basis_change(&a, &weak, &strong, &cfg).unwrap();
        assert_eq!(t.transition.reconstruction(), a.transition.reconstruction());
        assert!(orthogonality_defect(t.transition.projection()) < 1e-8);
    }

    #[test]
    fn naive_mode_and_fresh_adapter() {
        let a = adapter_init(6, 6, 1).unwrap();
        let strong = bank("strong", logits(10, 6, 0.5));
        assert!(naive_transfer(&a, &strong).unwrap().max_abs_diff(&strong.logits) < 1e-6);
        let cfg = TransferConfig { mode: TransferMode::Naive, ..TransferConfig::default() };
        let t = basis_change(&a, &strong, &strong, &cfg).unwrap();
        assert_eq!(t.transition, a.transition);
        assert_eq!(t.provenance.unwrap().mode, "naive");
    }

    #[test]
    fn mismatches_are_rejected() {
        let a = trained(6, 6, 2);
        let weak = bank("weak", logits(10, 6, 0.0));
        let short = bank("strong", logits(9, 6, 0.0));
        assert!(matches!(
            basis_change(&a, &weak, &short, &TransferConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
        let cfg = TransferConfig { beta: -1.0, ..TransferConfig::default() };
        assert!(basis_change(&a, &weak, &weak, &cfg).is_err());
    }

    #[test]
    fn eft_examples() {
        let row = |v: &[f64]| Matrix::new(1, v.len(), v.to_vec()).unwrap();
        let out = eft_logits(&row(&[0.2, 0.1]), &row(&[0.9, 0.0]), &row(&[0.5, 0.3]), 1.0).unwrap();
        assert!(out.max_abs_diff(&row(&[0.6, -0.2])) < 1e-15);
        let pt = row(&[0.2, 0.1]);
        assert_eq!(eft_logits(&pt, &row(&[0.9, 0.0]), &row(&[0.5, 0.3]), 0.0).unwrap(), pt);
        assert_eq!(eft_logits(&pt, &row(&[0.4, 0.4]), &row(&[0.4, 0.4]), 3.0).unwrap(), pt);
        assert!(eft_logits(&pt, &row(&[0.4]), &row(&[0.4, 0.4]), 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn larger_beta_stays_closer_to_identity(seed in 0u64..1000, b1 in 0.01f64..100.0) {
            let a = trained(5, 5, seed);
            let weak = bank("weak", logits(20, 5, seed as f64 * 0.1));
            let strong = bank("strong", logits(20, 5, seed as f64 * 0.1 + 0.9));
            let dist = |beta: f64| {
                let cfg = TransferConfig { beta, ..TransferConfig::default() };
                basis_map(&a, &weak, &strong, &cfg).unwrap().rotation.sub(&Matrix::identity(5)).frobenius_norm()
            };
            prop_assert!(dist(10.0 * b1) <= dist(b1) + 1e-6);
        }
    }
}
