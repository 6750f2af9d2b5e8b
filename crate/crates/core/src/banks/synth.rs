//! Synthetic two-model feature banks.
//!
//! Both models observe the same semantic latents through their own random
//! orthogonal embedding plus isotropic noise; the weak model is noisier. A
//! "fine-tuned" variant moves each adapted class's text feature toward the
//! mean of that class's training image features.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{normalize_to_f32, ClassSplit, FeatureBank, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Dimension `k` of the shared semantic latent space.
    pub latent_dim: usize,
    pub n_classes: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    /// Auxiliary anchor candidates (prototypes outside the task set).
    pub n_aux_candidates: usize,
    /// Noise of the weak model's features.
    pub eta_weak: f64,
    /// Noise of the strong model's features.
    pub eta_strong: f64,
    /// Per-sample spread of image latents around their class prototype.
    pub epsilon: f64,
    /// Fine-tuning strength: 0 leaves text features untouched.
    pub lambda: f64,
    /// Length of a per-class offset, shared by both models, between where a
    /// class's images sit and its text prototype. 0 disables it.
    pub domain_shift: f64,
    /// Fraction of task classes held out as novel (0 = base-to-base).
    pub novel_fraction: f64,
    /// Feature dimension of the weak model (defaults to `latent_dim` when 0).
    pub weak_dim: usize,
    /// Feature dimension of the strong model (defaults to `latent_dim` when 0).
    pub strong_dim: usize,
    pub dataset_id: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The reference configuration used throughout the test suite.
    fn default() -> Self {
        Self {
            latent_dim: 64,
            n_classes: 20,
            samples_per_class: 100,
            test_samples_per_class: 100,
            n_aux_candidates: 200,
            eta_weak: 0.9,
            eta_strong: 0.45,
            epsilon: 0.35,
            lambda: 0.6,
            domain_shift: 0.0,
            novel_fraction: 0.0,
            weak_dim: 0,
            strong_dim: 0,
            dataset_id: "synthetic".into(),
            seed: 1,
        }
    }
}

/// Train and test banks for one role.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleBanks {
    pub train: FeatureBank,
    pub test: FeatureBank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthBanks {
    pub weak_pt: RoleBanks,
    pub weak_ft: RoleBanks,
    pub strong_pt: RoleBanks,
    pub strong_ft_reference: RoleBanks,
    /// Text-only banks holding the auxiliary candidates, one per model.
    pub weak_pool: FeatureBank,
    pub strong_pool: FeatureBank,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.n_classes < 2 || self.samples_per_class == 0 {
            return Err(Error::invalid(
                "synthetic config needs latent_dim >= 1, n_classes >= 2, samples_per_class >= 1",
            ));
        }
        let noiseless = self.eta_weak == 0.0 && self.eta_strong == 0.0;
        if !noiseless && !(self.eta_weak > self.eta_strong) {
            return Err(Error::invalid(format!(
                "weak noise {} must exceed strong noise {}",
                self.eta_weak, self.eta_strong
            )));
        }
        if !(self.eta_strong >= 0.0) || !(self.epsilon >= 0.0) || !(self.domain_shift >= 0.0) {
            return Err(Error::invalid("noise scales must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.novel_fraction) {
            return Err(Error::invalid(format!(
                "novel_fraction {} outside [0, 1)",
                self.novel_fraction
            )));
        }
        for d in [self.weak_dim, self.strong_dim] {
            if d != 0 && d < self.latent_dim {
                return Err(Error::invalid(format!(
                    "model feature dimension {d} is below latent_dim {}",
                    self.latent_dim
                )));
            }
        }
        Ok(())
    }

    fn dim(&self, d: usize) -> usize {
        if d == 0 {
            self.latent_dim
        } else {
            d
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// `base + scale · n` with `n ~ N(0, I)`.
fn perturbed(rng: &mut ChaCha8Rng, base: &[f64], scale: f64) -> Vec<f64> {
    perturbed_scaled(rng, base, scale)
}

/// `base + scale · n` with `n ~ N(0, I/len)`, so `E‖n‖² = 1`.
fn perturbed_unit(rng: &mut ChaCha8Rng, base: &[f64], scale: f64) -> Vec<f64> {
    perturbed_scaled(rng, base, scale / (base.len() as f64).sqrt())
}

fn perturbed_scaled(rng: &mut ChaCha8Rng, base: &[f64], s: f64) -> Vec<f64> {
    let noise = gaussian(rng, base.len());
    base.iter().zip(noise).map(|(b, e)| b + s * e).collect()
}

/// Random `rows × cols` matrix with orthonormal columns (Gram–Schmidt on Gaussians).
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = gaussian(rng, rows);
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

struct Model {
    dim: usize,
    columns: Vec<Vec<f64>>,
    eta: f64,
}

impl Model {
    fn embed(&self, latent: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (c, col) in latent.iter().zip(&self.columns) {
            out.iter_mut().zip(col).for_each(|(o, v)| *o += c * v);
        }
        out
    }

    fn observe(&self, rng: &mut ChaCha8Rng, latent: &[f64]) -> Vec<f64> {
        let mut v = perturbed_unit(rng, &self.embed(latent), self.eta);
        normalize(&mut v);
        v
    }
}

struct Latents {
    train: Vec<(u32, Vec<f64>)>,
    test: Vec<(u32, Vec<f64>)>,
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthBanks> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.latent_dim;

    let mut prototype = || {
        let mut g = gaussian(&mut rng, k);
        normalize(&mut g);
        g
    };
    let task_protos: Vec<Vec<f64>> = (0..config.n_classes).map(|_| prototype()).collect();
    let aux_protos: Vec<Vec<f64>> = (0..config.n_aux_candidates).map(|_| prototype()).collect();
    let shifts: Vec<Vec<f64>> = if config.domain_shift > 0.0 {
        (0..config.n_classes)
            .map(|_| prototype().iter().map(|v| v * config.domain_shift).collect())
            .collect()
    } else {
        vec![vec![0.0; k]; config.n_classes]
    };
    let task_names: Vec<String> = (0..config.n_classes).map(|i| format!("class_{i:03}")).collect();
    let aux_names: Vec<String> = (0..config.n_aux_candidates).map(|i| format!("aux_{i:03}")).collect();

    let n_novel = (config.novel_fraction * config.n_classes as f64).round() as usize;
    let n_base = config.n_classes - n_novel;
    let class_split = (n_novel > 0).then(|| ClassSplit {
        base: task_names[..n_base].to_vec(),
        novel: task_names[n_base..].to_vec(),
    });

    let mut draw = |per_class: usize| {
        let mut out = Vec::with_capacity(per_class * config.n_classes);
        for (c, g) in task_protos.iter().enumerate() {
            let centre: Vec<f64> = g.iter().zip(&shifts[c]).map(|(a, b)| a + b).collect();
            for _ in 0..per_class {
                let mut u = perturbed(&mut rng, &centre, config.epsilon);
                normalize(&mut u);
                out.push((c as u32, u));
            }
        }
        out.shuffle(&mut rng);
        out
    };
    let latents = Latents {
        train: draw(config.samples_per_class),
        test: draw(config.test_samples_per_class),
    };

    let weak = Model {
        dim: config.dim(config.weak_dim),
        columns: random_orthonormal(&mut rng, config.dim(config.weak_dim), k),
        eta: config.eta_weak,
    };
    let strong = Model {
        dim: config.dim(config.strong_dim),
        columns: random_orthonormal(&mut rng, config.dim(config.strong_dim), k),
        eta: config.eta_strong,
    };

    let adapted: Vec<bool> = (0..config.n_classes)
        .map(|c| config.lambda > 0.0 && c < n_base)
        .collect();

    let mut build = |model: &Model, model_id: &str| -> Result<(RoleBanks, RoleBanks, FeatureBank)> {
        let mut text = |g: &[f64]| model.observe(&mut rng, g);
        let task_text: Vec<Vec<f64>> = task_protos.iter().map(|g| text(g)).collect();
        let aux_text: Vec<Vec<f64>> = aux_protos.iter().map(|g| text(g)).collect();
        let mut images = |set: &[(u32, Vec<f64>)]| -> Vec<Vec<f64>> {
            set.iter().map(|(_, u)| model.observe(&mut rng, u)).collect()
        };
        let train_img = images(&latents.train);
        let test_img = images(&latents.test);

        let mut means = vec![vec![0.0; model.dim]; config.n_classes];
        for ((label, _), v) in latents.train.iter().zip(&train_img) {
            means[*label as usize].iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        let pt_text: IndexMap<String, Vec<f32>> = task_names
            .iter()
            .zip(&task_text)
            .map(|(n, t)| (n.clone(), normalize_to_f32(t)))
            .collect();
        let mut ft_text = pt_text.clone();
        for (c, name) in task_names.iter().enumerate() {
            if !adapted[c] {
                continue;
            }
            let count = config.samples_per_class as f64;
            let moved: Vec<f64> = task_text[c]
                .iter()
                .zip(&means[c])
                .map(|(t, m)| (1.0 - config.lambda) * t + config.lambda * m / count)
                .collect();
            ft_text.insert(name.clone(), normalize_to_f32(&moved));
        }

        let flat = |rows: &[Vec<f64>]| -> Vec<f32> { rows.iter().flat_map(|r| normalize_to_f32(r)).collect() };
        let labels = |set: &[(u32, Vec<f64>)]| -> Vec<u32> { set.iter().map(|(l, _)| *l).collect() };
        let bank = |id: &str, split: Split, img: &[Vec<f64>], set: &[(u32, Vec<f64>)], text: &IndexMap<String, Vec<f32>>| {
            FeatureBank::new(
                id,
                config.dataset_id.clone(),
                split,
                model.dim,
                flat(img),
                Some(labels(set)),
                text.clone(),
                class_split.clone(),
            )
        };
        let pt_id = format!("{model_id}_pt");
        let ft_id = format!("{model_id}_ft");
        let pt = RoleBanks {
            train: bank(&pt_id, Split::Train, &train_img, &latents.train, &pt_text)?,
            test: bank(&pt_id, Split::Test, &test_img, &latents.test, &pt_text)?,
        };
        let ft = RoleBanks {
            train: bank(&ft_id, Split::Train, &train_img, &latents.train, &ft_text)?,
            test: bank(&ft_id, Split::Test, &test_img, &latents.test, &ft_text)?,
        };
        let pool_text: IndexMap<String, Vec<f32>> = aux_names
            .iter()
            .zip(&aux_text)
            .map(|(n, t)| (n.clone(), normalize_to_f32(t)))
            .collect();
        let pool = FeatureBank::new(
            pt_id,
            format!("{}_anchors", config.dataset_id),
            Split::Train,
            model.dim,
            Vec::new(),
            None,
            pool_text,
            None,
        )?;
        Ok((pt, ft, pool))
    };

    let (weak_pt, weak_ft, weak_pool) = build(&weak, "weak")?;
    let (strong_pt, strong_ft_reference, strong_pool) = build(&strong, "strong")?;
    Ok(SynthBanks {
        weak_pt,
        weak_ft,
        strong_pt,
        strong_ft_reference,
        weak_pool,
        strong_pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            latent_dim: 16,
            n_classes: 5,
            samples_per_class: 10,
            test_samples_per_class: 10,
            n_aux_candidates: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_generate(&tiny()).unwrap(), synth_generate(&tiny()).unwrap());
        let other = SynthConfig { seed: 2, ..tiny() };
        assert_ne!(synth_generate(&tiny()).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn zero_lambda_leaves_text_untouched() {
        let b = synth_generate(&SynthConfig { lambda: 0.0, ..tiny() }).unwrap();
        assert_eq!(b.weak_pt.train.text_features(), b.weak_ft.train.text_features());
        assert_eq!(b.weak_pt.train.image_features(), b.weak_ft.train.image_features());
    }

    #[test]
    fn weak_must_be_noisier() {
        let bad = SynthConfig { eta_weak: 0.3, eta_strong: 0.3, ..tiny() };
        assert!(matches!(synth_generate(&bad), Err(Error::InvalidArgument(_))));
        let ok = SynthConfig { eta_weak: 0.0, eta_strong: 0.0, ..tiny() };
        assert!(synth_generate(&ok).is_ok());
    }

    #[test]
    fn novel_classes_are_not_adapted() {
        let b = synth_generate(&SynthConfig { novel_fraction: 0.4, ..tiny() }).unwrap();
        let split = b.weak_ft.train.class_split().unwrap().clone();
        assert_eq!(split.novel.len(), 2);
        for c in &split.novel {
            assert_eq!(b.weak_ft.train.text(c), b.weak_pt.train.text(c));
        }
        for c in &split.base {
            assert_ne!(b.weak_ft.train.text(c), b.weak_pt.train.text(c));
        }
    }

    #[test]
    fn different_feature_dims() {
        let b = synth_generate(&SynthConfig { weak_dim: 20, strong_dim: 32, ..tiny() }).unwrap();
        assert_eq!(b.weak_pt.test.feature_dim(), 20);
        assert_eq!(b.strong_pool.feature_dim(), 32);
        assert_eq!(b.strong_pool.n_samples(), 0);
    }
}
