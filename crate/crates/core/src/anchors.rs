//! Auxiliary anchor classes and the strategies for choosing them.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::banks::FeatureBank;
use crate::error::{Error, Result};
use crate::numerics::dot;

/// Candidate auxiliary classes with one text feature each.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPool {
    names: Vec<String>,
    features: Vec<Vec<f64>>,
}

impl AnchorPool {
    pub fn new(names: Vec<String>, features: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != features.len() {
            return Err(Error::invalid(format!(
                "{} names but {} features",
                names.len(),
                features.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate anchor candidate {n:?}")));
            }
        }
        Ok(Self { names, features })
    }

    /// Every text feature of `bank`; image features are ignored.
    pub fn from_bank(bank: &FeatureBank) -> Self {
        let (names, features) = bank
            .text_features()
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|&x| x as f64).collect()))
            .unzip();
        Self { names, features }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn feature(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.features[i].as_slice())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Random,
    Fps,
    Topk,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Fps => "fps",
            Strategy::Topk => "topk",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "fps" => Ok(Strategy::Fps),
            "topk" => Ok(Strategy::Topk),
            other => Err(Error::invalid(format!(
                "unknown anchor strategy {other:?} (expected random, fps or topk)"
            ))),
        }
    }
}

/// Choose `m − task.len()` auxiliary class names from `pool`.
///
/// `task_features[i]` is the text feature of `task[i]` in the same embedding
/// space as the pool; only `fps` and `topk` read it. Candidates whose name is
/// a task class are skipped.
pub fn sample_anchors(
    pool: &AnchorPool,
    task: &[String],
    task_features: &[Vec<f64>],
    m: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<String>> {
    if m < task.len() {
        return Err(Error::invalid(format!(
            "M = {m} is smaller than the {} task classes",
            task.len()
        )));
    }
    if strategy != Strategy::Random && task_features.len() != task.len() {
        return Err(Error::invalid(format!(
            "{} task classes but {} task features",
            task.len(),
            task_features.len()
        )));
    }
    let n_aux = m - task.len();
    let candidates: Vec<usize> = (0..pool.len())
        .filter(|&i| !task.contains(&pool.names[i]))
        .collect();
    if candidates.len() < n_aux {
        return Err(Error::Capacity {
            required: n_aux,
            available: candidates.len(),
        });
    }
    if n_aux == 0 {
        return Ok(Vec::new());
    }
    let names: Vec<&str> = candidates.iter().map(|&i| pool.names[i].as_str()).collect();
    let points: Vec<&[f64]> = candidates.iter().map(|&i| pool.features[i].as_slice()).collect();
    let chosen = match strategy {
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            index::sample(&mut rng, candidates.len(), n_aux).into_vec()
        }
        Strategy::Fps => {
            let mut reference = vec![centroid(task_features)];
            reference.extend(task_features.iter().cloned());
            farthest_points(&points, &names, &reference, n_aux)
        }
        Strategy::Topk => top_k(&points, &names, task_features, n_aux),
    };
    Ok(chosen.into_iter().map(|i| names[i].to_string()).collect())
}

fn centroid(points: &[Vec<f64>]) -> Vec<f64> {
    let dim = points.first().map_or(0, Vec::len);
    let mut c = vec![0.0; dim];
    for p in points {
        for (a, b) in c.iter_mut().zip(p) {
            *a += b;
        }
    }
    let n = points.len().max(1) as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point selection of `k` indices into `points`. Each step
/// takes the point whose minimum distance to `reference` and to everything
/// already picked is largest; equal distances go to the smaller name.
///
/// On unit vectors squared Euclidean distance is `2 − 2 cos`, so this is the
/// same ordering as cosine distance.
pub fn farthest_points(points: &[&[f64]], names: &[&str], reference: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|p| reference.iter().map(|r| sq_dist(p, r)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut taken = vec![false; points.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(points.len()) {
        let mut best: Option<usize> = None;
        for i in (0..points.len()).filter(|&i| !taken[i]) {
            best = match best {
                None => Some(i),
                Some(b) if min_d[i] > min_d[b] || (min_d[i] == min_d[b] && names[i] < names[b]) => Some(i),
                keep => keep,
            };
        }
        let b = best.expect("k bounded by point count");
        taken[b] = true;
        out.push(b);
        for i in 0..points.len() {
            min_d[i] = min_d[i].min(sq_dist(points[i], points[b]));
        }
    }
    out
}

fn top_k(points: &[&[f64]], names: &[&str], task_features: &[Vec<f64>], k: usize) -> Vec<usize> {
    let score: Vec<f64> = points
        .iter()
        .map(|p| {
            task_features
                .iter()
                .map(|t| dot(p, t))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then_with(|| names[a].cmp(names[b])));
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;

    fn circle_pool(n: usize) -> AnchorPool {
        let names = (0..n).map(|i| format!("aux_{i:03}")).collect();
        let feats = (0..n)
            .map(|i| {
                let t = i as f64 * 0.7 + 0.1;
                vec![t.cos(), t.sin(), 0.0]
            })
            .collect();
        AnchorPool::new(names, feats).unwrap()
    }

    fn task() -> (Vec<String>, Vec<Vec<f64>>) {
        (
            vec!["cat".into(), "dog".into()],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]],
        )
    }

    #[test]
    fn m_equal_to_task_count_gives_no_anchors() {
        let (t, f) = task();
        for s in [Strategy::Random, Strategy::Fps, Strategy::Topk] {
            assert!(sample_anchors(&circle_pool(5), &t, &f, 2, s, 1).unwrap().is_empty());
        }
    }

    #[test]
    fn one_dimensional_fps_takes_the_extremes() {
        let pos = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let feats: Vec<Vec<f64>> = pos.iter().map(|&p| vec![p]).collect();
        let names = ["m2", "m1", "zero", "p1", "p2"];
        let cand: Vec<usize> = vec![0, 1, 3, 4];
        let points: Vec<&[f64]> = cand.iter().map(|&i| feats[i].as_slice()).collect();
        let cnames: Vec<&str> = cand.iter().map(|&i| names[i]).collect();
        let task = vec![vec![0.0]];
        let mut reference = vec![centroid(&task)];
        reference.extend(task);
        let picked: Vec<&str> = farthest_points(&points, &cnames, &reference, 2)
            .into_iter()
            .map(|i| cnames[i])
            .collect();
        let mut sorted = picked.clone();
        sorted.sort();
        assert_eq!(sorted, ["m2", "p2"]);
        // Exhaustive check of the greedy criterion: the first pick maximizes the
        // distance to the task point.
        assert!(points[cand.iter().position(|&i| names[i] == picked[0]).unwrap()][0].abs() == 2.0);
    }

    #[test]
    fn random_is_deterministic_per_seed() {
        let (t, f) = task();
        let pool = circle_pool(30);
        let a = sample_anchors(&pool, &t, &f, 12, Strategy::Random, 7).unwrap();
        let b = sample_anchors(&pool, &t, &f, 12, Strategy::Random, 7).unwrap();
        let c = sample_anchors(&pool, &t, &f, 12, Strategy::Random, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn topk_prefers_similar_candidates() {
        let pool = AnchorPool::new(
            vec!["far".into(), "near".into(), "mid".into()],
            vec![vec![-1.0, 0.0, 0.0], vec![0.9, 0.1, 0.0], vec![0.5, 0.5, 0.0]],
        )
        .unwrap();
        let (t, f) = task();
        assert_eq!(sample_anchors(&pool, &t, &f, 4, Strategy::Topk, 0).unwrap(), ["near", "mid"]);
    }

    #[test]
    fn too_small_pool_is_a_capacity_error() {
        let (t, f) = task();
        let err = sample_anchors(&circle_pool(3), &t, &f, 6, Strategy::Random, 0).unwrap_err();
        assert!(matches!(err, Error::Capacity { required: 4, available: 3 }), "{err}");
        assert!(err.to_string().contains('4') && err.to_string().contains('3'));
    }

    #[test]
    fn task_named_candidates_are_skipped() {
        let pool = AnchorPool::new(
            vec!["cat".into(), "a".into(), "b".into()],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, -1.0, 0.0]],
        )
        .unwrap();
        let (t, f) = task();
        for s in [Strategy::Random, Strategy::Fps, Strategy::Topk] {
            let got = sample_anchors(&pool, &t, &f, 4, s, 3).unwrap();
            assert!(!got.contains(&"cat".to_string()));
        }
        assert!(sample_anchors(&pool, &t, &f, 5, Strategy::Random, 3).is_err());
    }

    proptest! {
        #[test]
        fn outputs_are_disjoint_and_unique(seed in 0u64..500, m in 2usize..20, which in 0usize..3) {
            let (t, f) = task();
            let strategy = [Strategy::Random, Strategy::Fps, Strategy::Topk][which];
            let got = sample_anchors(&circle_pool(20), &t, &f, m, strategy, seed).unwrap();
            prop_assert_eq!(got.len(), m - 2);
            let set: std::collections::HashSet<_> = got.iter().collect();
            prop_assert_eq!(set.len(), got.len());
            prop_assert!(got.iter().all(|g| !t.contains(g)));
        }

        #[test]
        fn fps_ignores_pool_order(shift in 0usize..20, m in 3usize..15) {
            let (t, f) = task();
            let pool = circle_pool(20);
            let mut idx: Vec<usize> = (0..20).collect();
            idx.rotate_left(shift);
            let shuffled = AnchorPool::new(
                idx.iter().map(|&i| pool.names[i].clone()).collect(),
                idx.iter().map(|&i| pool.features[i].clone()).collect(),
            ).unwrap();
            prop_assert_eq!(
                sample_anchors(&pool, &t, &f, m, Strategy::Fps, 0).unwrap(),
                sample_anchors(&shuffled, &t, &f, m, Strategy::Fps, 0).unwrap()
            );
        }
    }
}
