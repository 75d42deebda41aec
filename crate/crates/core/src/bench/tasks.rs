//! Synthetic task pairs: Gaussian clusters and Markov-source character text.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{mix_seed, NetworkSpec};
use crate::tensor::Matrix;
use crate::trainer::{MetricKind, Tolerance};

pub const CLUSTER_DIM: usize = 16;
pub const CLUSTER_CLASSES: usize = 4;
pub const CLUSTER_STD: f64 = 0.5;
pub const CLUSTER_RADIUS: f64 = 3.0;

pub const ALPHABET: usize = 16;
pub const CONTEXT: usize = 8;

/// Number of samples in each split of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub fisher_pool: usize,
    pub retention: usize,
    pub task_b_train: usize,
    pub task_b_val: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Clusters,
    Charlm,
}

impl PairKind {
    pub const ALL: [PairKind; 2] = [PairKind::Clusters, PairKind::Charlm];

    pub fn key(self) -> &'static str {
        match self {
            PairKind::Clusters => "clusters",
            PairKind::Charlm => "charlm",
        }
    }

    /// The character model sees far noisier inputs (six of its eight context
    /// positions carry no signal about the next character), so it gets more
    /// data to learn from than the cluster pair.
    pub fn split_sizes(self) -> SplitSizes {
        match self {
            PairKind::Clusters => SplitSizes {
                pretrain: 4096,
                fisher_pool: 1024,
                retention: 1024,
                task_b_train: 2048,
                task_b_val: 512,
            },
            PairKind::Charlm => SplitSizes {
                pretrain: 32768,
                fisher_pool: 1024,
                retention: 1024,
                task_b_train: 8192,
                task_b_val: 1024,
            },
        }
    }

    pub fn network_spec(self) -> NetworkSpec {
        match self {
            PairKind::Clusters => NetworkSpec::classifier(CLUSTER_CLASSES),
            PairKind::Charlm => NetworkSpec::char_lm(ALPHABET, CONTEXT),
        }
    }

    /// Head trained during pre-training and read for retention.
    pub fn task_a_head(self) -> &'static str {
        match self {
            PairKind::Clusters => "head",
            PairKind::Charlm => "lm",
        }
    }

    /// Head trained during fine-tuning.
    pub fn task_b_head(self) -> &'static str {
        match self {
            PairKind::Clusters => "head",
            PairKind::Charlm => "lm",
        }
    }

    pub fn task_b_metric(self) -> MetricKind {
        match self {
            PairKind::Clusters => MetricKind::Accuracy,
            PairKind::Charlm => MetricKind::Perplexity,
        }
    }

    /// Held-out task-A cross-entropy for the classifier (accuracy saturates
    /// near 1 and hides forgetting); perplexity for the language model.
    pub fn retention_metric(self) -> MetricKind {
        match self {
            PairKind::Clusters => MetricKind::Loss,
            PairKind::Charlm => MetricKind::Perplexity,
        }
    }

    /// How far a regularized run's task-B metric may trail the
    /// unregularized one and still count as matched.
    pub fn tolerance(self) -> Tolerance {
        match self {
            PairKind::Clusters => Tolerance::Absolute(0.02),
            PairKind::Charlm => Tolerance::Relative(0.05),
        }
    }
}

impl std::str::FromStr for PairKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clusters" => Ok(PairKind::Clusters),
            "charlm" => Ok(PairKind::Charlm),
            other => Err(Error::Config(format!("unknown task pair {other:?} (expected clusters or charlm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskA {
    pub pretrain: Dataset,
    pub fisher_pool: Dataset,
    pub retention: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskB {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub kind: PairKind,
    pub seed: u64,
    pub task_a: TaskA,
    pub task_b: TaskB,
}

impl TaskPair {
    pub fn generate(kind: PairKind, seed: u64) -> Result<Self> {
        match kind {
            PairKind::Clusters => make_clusters(seed),
            PairKind::Charlm => make_charlm(seed),
        }
    }
}

fn sample_key(inputs: &Matrix, r: usize, label: usize) -> Vec<u64> {
    inputs
        .row(r)
        .iter()
        .map(|v| v.to_bits())
        .chain(std::iter::once(label as u64))
        .collect()
}

/// Fails if any sample (inputs and label) appears in two of the splits.
pub fn check_disjoint(splits: &[&Dataset]) -> Result<()> {
    let mut seen: Vec<HashSet<Vec<u64>>> = Vec::new();
    for (s, d) in splits.iter().enumerate() {
        let keys: HashSet<Vec<u64>> = (0..d.len()).map(|r| sample_key(d.inputs(), r, d.labels()[r])).collect();
        for (t, other) in seen.iter().enumerate() {
            if keys.iter().any(|k| other.contains(k)) {
                return Err(Error::Data(format!("splits {t} and {s} share a sample")));
            }
        }
        seen.push(keys);
    }
    Ok(())
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn random_rotation(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v = random_unit(rng, dim);
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

fn cluster_split(rng: &mut ChaCha8Rng, centers: &[Vec<f64>], n: usize) -> Result<Dataset> {
    let noise = Normal::new(0.0, CLUSTER_STD).expect("valid std");
    let k = centers.len();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let dim = centers[0].len();
    let mut data = Vec::with_capacity(n * dim);
    for &y in &labels {
        data.extend(centers[y].iter().map(|c| c + noise.sample(rng)));
    }
    Dataset::new(Matrix::new(n, dim, data)?, labels)
}

/// Task A: four Gaussian clusters (σ = 0.5) with centers on the radius-3
/// sphere in R¹⁶. Task B: the same construction after a random rotation
/// and translation of the centers. Labels are exactly balanced.
pub fn make_clusters(seed: u64) -> Result<TaskPair> {
    let sizes = PairKind::Clusters.split_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC1));
    let centers_a: Vec<Vec<f64>> = (0..CLUSTER_CLASSES)
        .map(|_| random_unit(&mut rng, CLUSTER_DIM).into_iter().map(|x| x * CLUSTER_RADIUS).collect())
        .collect();
    let rot = random_rotation(&mut rng, CLUSTER_DIM);
    let shift: Vec<f64> = random_unit(&mut rng, CLUSTER_DIM).into_iter().map(|x| x * CLUSTER_RADIUS).collect();
    let centers_b: Vec<Vec<f64>> = centers_a
        .iter()
        .map(|c| {
            rot.iter()
                .zip(&shift)
                .map(|(r, s)| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() + s)
                .collect()
        })
        .collect();
    let pretrain = cluster_split(&mut rng, &centers_a, sizes.pretrain)?;
    let fisher_pool = cluster_split(&mut rng, &centers_a, sizes.fisher_pool)?;
    let retention = cluster_split(&mut rng, &centers_a, sizes.retention)?;
    check_disjoint(&[&pretrain, &fisher_pool, &retention])?;
    let train = cluster_split(&mut rng, &centers_b, sizes.task_b_train)?;
    let val = cluster_split(&mut rng, &centers_b, sizes.task_b_val)?;
    Ok(TaskPair {
        kind: PairKind::Clusters,
        seed,
        task_a: TaskA {
            pretrain,
            fisher_pool,
            retention,
        },
        task_b: TaskB { train, val },
    })
}

/// Second-order Markov source: the next character depends on the previous two.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    /// `table[c1 * ALPHABET + c2]` is the distribution of the next character.
    pub table: Vec<Vec<f64>>,
}

impl MarkovSource {
    /// Rows drawn from a sparse Dirichlet, then tilted by `favored_weight`
    /// toward the characters in `favored`.
    pub fn random(seed: u64, favored: std::ops::Range<usize>, favored_weight: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = Gamma::new(0.25, 1.0).expect("valid shape");
        let table = (0..ALPHABET * ALPHABET)
            .map(|_| {
                let mut row: Vec<f64> = (0..ALPHABET)
                    .map(|c| {
                        let w: f64 = gamma.sample(&mut rng);
                        let w = w.max(1e-12);
                        if favored.contains(&c) {
                            w * favored_weight
                        } else {
                            w
                        }
                    })
                    .collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                row
            })
            .collect();
        Self { table }
    }

    /// Stationary distribution over (c1, c2) pairs by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let states = ALPHABET * ALPHABET;
        let mut pi = vec![1.0 / states as f64; states];
        for _ in 0..10_000 {
            let mut next = vec![0.0; states];
            for (s, &p) in pi.iter().enumerate() {
                let c2 = s % ALPHABET;
                for (c3, &q) in self.table[s].iter().enumerate() {
                    next[c2 * ALPHABET + c3] += p * q;
                }
            }
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats per character.
    pub fn entropy_rate(&self) -> f64 {
        self.stationary()
            .iter()
            .zip(&self.table)
            .map(|(p, row)| p * row.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum::<f64>())
            .sum()
    }

    /// Perplexity of the true source: a lower bound for any model.
    pub fn perplexity_bound(&self) -> f64 {
        self.entropy_rate().exp()
    }

    pub fn generate(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        let samplers: Vec<WeightedIndex<f64>> = self
            .table
            .iter()
            .map(|row| WeightedIndex::new(row).expect("positive weights"))
            .collect();
        let mut out = Vec::with_capacity(len);
        let (mut a, mut b) = (rng.gen_range(0..ALPHABET), rng.gen_range(0..ALPHABET));
        // burn-in toward the stationary distribution
        for _ in 0..256 {
            let c = samplers[a * ALPHABET + b].sample(rng);
            (a, b) = (b, c);
        }
        out.push(a);
        out.push(b);
        while out.len() < len {
            let c = samplers[a * ALPHABET + b].sample(rng);
            out.push(c);
            (a, b) = (b, c);
        }
        out
    }
}

/// One-hot encodes non-overlapping windows of `CONTEXT` characters with the
/// following character as label. Windows whose key is in `exclude` are
/// skipped; the keys of accepted windows are added to it.
fn window_split(
    source: &MarkovSource,
    rng: &mut ChaCha8Rng,
    n: usize,
    exclude: &mut HashSet<Vec<usize>>,
    record: bool,
) -> Result<Dataset> {
    let mut data = Vec::with_capacity(n * CONTEXT * ALPHABET);
    let mut labels = Vec::with_capacity(n);
    let mut new_keys = Vec::new();
    let mut attempts = 0;
    while labels.len() < n {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Data("could not draw enough distinct windows".into()));
        }
        let text = source.generate(rng, (CONTEXT + 1) * (n - labels.len()) + 2);
        for w in text.chunks_exact(CONTEXT + 1) {
            if labels.len() == n {
                break;
            }
            if exclude.contains(w) {
                continue;
            }
            for &c in &w[..CONTEXT] {
                let mut one_hot = [0.0; ALPHABET];
                one_hot[c] = 1.0;
                data.extend_from_slice(&one_hot);
            }
            labels.push(w[CONTEXT]);
            if record {
                new_keys.push(w.to_vec());
            }
        }
    }
    exclude.extend(new_keys);
    Dataset::new(Matrix::new(n, CONTEXT * ALPHABET, data)?, labels)
}

/// The two character sources of a charlm pair, regenerated from its seed.
pub fn charlm_sources(seed: u64) -> (MarkovSource, MarkovSource) {
    (
        MarkovSource::random(mix_seed(seed, 0x5A), 0..ALPHABET / 2, 4.0),
        MarkovSource::random(mix_seed(seed, 0x5B), ALPHABET / 2..ALPHABET, 4.0),
    )
}

/// Task A and task B are sampled from two independent second-order Markov
/// sources over a shared 16-character alphabet, tilted toward opposite
/// halves of the alphabet. Samples are 8-character contexts, one-hot
/// encoded, labelled with the next character. A window used in one task-A
/// split never reappears in a later one.
pub fn make_charlm(seed: u64) -> Result<TaskPair> {
    let sizes = PairKind::Charlm.split_sizes();
    let (src_a, src_b) = charlm_sources(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC2));
    let mut used = HashSet::new();
    let pretrain = window_split(&src_a, &mut rng, sizes.pretrain, &mut used, true)?;
    let fisher_pool = window_split(&src_a, &mut rng, sizes.fisher_pool, &mut used, true)?;
    let retention = window_split(&src_a, &mut rng, sizes.retention, &mut used, false)?;
    check_disjoint(&[&pretrain, &fisher_pool, &retention])?;
    let mut none = HashSet::new();
    let train = window_split(&src_b, &mut rng, sizes.task_b_train, &mut none, false)?;
    let val = window_split(&src_b, &mut rng, sizes.task_b_val, &mut none, false)?;
    Ok(TaskPair {
        kind: PairKind::Charlm,
        seed,
        task_a: TaskA {
            pretrain,
            fisher_pool,
            retention,
        },
        task_b: TaskB { train, val },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clusters_are_balanced_and_reproducible() {
        let p = make_clusters(3).unwrap();
        for d in [&p.task_a.pretrain, &p.task_b.train, &p.task_b.val] {
            let mut counts = [0usize; CLUSTER_CLASSES];
            d.labels().iter().for_each(|&y| counts[y] += 1);
            assert!(counts.iter().all(|&c| c == d.len() / CLUSTER_CLASSES));
        }
        assert_eq!(p, make_clusters(3).unwrap());
        assert_ne!(p.task_a.pretrain, make_clusters(4).unwrap().task_a.pretrain);
        assert_eq!(p.task_a.pretrain.len(), PairKind::Clusters.split_sizes().pretrain);
        assert_eq!(p.task_a.fisher_pool.len(), 1024);
        assert_eq!(p.task_a.retention.len(), 1024);
    }

    #[test]
    fn charlm_splits_disjoint_and_reproducible() {
        let p = make_charlm(5).unwrap();
        assert_eq!(p, make_charlm(5).unwrap());
        check_disjoint(&[&p.task_a.pretrain, &p.task_a.fisher_pool, &p.task_a.retention]).unwrap();
        for r in 0..10 {
            let row = p.task_a.pretrain.inputs().row(r);
            assert_eq!(row.iter().sum::<f64>(), CONTEXT as f64);
        }
    }

    #[test]
    fn overlap_is_detected() {
        let p = make_clusters(1).unwrap();
        let dup = p.task_a.pretrain.subset(&[7]).unwrap();
        assert!(matches!(check_disjoint(&[&p.task_a.pretrain, &dup]), Err(Error::Data(_))));
    }

    #[test]
    fn source_tables_are_distributions() {
        let (a, b) = charlm_sources(9);
        for s in [&a, &b] {
            for row in &s.table {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let pi = s.stationary();
            assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let h = s.entropy_rate();
            assert!(h > 0.0 && h < (ALPHABET as f64).ln());
        }
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_source_has_full_entropy() {
        let s = MarkovSource {
            table: vec![vec![1.0 / ALPHABET as f64; ALPHABET]; ALPHABET * ALPHABET],
        };
        assert!((s.perplexity_bound() - ALPHABET as f64).abs() < 1e-9);
    }
}
