//! Independent reference implementations and fixtures shared by the
//! integration tests.
//!
//! The oracles follow the textbook definitions with explicit loops over the
//! clicked set and the non-clicked set, so they allow any number of clicked
//! candidates; fixtures use exactly one, matching the library.

#![allow(dead_code)]

use ibbr::bias::{label_collection, LabelMap};
use ibbr::corpus::{generate_synthetic, SynthSpec, SyntheticCorpus};
use ibbr::encoder::EncoderConfig;
use ibbr::losses::{FairnessConfig, Regularizer};
use ibbr::trainer::{OptimizerKind, TrainConfig, TrainingSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// PRF with clicked set `g1` and non-clicked set `g0` (indices into `scores`).
pub fn oracle_prf(scores: &[f64], g1: &[usize], g0: &[usize]) -> f64 {
    let mut fired = 0.0;
    for &j in g1 {
        for &k in g0 {
            if scores[j] >= scores[k] {
                fired += 1.0;
            }
        }
    }
    fired / (g1.len() * g0.len()) as f64
}

pub fn oracle_nprf(scores: &[f64], g1: &[usize], g0: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &j in g1 {
        for &k in g0 {
            if scores[j] >= scores[k] {
                acc += scores[j] * scores[j];
            }
        }
    }
    (acc / (g1.len() * g0.len()) as f64).sqrt()
}

pub fn oracle_pd(male: &[f64], female: &[f64]) -> f64 {
    if male.is_empty() || female.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for &c in male {
        for &d in female {
            acc += (c - d) * (c - d);
        }
    }
    acc / (male.len() * female.len()) as f64
}

fn oracle_mean(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in xs {
        acc += x;
    }
    acc / xs.len() as f64
}

fn oracle_var(xs: &[f64]) -> f64 {
    let mu = oracle_mean(xs);
    let mut acc = 0.0;
    for &x in xs {
        acc += (x - mu) * (x - mu);
    }
    acc / xs.len() as f64
}

/// Welch t squared, or with `literal` the squared mean gap over the root
/// denominator, squared.
pub fn oracle_ts(male: &[f64], female: &[f64], eps: f64, literal: bool) -> f64 {
    if male.is_empty() || female.is_empty() {
        return 0.0;
    }
    let diff = oracle_mean(male) - oracle_mean(female);
    let denom = oracle_var(male) / male.len() as f64 + oracle_var(female) / female.len() as f64 + eps;
    if literal {
        let t = diff * diff / denom.sqrt();
        t * t
    } else {
        diff * diff / denom
    }
}

/// A random pair: scores drawn from a coarse grid so that ties occur.
pub struct PairFixture {
    pub scores: Vec<f64>,
    pub clicked: usize,
    pub labels: Vec<i8>,
}

impl PairFixture {
    pub fn random(rng: &mut ChaCha8Rng, max_k: usize) -> Self {
        let k = rng.gen_range(2..=max_k);
        let clicked = rng.gen_range(0..k);
        let scores = (0..k).map(|_| rng.gen_range(-16i32..=16) as f64 / 8.0).collect();
        let mut labels: Vec<i8> = (0..k).map(|_| rng.gen_range(-1..=1)).collect();
        if labels[clicked] == 0 {
            labels[clicked] = if rng.gen_bool(0.5) { 1 } else { -1 };
        }
        Self {
            scores,
            clicked,
            labels,
        }
    }

    pub fn non_clicked(&self) -> Vec<usize> {
        (0..self.scores.len()).filter(|&j| j != self.clicked).collect()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Synthetic corpus sizes used by the reproduction checks.
pub const TRAIN_QUERIES: usize = 200;
pub const DEV_QUERIES: usize = 50;
pub const TEST_QUERIES: usize = 50;
/// Candidates per query; large enough that Recall@10 can miss.
pub const CANDIDATES: usize = 20;

pub fn synth_spec(group_imbalance: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        num_queries: TRAIN_QUERIES + DEV_QUERIES + TEST_QUERIES,
        k: CANDIDATES,
        vocab_size: 2000,
        bias_strength: 0.8,
        group_imbalance,
        seed,
    }
}

/// Desk-scale training setup: small batches, a short schedule and a learning
/// rate suited to the hashed encoder.
pub fn desk_config(regularizer: Regularizer) -> TrainConfig {
    TrainConfig {
        batch_size: 20,
        learning_rate: 1e-3,
        epochs: 3,
        seed: 0,
        optimizer: OptimizerKind::Adam,
        fairness: FairnessConfig {
            regularizer,
            ..FairnessConfig::default()
        },
        encoder: EncoderConfig {
            vocab_buckets: 4096,
            ..EncoderConfig::default()
        },
        k: CANDIDATES,
        ..TrainConfig::default()
    }
}

pub struct Splits {
    pub corpus: SyntheticCorpus,
    pub labels: LabelMap,
    pub train: TrainingSet,
    pub dev: TrainingSet,
    pub test: TrainingSet,
}

pub fn synth_splits(spec: &SynthSpec, cfg: &TrainConfig) -> Splits {
    let corpus = generate_synthetic(spec).unwrap();
    let labels = label_collection(&corpus.collection, &corpus.lexicon);
    let parts = corpus
        .split(&[TRAIN_QUERIES, DEV_QUERIES, TEST_QUERIES])
        .unwrap();
    let mut sets = parts.into_iter().map(|pairs| {
        TrainingSet::new(
            pairs,
            &corpus.queries,
            &corpus.collection,
            &labels,
            cfg.encoder.vocab_buckets,
        )
        .unwrap()
    });
    let (train, dev, test) = (
        sets.next().unwrap(),
        sets.next().unwrap(),
        sets.next().unwrap(),
    );
    Splits {
        corpus,
        labels,
        train,
        dev,
        test,
    }
}
