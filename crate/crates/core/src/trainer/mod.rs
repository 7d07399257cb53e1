//! Joint optimization of the encoder under ranking loss plus an optional
//! in-batch fairness regularizer.

mod config;
mod gradcheck;
mod grid;
mod optim;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bias::{BiasLabel, LabelMap};
use crate::corpus::{Collection, DataPair, QuerySet};
use crate::encoder::{dot, Activation, EncoderGrads, EncoderParams, Role, TokenBag};
use crate::error::{Error, Result};
use crate::losses::{softplus, total_loss, LambdaMode, ScoredPair};
use crate::metrics::{evaluate, EvalConfig, EvalReport};

pub use config::{parse_regularizer, parse_ts_formula, OptimizerKind, TrainConfig, CONFIG_KEYS};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use grid::{grid_search_lambda, GridEntry, GridOutcome, GridReport};
pub use optim::{Moments, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

/// Data pairs with their texts pre-hashed for one encoder geometry.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pairs: Vec<DataPair>,
    query_bags: Vec<TokenBag>,
    passage_bags: Vec<TokenBag>,
    candidates: Vec<Vec<usize>>,
    labels: Vec<Vec<BiasLabel>>,
}

impl TrainingSet {
    /// Passages missing from `labels` are treated as neutral.
    pub fn new(
        pairs: Vec<DataPair>,
        queries: &QuerySet,
        collection: &Collection,
        labels: &LabelMap,
        vocab_buckets: usize,
    ) -> Result<Self> {
        let mut passage_index = std::collections::HashMap::new();
        let mut passage_bags = Vec::new();
        let mut query_bags = Vec::with_capacity(pairs.len());
        let mut candidates = Vec::with_capacity(pairs.len());
        let mut pair_labels = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            let query = queries.get(&pair.query_id).ok_or_else(|| {
                Error::InvalidInput(format!("unknown query id {}", pair.query_id))
            })?;
            query_bags.push(TokenBag::new(&query.tokens, vocab_buckets));
            let mut idx = Vec::with_capacity(pair.k());
            let mut lab = Vec::with_capacity(pair.k());
            for pid in &pair.candidates {
                let next = passage_bags.len();
                let i = match passage_index.get(pid.as_str()) {
                    Some(&i) => i,
                    None => {
                        let passage = collection.get(pid).ok_or_else(|| {
                            Error::InvalidInput(format!("unknown passage id {pid}"))
                        })?;
                        passage_bags.push(TokenBag::new(&passage.tokens, vocab_buckets));
                        passage_index.insert(pid.as_str(), next);
                        next
                    }
                };
                idx.push(i);
                lab.push(labels.get(pid).copied().unwrap_or(BiasLabel::NEUTRAL));
            }
            candidates.push(idx);
            pair_labels.push(lab);
        }
        Ok(Self {
            pairs,
            query_bags,
            passage_bags,
            candidates,
            labels: pair_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[DataPair] {
        &self.pairs
    }

    /// Score every pair.
    pub fn score(&self, params: &EncoderParams) -> Result<Vec<ScoredPair>> {
        (0..self.len()).map(|i| Ok(self.forward(params, i)?.0)).collect()
    }

    pub fn evaluate(&self, params: &EncoderParams, cfg: &EvalConfig) -> Result<EvalReport> {
        Ok(evaluate(&self.score(params)?, cfg))
    }

    fn forward(
        &self,
        params: &EncoderParams,
        i: usize,
    ) -> Result<(ScoredPair, Activation, Vec<Activation>)> {
        let qa = params.forward(Role::Query, &self.query_bags[i]);
        let pas: Vec<Activation> = self.candidates[i]
            .iter()
            .map(|&c| params.forward(Role::Passage, &self.passage_bags[c]))
            .collect();
        let scores = pas.iter().map(|pa| dot(&qa.output, &pa.output)).collect();
        let sp = ScoredPair::new(self.pairs[i].clone(), scores, &self.labels[i])?;
        Ok((sp, qa, pas))
    }
}

/// Batches of pair indices for one epoch. The shuffle is keyed by
/// `(seed, epoch)`; the last batch may be short.
pub fn make_batches(n_pairs: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Linear warmup to `base` over `warmup` steps, then linear decay to zero at
/// `total` steps.
pub fn learning_rate(base: f64, step: u64, warmup: u64, total: u64) -> f64 {
    let up = if warmup == 0 {
        1.0
    } else {
        step as f64 / warmup as f64
    };
    let down = if total > warmup {
        total.saturating_sub(step) as f64 / (total - warmup) as f64
    } else {
        0.0
    };
    base * up.min(down).max(0.0)
}

/// Per-step record; one line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub ranking: f64,
    pub fairness: f64,
    pub lambda: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub theta_grad: Option<f64>,
}

impl StepLog {
    pub const HEADER: &'static str = "step\tlr\tL_rank\tL_fair\tlambda\ttotal";

    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.lr, self.ranking, self.fairness, self.lambda, self.total
        )
    }
}

pub fn write_log(path: impl AsRef<Path>, log: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(StepLog::HEADER);
    text.push('\n');
    for l in log {
        text.push_str(&l.line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    /// Trainable-lambda parameter (`lambda = softplus(theta)`).
    pub lambda_theta: f64,
    pub step: u64,
    /// Next epoch to run.
    pub epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub moments: Vec<Moments>,
    pub theta_moments: Moments,
}

const STATE_MAGIC: &[u8; 8] = b"IBBRSTA\0";

impl TrainState {
    /// Fresh state for training `n_pairs` pairs under `cfg`.
    pub fn new(cfg: &TrainConfig, n_pairs: usize) -> Result<Self> {
        cfg.validate()?;
        if n_pairs == 0 {
            return Err(Error::InvalidInput("no training pairs".into()));
        }
        let params = EncoderParams::new(cfg.encoder, cfg.seed)?;
        let moments = params.slices().iter().map(|s| Moments::zeros(s.len())).collect();
        let per_epoch = n_pairs.div_ceil(cfg.batch_size) as u64;
        let total_steps = per_epoch * cfg.epochs as u64;
        let warmup_steps = (cfg.warmup_ratio * total_steps as f64).floor() as u64;
        Ok(Self {
            params,
            lambda_theta: cfg.fairness.initial_theta(),
            step: 0,
            epoch: 0,
            total_steps,
            warmup_steps,
            moments,
            theta_moments: Moments::zeros(1),
        })
    }

    pub fn lambda(&self, cfg: &TrainConfig) -> f64 {
        match cfg.fairness.lambda_mode {
            LambdaMode::Fixed => cfg.fairness.lambda_value,
            LambdaMode::Trainable => softplus(self.lambda_theta),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        self.params.write_to(w)?;
        w.write_all(STATE_MAGIC)?;
        for v in [self.step, self.epoch, self.total_steps, self.warmup_steps] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.lambda_theta.to_le_bytes())?;
        for m in self.moments.iter().chain(std::iter::once(&self.theta_moments)) {
            for x in m.m.iter().chain(&m.v) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("bad training state: {m}"));
        let params = EncoderParams::read_from(r)?;
        let mut buf8 = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut buf8).map_err(|_| bad("truncated"))?;
            Ok(buf8)
        };
        if &next(r)? != STATE_MAGIC {
            return Err(bad("missing state section"));
        }
        let mut ints = [0u64; 4];
        for v in &mut ints {
            *v = u64::from_le_bytes(next(r)?);
        }
        let lambda_theta = f64::from_le_bytes(next(r)?);
        let mut read_moments = |r: &mut R, len: usize| -> Result<Moments> {
            let mut m = Moments::zeros(len);
            for x in m.m.iter_mut().chain(m.v.iter_mut()) {
                *x = f64::from_le_bytes(next(r)?);
            }
            Ok(m)
        };
        let lens: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
        let moments = lens
            .into_iter()
            .map(|len| read_moments(r, len))
            .collect::<Result<Vec<_>>>()?;
        let theta_moments = read_moments(r, 1)?;
        Ok(Self {
            params,
            lambda_theta,
            step: ints[0],
            epoch: ints[1],
            total_steps: ints[2],
            warmup_steps: ints[3],
            moments,
            theta_moments,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// Loss and gradients of one batch at the current parameters.
pub struct BatchGradients {
    pub loss: crate::losses::TotalLoss,
    pub grads: EncoderGrads,
}

/// Forward and backward pass over `batch` (indices into `set`).
pub fn batch_gradients(
    state: &TrainState,
    set: &TrainingSet,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<BatchGradients> {
    let params = &state.params;
    let mut scored = Vec::with_capacity(batch.len());
    let mut acts = Vec::with_capacity(batch.len());
    for &i in batch {
        let (sp, qa, pas) = set.forward(params, i)?;
        scored.push(sp);
        acts.push((qa, pas));
    }
    let loss = total_loss(&scored, &cfg.fairness, Some(state.lambda_theta))?;
    if !loss.value.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|&i| set.pairs[i].query_id.as_str()).collect();
        return Err(Error::NonFinite(format!(
            "loss {} at step {} for batch [{}]",
            loss.value,
            state.step,
            ids.join(", ")
        )));
    }

    let mut grads = params.zero_grads();
    let dim = params.config().dim;
    for ((&i, (qa, pas)), g) in batch.iter().zip(&acts).zip(&loss.score_grads) {
        let mut dq = vec![0.0; dim];
        for (pa, &gj) in pas.iter().zip(g) {
            if gj == 0.0 {
                continue;
            }
            for (d, z) in dq.iter_mut().zip(&pa.output) {
                *d += gj * z;
            }
        }
        params.backward(Role::Query, &set.query_bags[i], qa, &dq, &mut grads);
        for ((pa, &gj), &c) in pas.iter().zip(g).zip(&set.candidates[i]) {
            if gj == 0.0 {
                continue;
            }
            let dp: Vec<f64> = qa.output.iter().map(|z| gj * z).collect();
            params.backward(Role::Passage, &set.passage_bags[c], pa, &dp, &mut grads);
        }
    }
    Ok(BatchGradients { loss, grads })
}

/// One optimizer step on `batch`.
pub fn train_step(
    state: &mut TrainState,
    set: &TrainingSet,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<StepLog> {
    let BatchGradients { loss, grads } = batch_gradients(state, set, batch, cfg)?;
    let lr = learning_rate(cfg.learning_rate, state.step, state.warmup_steps, state.total_steps);
    let t = state.step + 1;
    for ((p, g), m) in state
        .params
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.moments.iter_mut())
    {
        optim::update(cfg.optimizer, p, g, m, lr, cfg.weight_decay, t);
    }
    if cfg.fairness.lambda_mode == LambdaMode::Trainable {
        let g = loss.theta_grad.unwrap_or(0.0);
        let mut theta = [state.lambda_theta];
        optim::update(cfg.optimizer, &mut theta, &[g], &mut state.theta_moments, lr, 0.0, t);
        state.lambda_theta = theta[0];
    }
    let log = StepLog {
        step: state.step,
        lr,
        ranking: loss.ranking,
        fairness: loss.fairness,
        lambda: loss.lambda,
        total: loss.value,
        grad_norm: grads.norm(),
        theta_grad: loss.theta_grad,
    };
    state.step += 1;
    Ok(log)
}

/// Run the next epoch of `state`.
pub fn train_epoch(state: &mut TrainState, set: &TrainingSet, cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    let batches = make_batches(set.len(), cfg.batch_size, cfg.seed, state.epoch);
    let mut log = Vec::with_capacity(batches.len());
    for batch in &batches {
        log.push(train_step(state, set, batch, cfg)?);
    }
    state.epoch += 1;
    Ok(log)
}

/// Continue `state` until `cfg.epochs` epochs have run.
pub fn resume(state: &mut TrainState, set: &TrainingSet, cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    let mut log = Vec::new();
    while state.epoch < cfg.epochs as u64 {
        log.extend(train_epoch(state, set, cfg)?);
    }
    Ok(log)
}

pub fn train(set: &TrainingSet, cfg: &TrainConfig) -> Result<(TrainState, Vec<StepLog>)> {
    let mut state = TrainState::new(cfg, set.len())?;
    let log = resume(&mut state, set, cfg)?;
    Ok((state, log))
}
