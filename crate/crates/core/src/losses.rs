//! Ranking loss, normed pairwise ranking fairness (nPRF) and the in-batch
//! balancing regularizers built on it, each with analytic gradients with
//! respect to the ranking scores.
//!
//! The nPRF of a pair whose clicked passage has score `r` is
//!
//! ```text
//! nPRF = sqrt( (1 / (n1 * n0)) * sum_{k non-clicked} r^2 * 1[r >= R_k] )
//! ```
//!
//! with `n1 = 1`. The indicators are held fixed in the backward pass, so the
//! gradient flows through `r^2` only.

use serde::{Deserialize, Serialize};

use crate::bias::BiasLabel;
use crate::corpus::DataPair;
use crate::error::{Error, Result};

/// Group of a pair, decided by its clicked passage's bias label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Male,
    Female,
    Neutral,
}

impl Group {
    pub fn from_label(label: i8) -> Self {
        match label {
            1 => Group::Male,
            -1 => Group::Female,
            _ => Group::Neutral,
        }
    }
}

/// A data pair with one ranking score per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub pair: DataPair,
    pub scores: Vec<f64>,
    pub bias_labels: Vec<i8>,
    /// Per-candidate gender magnitude, used by rank-biased metrics.
    pub magnitudes: Vec<f64>,
    pub clicked_group: Group,
}

impl ScoredPair {
    pub fn new(pair: DataPair, scores: Vec<f64>, labels: &[BiasLabel]) -> Result<Self> {
        if scores.len() != pair.k() || labels.len() != pair.k() {
            return Err(Error::InvalidInput(format!(
                "query {}: {} candidates but {} scores and {} labels",
                pair.query_id,
                pair.k(),
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!(
                "score {s} for query {}",
                pair.query_id
            )));
        }
        let bias_labels: Vec<i8> = labels.iter().map(|l| l.label).collect();
        let magnitudes = labels.iter().map(|l| l.magnitude).collect();
        let clicked_group = Group::from_label(bias_labels[pair.clicked_index]);
        Ok(Self {
            pair,
            scores,
            bias_labels,
            magnitudes,
            clicked_group,
        })
    }

    /// Bare scores with the given per-candidate labels and zero magnitudes.
    pub fn from_scores(scores: Vec<f64>, clicked_index: usize, labels: &[i8]) -> Result<Self> {
        let candidates = (0..scores.len()).map(|j| format!("c{j}")).collect();
        let pair = DataPair::new("q", candidates, clicked_index)?;
        let labels: Vec<BiasLabel> = labels
            .iter()
            .map(|&l| BiasLabel {
                magnitude: f64::from(l),
                label: l,
            })
            .collect();
        Self::new(pair, scores, &labels)
    }

    pub fn clicked_index(&self) -> usize {
        self.pair.clicked_index
    }

    pub fn clicked_score(&self) -> f64 {
        self.scores[self.pair.clicked_index]
    }
}

/// A loss value and its gradient with respect to one pair's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Softmax negative log-likelihood of the clicked candidate.
pub fn ranking_loss(sp: &ScoredPair) -> PairLoss {
    ranking_loss_scores(&sp.scores, sp.clicked_index())
}

pub fn ranking_loss_scores(scores: &[f64], clicked: usize) -> PairLoss {
    let (arg_max, max) = scores
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    let rest: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg_max)
        .map(|(_, s)| (s - max).exp())
        .sum();
    let log_norm = rest.ln_1p();
    let value = (max - scores[clicked]) + log_norm;
    let lse = max + log_norm;
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    grad[clicked] -= 1.0;
    PairLoss { value, grad }
}

/// nPRF of the pair's clicked passage; see the module docs.
pub fn nprf(sp: &ScoredPair) -> Result<PairLoss> {
    if sp.clicked_group == Group::Neutral {
        return Err(Error::InvalidInput(format!(
            "query {}: nPRF is undefined for a neutral clicked passage",
            sp.pair.query_id
        )));
    }
    nprf_scores(&sp.scores, sp.clicked_index())
}

pub fn nprf_scores(scores: &[f64], clicked: usize) -> Result<PairLoss> {
    if scores.len() < 2 || clicked >= scores.len() {
        return Err(Error::InvalidInput(
            "nPRF needs a clicked candidate and at least one non-clicked candidate".into(),
        ));
    }
    let r = scores[clicked];
    let r2 = r * r;
    let mut acc = 0.0;
    let mut fired = 0usize;
    for (k, &s) in scores.iter().enumerate() {
        if k != clicked && r >= s {
            acc += r2;
            fired += 1;
        }
    }
    let norm = (scores.len() - 1) as f64;
    let value = (acc / norm).sqrt();
    let mut grad = vec![0.0; scores.len()];
    if value > 0.0 {
        grad[clicked] = r * fired as f64 / (norm * value);
    }
    Ok(PairLoss { value, grad })
}

/// Per-pair nPRFs of the male- and female-clicked pairs of one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchFairnessState {
    pub male_nprfs: Vec<f64>,
    pub female_nprfs: Vec<f64>,
    /// Batch positions of the entries of `male_nprfs`.
    pub male_index: Vec<usize>,
    /// Batch positions of the entries of `female_nprfs`.
    pub female_index: Vec<usize>,
}

impl BatchFairnessState {
    pub fn from_values(male: Vec<f64>, female: Vec<f64>) -> Self {
        Self {
            male_index: (0..male.len()).collect(),
            female_index: (male.len()..male.len() + female.len()).collect(),
            male_nprfs: male,
            female_nprfs: female,
        }
    }

    /// Compute nPRFs for every non-neutral pair; also returns each pair's
    /// nPRF gradient (`None` for neutral-clicked pairs).
    pub fn from_batch(batch: &[ScoredPair]) -> Result<(Self, Vec<Option<Vec<f64>>>)> {
        let mut state = Self::default();
        let mut grads = Vec::with_capacity(batch.len());
        for (i, sp) in batch.iter().enumerate() {
            match sp.clicked_group {
                Group::Neutral => grads.push(None),
                group => {
                    let n = nprf(sp)?;
                    if group == Group::Male {
                        state.male_nprfs.push(n.value);
                        state.male_index.push(i);
                    } else {
                        state.female_nprfs.push(n.value);
                        state.female_index.push(i);
                    }
                    grads.push(Some(n.grad));
                }
            }
        }
        Ok((state, grads))
    }
}

/// A fairness loss and its gradient with respect to each group's nPRFs.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessLoss {
    pub value: f64,
    pub male_grad: Vec<f64>,
    pub female_grad: Vec<f64>,
}

impl FairnessLoss {
    fn zero(state: &BatchFairnessState) -> Self {
        Self {
            value: 0.0,
            male_grad: vec![0.0; state.male_nprfs.len()],
            female_grad: vec![0.0; state.female_nprfs.len()],
        }
    }
}

/// Mean squared difference over all cross-group nPRF pairs.
pub fn pd_loss(state: &BatchFairnessState) -> FairnessLoss {
    let (m, f) = (&state.male_nprfs, &state.female_nprfs);
    if m.is_empty() || f.is_empty() {
        return FairnessLoss::zero(state);
    }
    let norm = (m.len() * f.len()) as f64;
    let mut acc = 0.0;
    for &c in m {
        for &d in f {
            let diff = c - d;
            acc += diff * diff;
        }
    }
    let scale = 2.0 / norm;
    let male_grad = m
        .iter()
        .map(|&c| scale * f.iter().map(|&d| c - d).sum::<f64>())
        .collect();
    let female_grad = f
        .iter()
        .map(|&d| -scale * m.iter().map(|&c| c - d).sum::<f64>())
        .collect();
    FairnessLoss {
        value: acc / norm,
        male_grad,
        female_grad,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    #[default]
    None,
    Pd,
    Ts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaMode {
    #[default]
    Fixed,
    /// `lambda = softplus(theta)` with `theta` trained alongside the encoder.
    /// Gradient descent on the total loss pushes `lambda` toward zero whenever
    /// the fairness term is positive; prefer a fixed grid.
    Trainable,
}

/// Form of the two-sample statistic used by the TS regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TsFormula {
    /// Welch t squared: `(mu_m - mu_f)^2 / denom`.
    #[default]
    StandardTSquared,
    /// `((mu_m - mu_f)^2 / sqrt(denom))^2`, i.e. the squared mean gap squared again.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairnessConfig {
    pub regularizer: Regularizer,
    pub lambda_mode: LambdaMode,
    pub lambda_value: f64,
    pub ts_formula: TsFormula,
    pub denom_epsilon: f64,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        Self {
            regularizer: Regularizer::None,
            lambda_mode: LambdaMode::Fixed,
            lambda_value: 1.0,
            ts_formula: TsFormula::StandardTSquared,
            denom_epsilon: 1e-8,
        }
    }
}

impl FairnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_value >= 0.0) || !self.lambda_value.is_finite() {
            return Err(Error::Config("lambda_value must be a non-negative number".into()));
        }
        if !(self.denom_epsilon > 0.0) {
            return Err(Error::Config("denom_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// The `theta` with `softplus(theta) = lambda_value`.
    pub fn initial_theta(&self) -> f64 {
        inverse_softplus(self.lambda_value.max(1e-12))
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mean(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in xs {
        acc += x;
    }
    acc / xs.len() as f64
}

/// Population variance (1/n normalization) around `mu`.
fn variance(xs: &[f64], mu: f64) -> f64 {
    let mut acc = 0.0;
    for &x in xs {
        let d = x - mu;
        acc += d * d;
    }
    acc / xs.len() as f64
}

/// Squared two-sample statistic between the two groups' nPRFs with an
/// explicit denominator offset (`epsilon >= 0`).
pub fn ts_statistic(male: &[f64], female: &[f64], formula: TsFormula, epsilon: f64) -> FairnessLoss {
    if male.is_empty() || female.is_empty() {
        return FairnessLoss {
            value: 0.0,
            male_grad: vec![0.0; male.len()],
            female_grad: vec![0.0; female.len()],
        };
    }
    let (nm, nf) = (male.len() as f64, female.len() as f64);
    let mu_m = mean(male);
    let mu_f = mean(female);
    let var_m = variance(male, mu_m);
    let var_f = variance(female, mu_f);
    let denom = var_m / nm + var_f / nf + epsilon;
    let diff = mu_m - mu_f;
    let (value, d_diff, d_denom) = match formula {
        TsFormula::StandardTSquared => {
            let value = diff * diff / denom;
            (value, 2.0 * diff / denom, -value / denom)
        }
        TsFormula::Literal => {
            let t = diff * diff / denom.sqrt();
            let value = t * t;
            (value, 4.0 * diff * diff * diff / denom, -value / denom)
        }
    };
    let male_grad = male
        .iter()
        .map(|&x| d_diff / nm + d_denom * 2.0 * (x - mu_m) / (nm * nm))
        .collect();
    let female_grad = female
        .iter()
        .map(|&y| -d_diff / nf + d_denom * 2.0 * (y - mu_f) / (nf * nf))
        .collect();
    FairnessLoss {
        value,
        male_grad,
        female_grad,
    }
}

pub fn ts_loss(state: &BatchFairnessState, cfg: &FairnessConfig) -> FairnessLoss {
    ts_statistic(
        &state.male_nprfs,
        &state.female_nprfs,
        cfg.ts_formula,
        cfg.denom_epsilon,
    )
}

/// Batch objective `mean ranking loss + lambda * fairness loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub ranking: f64,
    pub fairness: f64,
    pub lambda: f64,
    /// Gradient of `value` with respect to each pair's scores.
    pub score_grads: Vec<Vec<f64>>,
    /// Gradient with respect to `theta` in trainable-lambda mode.
    pub theta_grad: Option<f64>,
}

/// `theta` is the trainable-lambda parameter; when `None` it starts from
/// `cfg.lambda_value`. It is ignored in fixed mode.
pub fn total_loss(batch: &[ScoredPair], cfg: &FairnessConfig, theta: Option<f64>) -> Result<TotalLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let b = batch.len() as f64;
    let mut rank_sum = 0.0;
    let mut score_grads = Vec::with_capacity(batch.len());
    for sp in batch {
        let l = ranking_loss(sp);
        rank_sum += l.value;
        score_grads.push(l.grad.into_iter().map(|g| g / b).collect::<Vec<f64>>());
    }
    let ranking = rank_sum / b;

    let (lambda, theta) = match cfg.lambda_mode {
        LambdaMode::Fixed => (cfg.lambda_value, None),
        LambdaMode::Trainable => {
            let t = theta.unwrap_or_else(|| cfg.initial_theta());
            (softplus(t), Some(t))
        }
    };

    if cfg.regularizer == Regularizer::None {
        return Ok(TotalLoss {
            value: ranking,
            ranking,
            fairness: 0.0,
            lambda,
            score_grads,
            theta_grad: theta.map(|_| 0.0),
        });
    }

    let (state, nprf_grads) = BatchFairnessState::from_batch(batch)?;
    let fair = match cfg.regularizer {
        Regularizer::Pd => pd_loss(&state),
        Regularizer::Ts => ts_loss(&state, cfg),
        Regularizer::None => unreachable!(),
    };
    let members = state
        .male_index
        .iter()
        .zip(&fair.male_grad)
        .chain(state.female_index.iter().zip(&fair.female_grad));
    for (&i, &upstream) in members {
        let dn = nprf_grads[i].as_ref().expect("grouped pairs carry nPRF grads");
        for (g, d) in score_grads[i].iter_mut().zip(dn) {
            *g += lambda * upstream * d;
        }
    }
    Ok(TotalLoss {
        value: ranking + lambda * fair.value,
        ranking,
        fairness: fair.value,
        lambda,
        score_grads,
        theta_grad: theta.map(|t| fair.value * sigmoid(t)),
    })
}
