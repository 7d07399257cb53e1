//! Central-difference verification of every analytic gradient.
//!
//! Each entry draws random fixtures, compares analytic and numeric
//! derivatives component-wise with relative error
//! `|a - n| / max(|a|, |n|, 1e-6)`, and records the worst case. Fixtures in
//! which the clicked score lies within `1e-3` of another candidate's score or
//! of zero are skipped: there the nPRF indicator or square root is not
//! differentiable at the probe scale. TS fixtures whose denominator is
//! positive but below `1e-3` are skipped for the same reason.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{batch_gradients, TrainConfig, TrainState, TrainingSet};
use crate::bias::label_collection;
use crate::corpus::{generate_synthetic, SynthSpec};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::losses::{
    nprf_scores, pd_loss, ranking_loss_scores, total_loss, ts_statistic, BatchFairnessState,
    FairnessConfig, LambdaMode, Regularizer, ScoredPair, TsFormula,
};

const DENOM_FLOOR: f64 = 1e-6;
const SKIP_GAP: f64 = 1e-3;
const MIN_TS_DENOM: f64 = 1e-3;
const PIPELINE_DIRECTIONS: usize = 8;
const MAX_DRAWS_PER_FIXTURE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Fixtures drawn per entry.
    pub fixtures: usize,
    pub max_k: usize,
    pub max_batch: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            fixtures: 100,
            max_k: 10,
            max_batch: 20,
            step: 1e-5,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub components: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    /// A zero-valued nPRF reported an exactly zero gradient in every probe.
    pub zero_nprf_gradient_exact: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.zero_nprf_gradient_exact && self.entries.iter().all(|e| e.passed)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{:<14} {} checked={} skipped={} components={} max_rel_error={:.3e}\n",
                e.name,
                if e.passed { "PASS" } else { "FAIL" },
                e.checked,
                e.skipped,
                e.components,
                e.max_rel_error
            ));
        }
        out.push_str(&format!(
            "{:<14} {}\n",
            "zero_nprf",
            if self.zero_nprf_gradient_exact { "PASS" } else { "FAIL" }
        ));
        out
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Worst-case accumulator for one entry.
struct Tally {
    name: &'static str,
    checked: usize,
    skipped: usize,
    components: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checked: 0,
            skipped: 0,
            components: 0,
            worst: 0.0,
        }
    }

    /// Compare `analytic` with central differences of `f` around `x`.
    fn compare(&mut self, x: &[f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) {
        self.compare_parts(x, analytic, h, &[1.0], |v| [f(v)]);
    }

    /// Like [`Tally::compare`] for an objective `sum_i weights[i] * parts[i]`.
    /// Each part is differenced on its own so that a large part does not
    /// swamp the rounding resolution of a small one.
    fn compare_parts<const N: usize>(
        &mut self,
        x: &[f64],
        analytic: &[f64],
        h: f64,
        weights: &[f64; N],
        mut f: impl FnMut(&[f64]) -> [f64; N],
    ) {
        let mut probe = x.to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            let numeric = (0..N)
                .map(|p| weights[p] * (up[p] - down[p]) / (2.0 * h))
                .sum();
            self.note(a, numeric);
        }
        self.checked += 1;
    }

    /// Keep drawing until `fixtures` fixtures were checked, giving up after
    /// `MAX_DRAWS_PER_FIXTURE` draws per requested fixture.
    fn more(&self, cfg: &GradCheckConfig) -> bool {
        self.checked < cfg.fixtures && self.drawn() < cfg.fixtures * MAX_DRAWS_PER_FIXTURE
    }

    fn drawn(&self) -> usize {
        self.checked + self.skipped
    }

    fn note(&mut self, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.worst = if e.is_nan() { f64::INFINITY } else { self.worst.max(e) };
        self.components += 1;
    }

    fn finish(self, cfg: &GradCheckConfig) -> GradCheckEntry {
        GradCheckEntry {
            name: self.name.to_string(),
            checked: self.checked,
            skipped: self.skipped,
            components: self.components,
            max_rel_error: self.worst,
            passed: self.checked == cfg.fixtures && self.worst < cfg.tolerance,
        }
    }
}

/// Clicked score too close to a kink of the nPRF.
fn near_kink(scores: &[f64], clicked: usize) -> bool {
    let r = scores[clicked];
    r.abs() < SKIP_GAP
        || scores
            .iter()
            .enumerate()
            .any(|(j, &s)| j != clicked && (r - s).abs() < SKIP_GAP)
}

/// The TS denominator without its offset is positive but so small that the
/// statistic varies on the probe scale.
fn narrow_denominator(batch: &[ScoredPair]) -> bool {
    let (state, _) = BatchFairnessState::from_batch(batch).expect("valid batch");
    let spread = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mu = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n * n)
    };
    if state.male_nprfs.is_empty() || state.female_nprfs.is_empty() {
        return false;
    }
    let s = spread(&state.male_nprfs) + spread(&state.female_nprfs);
    s > 0.0 && s < MIN_TS_DENOM
}

fn random_scores(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// A random batch with at least one pair per group. Layout: the scores of
/// all pairs flattened, with per-pair `(offset, k, clicked, label)`.
struct ScoreBatch {
    scores: Vec<f64>,
    shape: Vec<(usize, usize, usize, Vec<i8>)>,
}

impl ScoreBatch {
    fn random(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Self {
        let b = rng.gen_range(2..=cfg.max_batch.max(2));
        let mut scores = Vec::new();
        let mut shape = Vec::with_capacity(b);
        for i in 0..b {
            let k = rng.gen_range(2..=cfg.max_k.max(2));
            let clicked = rng.gen_range(0..k);
            let mut labels: Vec<i8> = (0..k).map(|_| rng.gen_range(-1..=1)).collect();
            labels[clicked] = match i {
                0 => 1,
                1 => -1,
                _ => rng.gen_range(-1..=1),
            };
            shape.push((scores.len(), k, clicked, labels));
            scores.extend(random_scores(rng, k));
        }
        Self { scores, shape }
    }

    fn pairs(&self, scores: &[f64]) -> Vec<ScoredPair> {
        self.shape
            .iter()
            .map(|(off, k, clicked, labels)| {
                ScoredPair::from_scores(scores[*off..off + k].to_vec(), *clicked, labels)
                    .expect("valid fixture")
            })
            .collect()
    }

    fn near_kink(&self) -> bool {
        self.shape
            .iter()
            .any(|(off, k, clicked, labels)| {
                labels[*clicked] != 0 && near_kink(&self.scores[*off..off + k], *clicked)
            })
    }
}

fn check_ranking(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> GradCheckEntry {
    let mut t = Tally::new("ranking");
    while t.more(cfg) {
        let k = rng.gen_range(2..=cfg.max_k);
        let clicked = rng.gen_range(0..k);
        let x = random_scores(rng, k);
        let a = ranking_loss_scores(&x, clicked).grad;
        t.compare(&x, &a, cfg.step, |s| ranking_loss_scores(s, clicked).value);
    }
    t.finish(cfg)
}

fn check_nprf(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> GradCheckEntry {
    let mut t = Tally::new("nprf");
    while t.more(cfg) {
        let k = rng.gen_range(2..=cfg.max_k);
        let clicked = rng.gen_range(0..k);
        let x = random_scores(rng, k);
        if near_kink(&x, clicked) {
            t.skipped += 1;
            continue;
        }
        let a = nprf_scores(&x, clicked).expect("k >= 2").grad;
        t.compare(&x, &a, cfg.step, |s| nprf_scores(s, clicked).expect("k >= 2").value);
    }
    t.finish(cfg)
}

/// Random nPRF values for both groups; returns (flattened values, male count).
fn random_groups(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> (Vec<f64>, usize) {
    let nm = rng.gen_range(1..cfg.max_batch.max(2));
    let nf = rng.gen_range(1..=(cfg.max_batch - nm).max(1));
    let values = (0..nm + nf).map(|_| rng.gen_range(0.0..1.5)).collect();
    (values, nm)
}

fn check_group_loss(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    cfg: &GradCheckConfig,
    loss: impl Fn(&[f64], &[f64]) -> crate::losses::FairnessLoss,
) -> GradCheckEntry {
    let mut t = Tally::new(name);
    while t.more(cfg) {
        let (x, nm) = random_groups(rng, cfg);
        let l = loss(&x[..nm], &x[nm..]);
        let a: Vec<f64> = l.male_grad.iter().chain(&l.female_grad).copied().collect();
        t.compare(&x, &a, cfg.step, |v| loss(&v[..nm], &v[nm..]).value);
    }
    t.finish(cfg)
}

fn fairness_config(regularizer: Regularizer, formula: TsFormula, lambda: f64) -> FairnessConfig {
    FairnessConfig {
        regularizer,
        lambda_value: lambda,
        ts_formula: formula,
        ..FairnessConfig::default()
    }
}

fn check_total(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    cfg: &GradCheckConfig,
    regularizer: Regularizer,
    formula: TsFormula,
) -> GradCheckEntry {
    let mut t = Tally::new(name);
    while t.more(cfg) {
        let batch = ScoreBatch::random(rng, cfg);
        let fc = fairness_config(regularizer, formula, rng.gen_range(0.1..10.0));
        if batch.near_kink() {
            t.skipped += 1;
            continue;
        }
        let loss = |s: &[f64]| total_loss(&batch.pairs(s), &fc, None).expect("valid batch");
        let at = loss(&batch.scores);
        if regularizer == Regularizer::Ts && narrow_denominator(&batch.pairs(&batch.scores)) {
            t.skipped += 1;
            continue;
        }
        let a: Vec<f64> = at.score_grads.concat();
        t.compare_parts(&batch.scores, &a, cfg.step, &[1.0, at.lambda], |s| {
            let l = loss(s);
            [l.ranking, l.fairness]
        });
    }
    t.finish(cfg)
}

fn check_theta(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> GradCheckEntry {
    let mut t = Tally::new("lambda_theta");
    while t.more(cfg) {
        let i = t.drawn();
        let batch = ScoreBatch::random(rng, cfg);
        let regularizer = if i.is_multiple_of(2) { Regularizer::Pd } else { Regularizer::Ts };
        let fc = FairnessConfig {
            lambda_mode: LambdaMode::Trainable,
            ..fairness_config(regularizer, TsFormula::StandardTSquared, 1.0)
        };
        let pairs = batch.pairs(&batch.scores);
        let theta = rng.gen_range(-3.0..3.0);
        let loss = |th: f64| total_loss(&pairs, &fc, Some(th)).expect("valid batch");
        let a = loss(theta).theta_grad.expect("trainable mode");
        t.compare(&[theta], &[a], cfg.step, |th| loss(th[0]).value);
    }
    t.finish(cfg)
}

fn tiny_encoder(rng: &mut ChaCha8Rng, shared: bool) -> EncoderParams {
    let config = EncoderConfig {
        dim: 4,
        emb_dim: 3,
        vocab_buckets: 13,
        shared_towers: shared,
    };
    let mut p = EncoderParams::new(config, rng.gen()).expect("valid config");
    randomize(&mut p, rng);
    p
}

fn randomize(p: &mut EncoderParams, rng: &mut ChaCha8Rng) {
    for s in p.slices_mut() {
        for x in s.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
}

fn flat(p: &EncoderParams) -> Vec<f64> {
    p.slices().concat()
}

fn set_flat(p: &mut EncoderParams, x: &[f64]) {
    let mut off = 0;
    for s in p.slices_mut() {
        let n = s.len();
        s.copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

fn random_text(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.gen_range(1..6);
    (0..n).map(|_| format!("t{}", rng.gen_range(0..20))).collect()
}

fn check_encoder(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> GradCheckEntry {
    let mut t = Tally::new("encoder_sim");
    while t.more(cfg) {
        let i = t.drawn();
        let mut params = tiny_encoder(rng, i.is_multiple_of(2));
        let q = random_text(rng);
        let d = random_text(rng);
        let mut grads = params.zero_grads();
        params.backward_sim(&q, &d, 1.0, &mut grads);
        let a: Vec<f64> = grads.slices().concat();
        let x = flat(&params);
        t.compare(&x, &a, cfg.step, |v| {
            set_flat(&mut params, v);
            params.sim(&q, &d)
        });
    }
    t.finish(cfg)
}

fn check_pipeline(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> GradCheckEntry {
    let mut t = Tally::new("pipeline");
    while t.more(cfg) {
        let i = t.drawn();
        let spec = SynthSpec {
            num_queries: rng.gen_range(2..=cfg.max_batch.max(2)),
            k: rng.gen_range(2..=cfg.max_k.max(2)),
            vocab_size: 30,
            group_imbalance: 0.5,
            seed: rng.gen(),
            ..SynthSpec::default()
        };
        let corpus = generate_synthetic(&spec).expect("valid spec");
        let labels = label_collection(&corpus.collection, &corpus.lexicon);
        let tc = TrainConfig {
            encoder: EncoderConfig {
                dim: 4,
                emb_dim: 3,
                vocab_buckets: 31,
                shared_towers: i.is_multiple_of(2),
            },
            fairness: fairness_config(
                if i.is_multiple_of(2) { Regularizer::Pd } else { Regularizer::Ts },
                TsFormula::StandardTSquared,
                rng.gen_range(0.1..10.0),
            ),
            ..TrainConfig::default()
        };
        let set = TrainingSet::new(
            corpus.pairs,
            &corpus.queries,
            &corpus.collection,
            &labels,
            tc.encoder.vocab_buckets,
        )
        .expect("consistent corpus");
        let mut state = TrainState::new(&tc, set.len()).expect("valid config");
        randomize(&mut state.params, rng);
        let batch: Vec<usize> = (0..set.len()).collect();
        let scored = set.score(&state.params).expect("valid set");
        if scored
            .iter()
            .any(|sp| sp.bias_labels[sp.clicked_index()] != 0 && near_kink(&sp.scores, sp.clicked_index()))
        {
            t.skipped += 1;
            continue;
        }
        if tc.fairness.regularizer == Regularizer::Ts && narrow_denominator(&scored) {
            t.skipped += 1;
            continue;
        }
        let at = batch_gradients(&state, &set, &batch, &tc).expect("finite loss");
        let a: Vec<f64> = at.grads.slices().concat();
        let x = flat(&state.params);
        let directions: Vec<Vec<f64>> = (0..PIPELINE_DIRECTIONS)
            .map(|_| (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        // Directional derivatives along random directions: the full gradient
        // enters every comparison, and its size keeps rounding noise of the
        // loss far below the tolerance.
        let a_dir: Vec<f64> = directions
            .iter()
            .map(|d| d.iter().zip(&a).map(|(d, g)| d * g).sum())
            .collect();
        let mut probe = x.clone();
        t.compare_parts(&[0.0; PIPELINE_DIRECTIONS], &a_dir, cfg.step, &[1.0, at.loss.lambda], |u| {
            for (p, (x0, j)) in probe.iter_mut().zip(x.iter().zip(0..)) {
                *p = x0 + directions.iter().zip(u).map(|(d, &c)| c * d[j]).sum::<f64>();
            }
            set_flat(&mut state.params, &probe);
            let l = batch_gradients(&state, &set, &batch, &tc).expect("finite loss").loss;
            [l.ranking, l.fairness]
        });
    }
    t.finish(cfg)
}

/// Probe clicked-lowest fixtures: the nPRF is zero and its gradient must be
/// exactly zero, never NaN.
fn zero_nprf_exact(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> bool {
    (0..cfg.fixtures).all(|_| {
        let k = rng.gen_range(2..=cfg.max_k);
        let clicked = rng.gen_range(0..k);
        let mut x = random_scores(rng, k);
        x[clicked] = x.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let l = nprf_scores(&x, clicked).expect("k >= 2");
        l.value == 0.0 && l.grad.iter().all(|&g| g == 0.0 && g.is_sign_positive())
    })
}

/// Run every check. The result depends only on `cfg`.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.max_k < 2 || cfg.max_batch < 2 || cfg.fixtures == 0 || !(cfg.step > 0.0) {
        return Err(crate::error::Error::Config(
            "grad-check needs fixtures >= 1, max_k >= 2, max_batch >= 2 and a positive step".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = FairnessConfig::default().denom_epsilon;
    let entries = vec![
        check_encoder(&mut rng, cfg),
        check_ranking(&mut rng, cfg),
        check_nprf(&mut rng, cfg),
        check_group_loss("pd", &mut rng, cfg, |m, f| {
            pd_loss(&BatchFairnessState::from_values(m.to_vec(), f.to_vec()))
        }),
        check_group_loss("ts_standard", &mut rng, cfg, |m, f| {
            ts_statistic(m, f, TsFormula::StandardTSquared, eps)
        }),
        check_group_loss("ts_literal", &mut rng, cfg, |m, f| {
            ts_statistic(m, f, TsFormula::Literal, eps)
        }),
        check_total("total_pd", &mut rng, cfg, Regularizer::Pd, TsFormula::StandardTSquared),
        check_total("total_ts", &mut rng, cfg, Regularizer::Ts, TsFormula::StandardTSquared),
        check_total("total_ts_lit", &mut rng, cfg, Regularizer::Ts, TsFormula::Literal),
        check_theta(&mut rng, cfg),
        check_pipeline(&mut rng, cfg),
    ];
    let zero = zero_nprf_exact(&mut rng, cfg);
    Ok(GradCheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        entries,
        zero_nprf_gradient_exact: zero,
    })
}
