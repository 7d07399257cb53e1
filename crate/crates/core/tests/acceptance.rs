//! Acceptance suite: one line per criterion, `criterion N: PASS|FAIL ...`.
//!
//! Every threshold is pinned below. Run with `--nocapture` to see the lines.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use ibbr::bias::{label, BiasLabel, BiasLexicon};
use ibbr::corpus::{DataPair, Passage};
use ibbr::losses::{
    nprf_scores, pd_loss, ranking_loss_scores, ts_loss, ts_statistic, BatchFairnessState,
    FairnessConfig, Regularizer, ScoredPair, TsFormula,
};
use ibbr::metrics::{
    bootstrap_significance, delta_a_prf, disparity_contributions, prf, query_rab, rab, EvalConfig,
};
use ibbr::trainer::grid_search_lambda;
use rand::Rng;

const GRAD_TOLERANCE: f64 = 1e-5;
const GRAD_MIN_FIXTURES: u64 = 100;
const GRAD_RUNTIME: Duration = Duration::from_secs(60);
const ORACLE_FIXTURES: usize = 1000;
const ORACLE_MAX_K: usize = 10;
const ORACLE_MAX_BATCH: usize = 20;
const GOLDEN_REL_TOLERANCE: f64 = 1e-9;
const TS_EPS_FREE_TOLERANCE: f64 = 1e-6;
const MIN_DISPARITY_REDUCTION: f64 = 0.50;
const MAX_RECALL_DEGRADATION: f64 = 0.10;
const SIGNIFICANCE: f64 = 0.05;
const BOOTSTRAP_RESAMPLES: usize = 10_000;
const BOOTSTRAP_SEED: u64 = 2024;
const REPRODUCTION_RUNTIME: Duration = Duration::from_secs(300);
const REPRODUCTION_SEED: u64 = 1;
const REPRODUCTION_IMBALANCE: f64 = 0.6;
const ROBUSTNESS_IMBALANCE: f64 = 0.85;
const ROBUSTNESS_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ROBUSTNESS_MIN_WINS: usize = 4;
const PROPERTY_FIXTURES: usize = 500;

fn verdict(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn ibbr(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ibbr")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_1_gradient_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grad.json");
    let start = Instant::now();
    ibbr(&["grad-check", "--seed", "0", "--fixtures", "100", "--out", out.to_str().unwrap()]);
    let elapsed = start.elapsed();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let required = [
        "ranking", "nprf", "pd", "ts_standard", "ts_literal", "total_pd", "total_ts", "total_ts_lit",
    ];
    let entries = report["entries"].as_array().unwrap();
    let mut worst = 0.0f64;
    let mut pass = elapsed < GRAD_RUNTIME && report["zero_nprf_gradient_exact"] == true;
    for name in required {
        let e = entries.iter().find(|e| e["name"] == name).unwrap();
        let err = e["max_rel_error"].as_f64().unwrap();
        worst = worst.max(err);
        pass &= err < GRAD_TOLERANCE && e["checked"].as_u64().unwrap() >= GRAD_MIN_FIXTURES;
    }
    verdict(
        1,
        pass,
        format!("(max relative error {worst:.2e} over {} losses, {elapsed:.1?})", required.len()),
    );
}

#[test]
fn criterion_2_metric_oracles() {
    let mut r = rng(2);
    let eps = FairnessConfig::default().denom_epsilon;
    let mut mismatches = 0usize;
    for _ in 0..ORACLE_FIXTURES {
        let b = r.gen_range(1..=ORACLE_MAX_BATCH);
        let mut batch = Vec::with_capacity(b);
        let (mut male, mut female) = (Vec::new(), Vec::new());
        for _ in 0..b {
            let f = PairFixture::random(&mut r, ORACLE_MAX_K);
            let g0 = f.non_clicked();
            let sp = ScoredPair::from_scores(f.scores.clone(), f.clicked, &f.labels).unwrap();
            let n = oracle_nprf(&f.scores, &[f.clicked], &g0);
            mismatches += usize::from(prf(&sp).unwrap().to_bits() != oracle_prf(&f.scores, &[f.clicked], &g0).to_bits());
            mismatches += usize::from(nprf_scores(&f.scores, f.clicked).unwrap().value.to_bits() != n.to_bits());
            if f.labels[f.clicked] > 0 { male.push(n) } else { female.push(n) }
            batch.push(sp);
        }
        let (state, _) = BatchFairnessState::from_batch(&batch).unwrap();
        mismatches += usize::from(pd_loss(&state).value.to_bits() != oracle_pd(&male, &female).to_bits());
        for (formula, literal) in [(TsFormula::StandardTSquared, false), (TsFormula::Literal, true)] {
            let cfg = FairnessConfig { ts_formula: formula, ..FairnessConfig::default() };
            let want = oracle_ts(&male, &female, eps, literal);
            mismatches += usize::from(ts_loss(&state, &cfg).value.to_bits() != want.to_bits());
        }
    }
    verdict(
        2,
        mismatches == 0,
        format!("({mismatches} bitwise mismatches over {ORACLE_FIXTURES} batches)"),
    );
}

#[test]
fn criterion_3_hand_goldens() {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let nprf = nprf_scores(&[0.5, 0.3, 0.7], 0).unwrap().value;
    let pd = pd_loss(&BatchFairnessState::from_values(vec![0.4], vec![0.2, 0.3])).value;
    let ts_free = ts_statistic(&[0.4, 0.6], &[0.2, 0.2], TsFormula::StandardTSquared, 0.0).value;
    let nll = ranking_loss_scores(&[1.25, 1.25], 1).value;
    let pass = rel(nprf, 0.125f64.sqrt()) < GOLDEN_REL_TOLERANCE
        && rel(pd, 0.025) < GOLDEN_REL_TOLERANCE
        && (ts_free - 18.0).abs() < TS_EPS_FREE_TOLERANCE
        && rel(nll, std::f64::consts::LN_2) < GOLDEN_REL_TOLERANCE;
    verdict(
        3,
        pass,
        format!("(nPRF {nprf:.12}, PD {pd:.12}, TS {ts_free:.9}, NLL {nll:.12})"),
    );
}

struct Reproduction {
    base_gap: f64,
    ts_gap: f64,
    base_recall: f64,
    ts_recall: f64,
    lambda: f64,
    p: f64,
}

fn reproduce(regularizer: Regularizer, imbalance: f64, seed: u64) -> Reproduction {
    let cfg = desk_config(regularizer);
    let s = synth_splits(&synth_spec(imbalance, seed), &cfg);
    let eval = EvalConfig::default();
    let out = grid_search_lambda(&s.train, &s.dev, &cfg, &eval).unwrap();
    let base = s.test.score(&out.baseline).unwrap();
    let reg = s.test.score(&out.chosen).unwrap();
    let (b, t) = (ibbr::metrics::evaluate(&base, &eval), ibbr::metrics::evaluate(&reg, &eval));
    let p = bootstrap_significance(
        &disparity_contributions(&base).unwrap(),
        &disparity_contributions(&reg).unwrap(),
        BOOTSTRAP_RESAMPLES,
        BOOTSTRAP_SEED,
    )
    .unwrap();
    Reproduction {
        base_gap: b.delta_a_prf.unwrap(),
        ts_gap: t.delta_a_prf.unwrap(),
        base_recall: b.recall_at_k,
        ts_recall: t.recall_at_k,
        lambda: out.report.chosen_lambda,
        p,
    }
}

#[test]
fn criterion_4_ts_best_reduces_disparity() {
    let start = Instant::now();
    let r = reproduce(Regularizer::Ts, REPRODUCTION_IMBALANCE, REPRODUCTION_SEED);
    let elapsed = start.elapsed();
    let reduction = 1.0 - r.ts_gap / r.base_gap;
    let degradation = 1.0 - r.ts_recall / r.base_recall;
    let pass = reduction >= MIN_DISPARITY_REDUCTION
        && degradation <= MAX_RECALL_DEGRADATION
        && r.p < SIGNIFICANCE
        && elapsed < REPRODUCTION_RUNTIME;
    verdict(
        4,
        pass,
        format!(
            "(|ΔA-PRF| {:.3} -> {:.3}, {:+.1}%; Recall@10 {:.3} -> {:.3}, {:+.1}%; lambda {}; p = {:.4}; {elapsed:.1?})",
            r.base_gap, r.ts_gap, -100.0 * reduction, r.base_recall, r.ts_recall, -100.0 * degradation, r.lambda, r.p
        ),
    );
}

#[test]
fn criterion_5_ts_robust_to_imbalance() {
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in ROBUSTNESS_SEEDS {
        let ts = reproduce(Regularizer::Ts, ROBUSTNESS_IMBALANCE, seed).ts_gap;
        let pd = reproduce(Regularizer::Pd, ROBUSTNESS_IMBALANCE, seed).ts_gap;
        wins += usize::from(ts <= pd);
        detail.push(format!("seed {seed}: TS {ts:.3} / PD {pd:.3}"));
    }
    verdict(
        5,
        wins >= ROBUSTNESS_MIN_WINS,
        format!("({wins}/{} seeds; {})", ROBUSTNESS_SEEDS.len(), detail.join(", ")),
    );
}

fn random_text(r: &mut rand_chacha::ChaCha8Rng, pool: &[String]) -> String {
    let n = r.gen_range(0..12);
    (0..n).map(|_| pool[r.gen_range(0..pool.len())].clone()).collect::<Vec<_>>().join(" ")
}

fn labelled(texts: &[String], scores: Vec<f64>, clicked: usize, lex: &BiasLexicon) -> ScoredPair {
    let ids = (0..texts.len()).map(|j| format!("p{j}")).collect();
    let labels: Vec<BiasLabel> = texts.iter().map(|t| label(&Passage::new("p", t.as_str()), lex)).collect();
    ScoredPair::new(DataPair::new("q", ids, clicked).unwrap(), scores, &labels).unwrap()
}

#[test]
fn criterion_6_fairness_metric_properties() {
    let lex = BiasLexicon::default_english();
    let swapped = lex.swapped();
    let mut pool: Vec<String> = lex.male_words().iter().chain(lex.female_words()).cloned().collect();
    pool.extend(["the", "river", "bank", "city", "of", "paris"].map(String::from));
    let mut r = rng(6);
    let (mut swap_fail, mut mono_fail, mut neutral_fail) = (0, 0, 0);
    for _ in 0..PROPERTY_FIXTURES {
        let b = r.gen_range(1..=ORACLE_MAX_BATCH);
        let mut plain = Vec::new();
        let mut flipped = Vec::new();
        let mut transformed = Vec::new();
        for _ in 0..b {
            let k = r.gen_range(2..=ORACLE_MAX_K);
            let texts: Vec<String> = (0..k).map(|_| random_text(&mut r, &pool)).collect();
            let scores: Vec<f64> = (0..k).map(|_| r.gen_range(-16i32..=16) as f64 / 8.0).collect();
            let clicked = r.gen_range(0..k);
            plain.push(labelled(&texts, scores.clone(), clicked, &lex));
            flipped.push(labelled(&texts, scores.clone(), clicked, &swapped));
            transformed.push(labelled(&texts, scores.iter().map(|s| s.exp() * 3.0 - 7.0).collect(), clicked, &lex));
        }
        for (a, f) in plain.iter().zip(&flipped) {
            for j in 0..a.scores.len() {
                swap_fail += usize::from(a.magnitudes[j] != -f.magnitudes[j] || a.bias_labels[j] != -f.bias_labels[j]);
            }
        }
        for t in [1, 3, 5, 10] {
            swap_fail += usize::from(rab(&plain, t) != -rab(&flipped, t));
        }
        mono_fail += usize::from(delta_a_prf(&plain) != delta_a_prf(&transformed));

        let k = r.gen_range(2..=ORACLE_MAX_K);
        let neutral: Vec<String> = (0..k).map(|j| format!("the city {j}")).collect();
        let sp = labelled(&neutral, (0..k).map(|_| r.gen()).collect(), 0, &lex);
        neutral_fail += (1..=12).filter(|&t| query_rab(&sp, t) != 0.0).count();
    }
    verdict(
        6,
        swap_fail + mono_fail + neutral_fail == 0,
        format!(
            "(swap violations {swap_fail}, monotone violations {mono_fail}, neutral RaB violations {neutral_fail}; {PROPERTY_FIXTURES} fixtures)"
        ),
    );
}

fn pipeline(dir: &Path) -> Vec<&'static str> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_owned();
    let data = dir.join("data");
    let d = |name: &str| data.join(name).to_str().unwrap().to_owned();
    std::fs::write(
        dir.join("train.cfg"),
        "batch_size = 20\nlearning_rate = 1e-3\nepochs = 3\nvocab_buckets = 4096\nk = 20\nregularizer = ts\nlambda_value = 1\n",
    )
    .unwrap();
    ibbr(&[
        "gen-synth", "--out-dir", data.to_str().unwrap(), "--num-queries", "120", "--k", "20",
        "--seed", "1", "--split", "train=80", "--split", "dev=20", "--split", "test=20",
    ]);
    ibbr(&["label-bias", "--collection", &d("collection.tsv"), "--lexicon", &d("lexicon.json"), "--out", &p("labels.tsv")]);
    let common = |queries: &str| {
        vec![
            "--queries".to_owned(), d(queries),
            "--collection".into(), d("collection.tsv"),
            "--run".into(), d("candidates.run"),
            "--qrels".into(), d("qrels.txt"),
            "--labels".into(), p("labels.tsv"),
            "--config".into(), p("train.cfg"),
        ]
    };
    let run = |mut head: Vec<String>, tail: &[String]| {
        head.extend_from_slice(tail);
        ibbr(&head.iter().map(String::as_str).collect::<Vec<_>>());
    };
    let mut train = vec!["train".to_owned()];
    train.extend(common("queries.train.tsv"));
    run(train, &[
        "--out".into(), p("model.ckpt"), "--log".into(), p("train.log"), "--state".into(), p("state.bin"),
    ]);
    ibbr(&[
        "rerank", "--checkpoint", &p("model.ckpt"), "--queries", &d("queries.test.tsv"),
        "--collection", &d("collection.tsv"), "--run", &d("candidates.run"), "--out", &p("test.run"),
    ]);
    ibbr(&[
        "eval", "--run", &p("test.run"), "--qrels", &d("qrels.txt"), "--labels", &p("labels.tsv"),
        "--out", &p("report.json"), "--per-query", &p("per_query.tsv"),
    ]);
    let mut grid = vec!["--jobs".to_owned(), "3".into(), "grid-search".into()];
    grid.extend(common("queries.train.tsv"));
    run(grid, &["--dev-queries".into(), d("queries.dev.tsv"), "--out-dir".into(), p("grid")]);
    vec![
        "labels.tsv", "model.ckpt", "train.log", "state.bin", "test.run", "report.json",
        "per_query.tsv", "grid/grid_report.json", "grid/baseline.ckpt", "grid/chosen.ckpt",
    ]
}

#[test]
fn criterion_7_end_to_end_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = pipeline(a.path());
    pipeline(b.path());
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    verdict(
        7,
        differing.is_empty(),
        format!("({} artifacts compared, differing: {differing:?})", files.len()),
    );
}
