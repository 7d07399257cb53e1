//! The `ibbr` command line.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on data
//! and format errors, 3 when training or gradient checking aborts
//! numerically.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bias::{label_collection, load_labels, write_labels, BiasLabel, BiasLexicon, LabelMap};
use crate::corpus::{
    build_pairs, generate_synthetic, load_collection, load_qrels, load_queries, load_run,
    write_run, Collection, DataPair, Qrels, QuerySet, Run, RunEntry, SynthSpec,
};
use crate::encoder::{EncoderParams, Role};
use crate::error::{Error, Result};
use crate::losses::ScoredPair;
use crate::metrics::{evaluate, EvalConfig};
use crate::trainer::{
    grad_check, grid_search_lambda, train, write_log, GradCheckConfig, TrainConfig, TrainingSet,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ibbr",
    version,
    about = "Fairness-regularized passage ranking with in-batch balancing",
    disable_help_subcommand = true
)]
pub struct Cli {
    /// Worker threads for evaluation and grid search.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label every passage of a collection with its gender bias magnitude.
    LabelBias(LabelBiasArgs),
    /// Generate a seeded synthetic corpus with injected gender bias.
    GenSynth(GenSynthArgs),
    /// Train a dual encoder and write its checkpoint.
    Train(TrainArgs),
    /// Score candidates with a checkpoint and write a six-column run.
    Rerank(RerankArgs),
    /// Compute ranking and fairness metrics of a scored run.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Select the fairness weight on a development split.
    GridSearch(GridSearchArgs),
}

#[derive(Debug, Args)]
pub struct LabelBiasArgs {
    /// Passage collection (`pid<TAB>text`).
    #[arg(long, value_name = "FILE")]
    pub collection: PathBuf,
    /// Lexicon JSON (`{"male": [...], "female": [...]}`); built-in English list if absent.
    #[arg(long, value_name = "FILE")]
    pub lexicon: Option<PathBuf>,
    /// Output labels file (`pid<TAB>magnitude<TAB>label`).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 100, value_name = "N")]
    pub num_queries: usize,
    /// Candidates per query.
    #[arg(long, default_value_t = 8, value_name = "K")]
    pub k: usize,
    #[arg(long, default_value_t = 2000, value_name = "N")]
    pub vocab_size: usize,
    /// Probability that a non-clicked candidate is an opposite-group hard negative.
    #[arg(long, default_value_t = 0.8, value_name = "P")]
    pub bias_strength: f64,
    /// Fraction of queries whose clicked passage is male-biased.
    #[arg(long, default_value_t = 0.6, value_name = "P")]
    pub group_imbalance: f64,
    #[arg(long, default_value_t = 1, value_name = "SEED")]
    pub seed: u64,
    /// Named split of consecutive queries, e.g. `train=200`; repeatable.
    #[arg(long = "split", value_name = "NAME=SIZE", value_parser = parse_split)]
    pub splits: Vec<(String, usize)>,
}

/// Training data and configuration shared by `train` and `grid-search`.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Training queries (`qid<TAB>text`).
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    /// Passage collection (`pid<TAB>text`).
    #[arg(long, value_name = "FILE")]
    pub collection: PathBuf,
    /// Candidate run (`qid Q0 pid rank score tag`).
    #[arg(long, value_name = "FILE")]
    pub run: PathBuf,
    /// Relevance judgments (`qid 0 pid grade`).
    #[arg(long, value_name = "FILE")]
    pub qrels: PathBuf,
    /// Bias labels from `label-bias`.
    #[arg(long, value_name = "FILE", conflicts_with = "lexicon")]
    pub labels: Option<PathBuf>,
    /// Lexicon used to label passages on the fly; built-in English list if
    /// neither this nor --labels is given.
    #[arg(long, value_name = "FILE")]
    pub lexicon: Option<PathBuf>,
    /// Training configuration file (`key = value` lines).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable and applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for initialization and batch order; overrides the configuration.
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output encoder checkpoint.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Per-step training log (tab-separated).
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Full training state (encoder plus optimizer moments) for resumption.
    #[arg(long, value_name = "FILE")]
    pub state: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    /// Encoder checkpoint from `train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub collection: PathBuf,
    /// Candidate run to rerank.
    #[arg(long, value_name = "FILE")]
    pub run: PathBuf,
    /// With qrels, each query's relevant passage is forced into its candidates.
    #[arg(long, value_name = "FILE")]
    pub qrels: Option<PathBuf>,
    /// Candidates kept per query.
    #[arg(long, default_value_t = 1000, value_name = "K")]
    pub k: usize,
    /// Run tag written in the last column.
    #[arg(long, default_value = "ibbr", value_name = "TAG")]
    pub tag: String,
    /// Output run.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Scored run; candidates are ranked by score, ties by file order.
    #[arg(long, value_name = "FILE")]
    pub run: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub qrels: PathBuf,
    /// Bias labels; unlisted passages count as neutral.
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    /// Cutoff for Recall and NDCG.
    #[arg(long, default_value_t = 10, value_name = "K")]
    pub k: usize,
    /// Comma-separated RaB depths.
    #[arg(long, default_value = "5,10", value_delimiter = ',', value_name = "T,...")]
    pub rab_depths: Vec<usize>,
    /// Report JSON; printed to stdout if absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Per-query metric rows (`qid<TAB>metric<TAB>value`).
    #[arg(long, value_name = "FILE")]
    pub per_query: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0, value_name = "SEED")]
    pub seed: u64,
    /// Fixtures checked per entry.
    #[arg(long, default_value_t = 100, value_name = "N")]
    pub fixtures: usize,
    /// Report JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridSearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Development queries used to select lambda.
    #[arg(long, value_name = "FILE")]
    pub dev_queries: PathBuf,
    /// Receives `grid_report.json`, `baseline.ckpt` and `chosen.ckpt`.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<(String, usize), String> {
    let (name, size) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=SIZE, got `{s}`"))?;
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(format!("bad split name `{name}`"));
    }
    let size = size.parse().map_err(|_| format!("bad split size `{size}`"))?;
    Ok((name.to_owned(), size))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } | Error::InvalidInput(_) => EXIT_DATA,
        Error::NonFinite(_) => EXIT_NUMERIC,
    }
}

/// Parse `std::env::args` and run; returns the exit status.
pub fn main() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Run a parsed invocation on a pool of `cli.jobs` threads.
pub fn execute(cli: Cli) -> Result<i32> {
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} threads: {e}", cli.jobs)))?;
    pool.install(|| match cli.command {
        Command::LabelBias(a) => label_bias(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Rerank(a) => rerank(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::GridSearch(a) => grid_search(a),
    })
}

fn load_lexicon(path: Option<&Path>) -> Result<BiasLexicon> {
    match path {
        Some(p) => BiasLexicon::load(p),
        None => Ok(BiasLexicon::default_english()),
    }
}

fn label_bias(a: LabelBiasArgs) -> Result<i32> {
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    let collection = load_collection(&a.collection)?;
    write_labels(&a.out, &label_collection(&collection, &lexicon))?;
    Ok(EXIT_OK)
}

fn gen_synth(a: GenSynthArgs) -> Result<i32> {
    let spec = SynthSpec {
        num_queries: a.num_queries,
        k: a.k,
        vocab_size: a.vocab_size,
        bias_strength: a.bias_strength,
        group_imbalance: a.group_imbalance,
        seed: a.seed,
    };
    let corpus = generate_synthetic(&spec).map_err(as_usage)?;
    let splits: Vec<(&str, usize)> = a.splits.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    let total: usize = splits.iter().map(|(_, s)| s).sum();
    if total > spec.num_queries {
        return Err(Error::Config(format!(
            "splits need {total} queries but --num-queries is {}",
            spec.num_queries
        )));
    }
    corpus.write(&a.out_dir, &splits)?;
    Ok(EXIT_OK)
}

/// Invalid flag values are usage errors.
fn as_usage(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::Config(m),
        other => other,
    }
}

struct LoadedData {
    cfg: TrainConfig,
    collection: Collection,
    run: Run,
    qrels: Qrels,
    labels: LabelMap,
}

impl LoadedData {
    fn load(d: &DataArgs) -> Result<Self> {
        let mut cfg = match &d.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &d.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = d.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        let collection = load_collection(&d.collection)?;
        let labels = match &d.labels {
            Some(p) => load_labels(p)?,
            None => label_collection(&collection, &load_lexicon(d.lexicon.as_deref())?),
        };
        Ok(Self {
            cfg,
            run: load_run(&d.run)?,
            qrels: load_qrels(&d.qrels)?,
            collection,
            labels,
        })
    }

    fn training_set(&self, queries_path: &Path) -> Result<TrainingSet> {
        let queries = load_queries(queries_path)?;
        let loaded = build_pairs(&queries, &self.run, &self.qrels, self.cfg.k)?;
        report_skips(queries_path, loaded.skipped_no_relevant, loaded.skipped_no_candidates);
        if loaded.pairs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{}: no query has both candidates and a relevant passage",
                queries_path.display()
            )));
        }
        TrainingSet::new(
            loaded.pairs,
            &queries,
            &self.collection,
            &self.labels,
            self.cfg.encoder.vocab_buckets,
        )
    }
}

fn report_skips(path: &Path, no_relevant: usize, no_candidates: usize) {
    if no_relevant + no_candidates > 0 {
        eprintln!(
            "{}: skipped {no_relevant} queries without a relevant passage and \
             {no_candidates} without candidates",
            path.display()
        );
    }
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let data = LoadedData::load(&a.data)?;
    let set = data.training_set(&a.data.queries)?;
    let (state, log) = train(&set, &data.cfg)?;
    state.params.save(&a.out)?;
    if let Some(p) = &a.state {
        state.save(p)?;
    }
    if let Some(p) = &a.log {
        write_log(p, &log)?;
    }
    Ok(EXIT_OK)
}

fn rerank(a: RerankArgs) -> Result<i32> {
    use rayon::prelude::*;

    if a.k == 0 {
        return Err(Error::Config("--k must be positive".into()));
    }
    let params = EncoderParams::load(&a.checkpoint)?;
    let queries = load_queries(&a.queries)?;
    let collection = load_collection(&a.collection)?;
    let run = load_run(&a.run)?;
    let lists: Vec<(String, Vec<String>)> = match &a.qrels {
        Some(p) => {
            let loaded = build_pairs(&queries, &run, &load_qrels(p)?, a.k.max(2))?;
            report_skips(&a.queries, loaded.skipped_no_relevant, loaded.skipped_no_candidates);
            loaded
                .pairs
                .into_iter()
                .map(|p| (p.query_id, p.candidates))
                .collect()
        }
        None => queries
            .keys()
            .filter_map(|qid| {
                let entries = run.get(qid)?;
                Some((
                    qid.clone(),
                    entries.iter().take(a.k).map(|e| e.passage_id.clone()).collect(),
                ))
            })
            .collect(),
    };
    let scored = lists
        .par_iter()
        .map(|(qid, pids)| score_list(&params, &queries, &collection, qid, pids, &a.tag))
        .collect::<Result<Vec<_>>>()?;
    write_run(&a.out, scored.iter().flatten())?;
    Ok(EXIT_OK)
}

fn score_list(
    params: &EncoderParams,
    queries: &QuerySet,
    collection: &Collection,
    qid: &str,
    pids: &[String],
    tag: &str,
) -> Result<Vec<RunEntry>> {
    let query = queries
        .get(qid)
        .ok_or_else(|| Error::InvalidInput(format!("unknown query id {qid}")))?;
    let zq = params.encode(Role::Query, &query.tokens);
    let mut scored = pids
        .iter()
        .map(|pid| {
            let passage = collection
                .get(pid)
                .ok_or_else(|| Error::InvalidInput(format!("unknown passage id {pid}")))?;
            Ok((pid, zq.dot(&params.encode(Role::Passage, &passage.tokens))))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some((pid, s)) = scored.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s} for query {qid}, passage {pid}")));
    }
    // Stable: equal scores keep candidate order.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (pid, score))| RunEntry {
            query_id: qid.to_owned(),
            passage_id: pid.clone(),
            rank: i as u32 + 1,
            score,
            tag: tag.to_owned(),
        })
        .collect())
}

/// Scored pairs of every run query that has exactly one relevant passage
/// among its candidates and at least two candidates. Returns the pairs and
/// the number of queries skipped.
pub fn scored_pairs_from_run(
    run: &Run,
    qrels: &Qrels,
    labels: &LabelMap,
) -> Result<(Vec<ScoredPair>, usize)> {
    let mut out = Vec::with_capacity(run.len());
    let mut skipped = 0;
    for (qid, entries) in run {
        let relevant = match qrels.get(qid).map(Vec::as_slice) {
            Some([one]) => one,
            Some(many) if many.len() > 1 => {
                return Err(Error::InvalidInput(format!(
                    "query {qid} has {} relevant passages; exactly one is supported",
                    many.len()
                )))
            }
            _ => {
                skipped += 1;
                continue;
            }
        };
        let Some(clicked) = entries.iter().position(|e| &e.passage_id == relevant) else {
            skipped += 1;
            continue;
        };
        if entries.len() < 2 {
            skipped += 1;
            continue;
        }
        let pids = entries.iter().map(|e| e.passage_id.clone()).collect();
        let scores = entries.iter().map(|e| e.score).collect();
        let bias: Vec<BiasLabel> = entries
            .iter()
            .map(|e| labels.get(&e.passage_id).copied().unwrap_or(BiasLabel::NEUTRAL))
            .collect();
        let pair = DataPair::new(qid.clone(), pids, clicked)?;
        out.push(ScoredPair::new(pair, scores, &bias)?);
    }
    Ok((out, skipped))
}

fn eval(a: EvalArgs) -> Result<i32> {
    if a.k == 0 || a.rab_depths.contains(&0) {
        return Err(Error::Config("--k and every RaB depth must be positive".into()));
    }
    let run = load_run(&a.run)?;
    let qrels = load_qrels(&a.qrels)?;
    let labels = load_labels(&a.labels)?;
    let (scored, skipped) = scored_pairs_from_run(&run, &qrels, &labels)?;
    if skipped > 0 {
        eprintln!(
            "{}: skipped {skipped} queries whose relevant passage is not among their candidates",
            a.run.display()
        );
    }
    let cfg = EvalConfig {
        k: a.k,
        rab_depths: a.rab_depths,
        per_query: a.per_query.is_some(),
    };
    let report = evaluate(&scored, &cfg);
    match &a.out {
        Some(p) => report.save(p)?,
        None => print!("{}", report.to_json()),
    }
    if let Some(p) = &a.per_query {
        report.write_per_query(p)?;
    }
    Ok(EXIT_OK)
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<i32> {
    let cfg = GradCheckConfig {
        fixtures: a.fixtures,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(&cfg)?;
    print!("{}", report.summary());
    if let Some(p) = &a.out {
        std::fs::write(p, report.to_json()).map_err(|e| Error::io(p, e))?;
    }
    Ok(if report.passed() { EXIT_OK } else { EXIT_NUMERIC })
}

fn grid_search(a: GridSearchArgs) -> Result<i32> {
    let data = LoadedData::load(&a.data)?;
    let train_set = data.training_set(&a.data.queries)?;
    let dev_set = data.training_set(&a.dev_queries)?;
    let eval = EvalConfig {
        k: data.cfg.eval_k,
        ..EvalConfig::default()
    };
    let outcome = grid_search_lambda(&train_set, &dev_set, &data.cfg, &eval)?;
    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report_path = dir.join("grid_report.json");
    std::fs::write(&report_path, outcome.report.to_json()).map_err(|e| Error::io(&report_path, e))?;
    outcome.baseline.save(dir.join("baseline.ckpt"))?;
    outcome.chosen.save(dir.join("chosen.ckpt"))?;
    println!("chosen lambda: {}", outcome.report.chosen_lambda);
    if outcome.report.recall_constraint_violated {
        eprintln!("warning: no lambda kept recall within tolerance of the baseline");
    }
    Ok(EXIT_OK)
}
