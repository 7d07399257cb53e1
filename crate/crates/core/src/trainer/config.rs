//! Training configuration and its flat `key=value` file format.
//!
//! Keys mirror the field names of [`TrainConfig`]; fairness and encoder
//! settings are flattened (`regularizer`, `lambda_value`, `dim`, ...).
//! Blank lines and `#` comments are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{FairnessConfig, LambdaMode, Regularizer, TsFormula};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub fairness: FairnessConfig,
    pub lambda_grid: Vec<f64>,
    pub optimizer: OptimizerKind,
    pub encoder: EncoderConfig,
    /// Candidates kept per query when assembling pairs.
    pub k: usize,
    /// Cutoff for Recall and NDCG during model selection.
    pub eval_k: usize,
    /// Allowed relative Recall@eval_k loss versus the unregularized model
    /// when selecting lambda from the grid.
    pub recall_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 150,
            learning_rate: 3e-5,
            warmup_ratio: 0.10,
            weight_decay: 0.01,
            epochs: 10,
            seed: 0,
            fairness: FairnessConfig::default(),
            lambda_grid: vec![0.1, 0.5, 1.0, 5.0, 10.0],
            optimizer: OptimizerKind::Adam,
            encoder: EncoderConfig::default(),
            k: 8,
            eval_k: 10,
            recall_tolerance: 0.10,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "learning_rate",
    "warmup_ratio",
    "weight_decay",
    "epochs",
    "seed",
    "regularizer",
    "lambda_mode",
    "lambda_value",
    "ts_formula",
    "denom_epsilon",
    "lambda_grid",
    "optimizer",
    "dim",
    "emb_dim",
    "vocab_buckets",
    "shared_towers",
    "k",
    "eval_k",
    "recall_tolerance",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{value}` for `{key}`"))),
    }
}

pub fn parse_regularizer(value: &str) -> Result<Regularizer> {
    match value.trim() {
        "none" => Ok(Regularizer::None),
        "pd" => Ok(Regularizer::Pd),
        "ts" => Ok(Regularizer::Ts),
        other => Err(Error::Config(format!(
            "unknown regularizer `{other}` (expected none, pd or ts)"
        ))),
    }
}

pub fn parse_ts_formula(value: &str) -> Result<TsFormula> {
    match value.trim() {
        "standard_t_squared" | "standard" => Ok(TsFormula::StandardTSquared),
        "literal" => Ok(TsFormula::Literal),
        other => Err(Error::Config(format!(
            "unknown ts_formula `{other}` (expected standard_t_squared or literal)"
        ))),
    }
}

fn parse_grid(value: &str) -> Result<Vec<f64>> {
    let grid = value
        .split(',')
        .map(|v| parse::<f64>("lambda_grid", v))
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(Error::Config("lambda_grid must not be empty".into()));
    }
    Ok(grid)
}

impl TrainConfig {
    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "regularizer" => self.fairness.regularizer = parse_regularizer(value)?,
            "lambda_mode" => {
                self.fairness.lambda_mode = match value.trim() {
                    "fixed" => LambdaMode::Fixed,
                    "trainable" => LambdaMode::Trainable,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown lambda_mode `{other}` (expected fixed or trainable)"
                        )))
                    }
                }
            }
            "lambda_value" => self.fairness.lambda_value = parse(key, value)?,
            "ts_formula" => self.fairness.ts_formula = parse_ts_formula(value)?,
            "denom_epsilon" => self.fairness.denom_epsilon = parse(key, value)?,
            "lambda_grid" => self.lambda_grid = parse_grid(value)?,
            "optimizer" => {
                self.optimizer = match value.trim() {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown optimizer `{other}` (expected sgd or adam)"
                        )))
                    }
                }
            }
            "dim" => self.encoder.dim = parse(key, value)?,
            "emb_dim" => self.encoder.emb_dim = parse(key, value)?,
            "vocab_buckets" => self.encoder.vocab_buckets = parse(key, value)?,
            "shared_towers" => self.encoder.shared_towers = parse_bool(key, value)?,
            "k" => self.k = parse(key, value)?,
            "eval_k" => self.eval_k = parse(key, value)?,
            "recall_tolerance" => self.recall_tolerance = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, idx + 1, "expected `key=value`"))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::format(path, idx + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.k < 2 || self.eval_k == 0 {
            return Err(Error::Config("k must be at least 2 and eval_k positive".into()));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("lambda_grid must hold non-negative values".into()));
        }
        if !(0.0..=1.0).contains(&self.recall_tolerance) {
            return Err(Error::Config("recall_tolerance must lie in [0, 1]".into()));
        }
        self.fairness.validate()?;
        self.encoder.validate()
    }

    /// Render in the `key=value` format accepted by [`TrainConfig::load`].
    pub fn to_text(&self) -> String {
        let f = &self.fairness;
        let mut s = String::new();
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "warmup_ratio={}", self.warmup_ratio);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "seed={}", self.seed);
        let reg = match f.regularizer {
            Regularizer::None => "none",
            Regularizer::Pd => "pd",
            Regularizer::Ts => "ts",
        };
        let _ = writeln!(s, "regularizer={reg}");
        let mode = match f.lambda_mode {
            LambdaMode::Fixed => "fixed",
            LambdaMode::Trainable => "trainable",
        };
        let _ = writeln!(s, "lambda_mode={mode}");
        let _ = writeln!(s, "lambda_value={}", f.lambda_value);
        let formula = match f.ts_formula {
            TsFormula::StandardTSquared => "standard_t_squared",
            TsFormula::Literal => "literal",
        };
        let _ = writeln!(s, "ts_formula={formula}");
        let _ = writeln!(s, "denom_epsilon={}", f.denom_epsilon);
        let grid: Vec<String> = self.lambda_grid.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(s, "lambda_grid={}", grid.join(","));
        let opt = match self.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        };
        let _ = writeln!(s, "optimizer={opt}");
        let _ = writeln!(s, "dim={}", self.encoder.dim);
        let _ = writeln!(s, "emb_dim={}", self.encoder.emb_dim);
        let _ = writeln!(s, "vocab_buckets={}", self.encoder.vocab_buckets);
        let _ = writeln!(s, "shared_towers={}", self.encoder.shared_towers);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "eval_k={}", self.eval_k);
        let _ = writeln!(s, "recall_tolerance={}", self.recall_tolerance);
        s
    }
}
