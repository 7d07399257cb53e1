//! Lambda selection on a development split.
//!
//! Every model starts from the same initialization seed. The chosen lambda
//! minimizes dev |ΔA-PRF| among models whose dev Recall@k stays within
//! `recall_tolerance` of the unregularized baseline; ties go to the smaller
//! lambda.

use rayon::prelude::*;
use serde::Serialize;

use super::{train, TrainConfig, TrainingSet};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::losses::{LambdaMode, Regularizer};
use crate::metrics::{EvalConfig, EvalReport};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridEntry {
    pub lambda: f64,
    pub dev: EvalReport,
    /// Dev recall is within tolerance of the baseline.
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub regularizer: Regularizer,
    pub recall_tolerance: f64,
    pub baseline: EvalReport,
    pub entries: Vec<GridEntry>,
    pub chosen_lambda: f64,
    /// No grid point met the recall constraint; the lowest |ΔA-PRF| was
    /// taken regardless.
    pub recall_constraint_violated: bool,
}

impl GridReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub report: GridReport,
    pub baseline: EncoderParams,
    pub chosen: EncoderParams,
}

fn disparity_key(r: &EvalReport) -> f64 {
    r.delta_a_prf.unwrap_or(f64::INFINITY)
}

/// Train a baseline and one model per grid lambda (in parallel on the current
/// rayon pool) and pick lambda on `dev`.
pub fn grid_search_lambda(
    train_set: &TrainingSet,
    dev_set: &TrainingSet,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<GridOutcome> {
    if cfg.fairness.regularizer == Regularizer::None {
        return Err(Error::Config("grid search requires a fairness regularizer".into()));
    }
    if cfg.lambda_grid.is_empty() {
        return Err(Error::Config("lambda_grid is empty".into()));
    }
    let mut grid = cfg.lambda_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut base_cfg = cfg.clone();
    base_cfg.fairness.regularizer = Regularizer::None;
    let configs: Vec<TrainConfig> = std::iter::once(base_cfg)
        .chain(grid.iter().map(|&lambda| {
            let mut c = cfg.clone();
            c.fairness.lambda_mode = LambdaMode::Fixed;
            c.fairness.lambda_value = lambda;
            c
        }))
        .collect();

    let mut results = configs
        .par_iter()
        .map(|c| {
            let (state, _) = train(train_set, c)?;
            let report = dev_set.evaluate(&state.params, eval)?;
            Ok((state.params, report))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();

    let (baseline, baseline_report) = results.next().expect("baseline trained");
    let floor = (1.0 - cfg.recall_tolerance) * baseline_report.recall_at_k;
    let mut models = Vec::with_capacity(grid.len());
    let mut entries = Vec::with_capacity(grid.len());
    for (&lambda, (params, dev)) in grid.iter().zip(results) {
        entries.push(GridEntry {
            lambda,
            eligible: dev.recall_at_k >= floor,
            dev,
        });
        models.push(params);
    }

    let best = |only_eligible: bool| {
        let mut pick: Option<usize> = None;
        for (i, e) in entries.iter().enumerate() {
            if only_eligible && !e.eligible {
                continue;
            }
            if pick.is_none_or(|p| disparity_key(&e.dev) < disparity_key(&entries[p].dev)) {
                pick = Some(i);
            }
        }
        pick
    };
    let (index, violated) = match best(true) {
        Some(i) => (i, false),
        None => (best(false).expect("grid is non-empty"), true),
    };

    Ok(GridOutcome {
        report: GridReport {
            regularizer: cfg.fairness.regularizer,
            recall_tolerance: cfg.recall_tolerance,
            baseline: baseline_report,
            chosen_lambda: entries[index].lambda,
            entries,
            recall_constraint_violated: violated,
        },
        baseline,
        chosen: models.swap_remove(index),
    })
}
