//! Ranking and fairness evaluation over scored pairs.
//!
//! Candidates are ranked by descending score; ties go to the candidate that
//! comes first in the input list.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Group, ScoredPair};

/// Candidate indices in ranked order.
pub fn ranking(sp: &ScoredPair) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sp.scores.len()).collect();
    order.sort_by(|&a, &b| sp.scores[b].partial_cmp(&sp.scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// 1-based rank of the clicked candidate.
pub fn clicked_rank(sp: &ScoredPair) -> usize {
    let c = sp.clicked_index();
    let r = sp.scores[c];
    let ahead = sp
        .scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > r || (s == r && j < c))
        .count();
    ahead + 1
}

/// Fraction of non-clicked candidates scored at or below the clicked one.
pub fn prf(sp: &ScoredPair) -> Result<f64> {
    if sp.clicked_group == Group::Neutral {
        return Err(Error::InvalidInput(format!(
            "query {}: PRF is undefined for a neutral clicked passage",
            sp.pair.query_id
        )));
    }
    let c = sp.clicked_index();
    let r = sp.scores[c];
    let fired = sp
        .scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| k != c && r >= s)
        .count();
    Ok(fired as f64 / (sp.scores.len() - 1) as f64)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for x in xs {
        acc += x;
        n += 1;
    }
    (n > 0).then(|| acc / n as f64)
}

/// Mean PRF of the male-clicked pairs minus that of the female-clicked pairs.
/// `None` when either group is empty.
pub fn signed_delta_a_prf(scored: &[ScoredPair]) -> Option<f64> {
    let group_mean = |g: Group| {
        mean(
            scored
                .iter()
                .filter(|sp| sp.clicked_group == g)
                .map(|sp| prf(sp).expect("non-neutral")),
        )
    };
    Some(group_mean(Group::Male)? - group_mean(Group::Female)?)
}

/// |mean PRF over male-clicked - mean PRF over female-clicked|.
pub fn delta_a_prf(scored: &[ScoredPair]) -> Option<f64> {
    signed_delta_a_prf(scored).map(f64::abs)
}

/// Per-pair contributions whose mean is the signed group PRF gap:
/// `N * PRF / |T_m|` for male-clicked pairs, `-N * PRF / |T_f|` for
/// female-clicked ones and 0 for neutral ones. `None` when a group is empty.
pub fn disparity_contributions(scored: &[ScoredPair]) -> Option<Vec<f64>> {
    let count = |g: Group| scored.iter().filter(|sp| sp.clicked_group == g).count();
    let (nm, nf) = (count(Group::Male), count(Group::Female));
    if nm == 0 || nf == 0 {
        return None;
    }
    let n = scored.len() as f64;
    Some(
        scored
            .iter()
            .map(|sp| match sp.clicked_group {
                Group::Male => n * prf(sp).expect("non-neutral") / nm as f64,
                Group::Female => -n * prf(sp).expect("non-neutral") / nf as f64,
                Group::Neutral => 0.0,
            })
            .collect(),
    )
}

/// Rank-biased gender gap of one pair: mean magnitude of the top `t` ranked
/// candidates (fewer if the list is shorter).
pub fn query_rab(sp: &ScoredPair, t: usize) -> f64 {
    let top = ranking(sp);
    let depth = t.min(top.len());
    let mut acc = 0.0;
    for &j in &top[..depth] {
        acc += sp.magnitudes[j];
    }
    acc / depth as f64
}

/// Mean of [`query_rab`] over all pairs.
pub fn rab(scored: &[ScoredPair], t: usize) -> f64 {
    assert!(t >= 1, "RaB depth must be at least 1");
    mean(scored.iter().map(|sp| query_rab(sp, t))).unwrap_or(0.0)
}

pub fn recall_at_k(scored: &[ScoredPair], k: usize) -> f64 {
    mean(scored.iter().map(|sp| f64::from(u8::from(clicked_rank(sp) <= k)))).unwrap_or(0.0)
}

pub fn mrr(scored: &[ScoredPair]) -> f64 {
    mean(scored.iter().map(|sp| 1.0 / clicked_rank(sp) as f64)).unwrap_or(0.0)
}

fn ndcg_one(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / (1.0 + rank as f64).log2()
    } else {
        0.0
    }
}

pub fn ndcg_at_k(scored: &[ScoredPair], k: usize) -> f64 {
    mean(scored.iter().map(|sp| ndcg_one(clicked_rank(sp), k))).unwrap_or(0.0)
}

/// Two-sided paired bootstrap p-value for `mean(a - b) != 0`.
///
/// Differences are centred on zero to simulate the null, then resampled with
/// replacement; the p-value is `(hits + 1) / (resamples + 1)` where a hit is
/// a resampled mean at least as extreme as the observed one.
pub fn bootstrap_significance(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() || resamples == 0 {
        return Err(Error::InvalidInput("bootstrap needs data and resamples".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = mean(diffs.iter().copied()).expect("non-empty");
    let centred: Vec<f64> = diffs.iter().map(|d| d - observed).collect();
    let n = centred.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += centred[rng.gen_range(0..n)];
        }
        if (acc / n as f64).abs() >= observed.abs() {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (resamples + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub rab_depths: Vec<usize>,
    pub per_query: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            rab_depths: vec![5, 10],
            per_query: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuery {
    pub query_id: String,
    pub group: Group,
    pub rank: usize,
    pub recall: f64,
    pub reciprocal_rank: f64,
    pub ndcg: f64,
    /// `None` for neutral-clicked pairs.
    pub prf: Option<f64>,
    pub rab: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub queries: usize,
    pub male_clicked: usize,
    pub female_clicked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub mrr: f64,
    pub ndcg_at_k: f64,
    /// `None` (serialized as null) when a group has no pairs.
    pub delta_a_prf: Option<f64>,
    pub rab: BTreeMap<usize, f64>,
    pub counts: EvalCounts,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_query: Option<Vec<PerQuery>>,
}

/// Compute every metric. Per-query values are computed independently (in
/// parallel on the current rayon pool) and reduced in input order.
pub fn evaluate(scored: &[ScoredPair], cfg: &EvalConfig) -> EvalReport {
    use rayon::prelude::*;

    let rows: Vec<PerQuery> = scored
        .par_iter()
        .map(|sp| {
            let rank = clicked_rank(sp);
            PerQuery {
                query_id: sp.pair.query_id.clone(),
                group: sp.clicked_group,
                rank,
                recall: f64::from(u8::from(rank <= cfg.k)),
                reciprocal_rank: 1.0 / rank as f64,
                ndcg: ndcg_one(rank, cfg.k),
                prf: prf(sp).ok(),
                rab: cfg.rab_depths.iter().map(|&t| (t, query_rab(sp, t))).collect(),
            }
        })
        .collect();

    let count = |g: Group| rows.iter().filter(|r| r.group == g).count();
    let group_mean = |g: Group| {
        mean(rows.iter().filter(|r| r.group == g).map(|r| r.prf.expect("non-neutral")))
    };
    let delta = match (group_mean(Group::Male), group_mean(Group::Female)) {
        (Some(m), Some(f)) => Some((m - f).abs()),
        _ => None,
    };
    EvalReport {
        k: cfg.k,
        recall_at_k: mean(rows.iter().map(|r| r.recall)).unwrap_or(0.0),
        mrr: mean(rows.iter().map(|r| r.reciprocal_rank)).unwrap_or(0.0),
        ndcg_at_k: mean(rows.iter().map(|r| r.ndcg)).unwrap_or(0.0),
        delta_a_prf: delta,
        rab: cfg
            .rab_depths
            .iter()
            .map(|&t| (t, mean(rows.iter().map(|r| r.rab[&t])).unwrap_or(0.0)))
            .collect(),
        counts: EvalCounts {
            queries: rows.len(),
            male_clicked: count(Group::Male),
            female_clicked: count(Group::Female),
        },
        per_query: cfg.per_query.then_some(rows),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Write `qid<TAB>metric<TAB>value` rows for every per-query value.
    pub fn write_per_query(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let rows = self.per_query.as_deref().unwrap_or(&[]);
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let k = self.k;
        for r in rows {
            let q = &r.query_id;
            let mut line = format!("{q}\trecall@{k}\t{}\n", r.recall);
            line += &format!("{q}\trr\t{}\n", r.reciprocal_rank);
            line += &format!("{q}\tndcg@{k}\t{}\n", r.ndcg);
            if let Some(p) = r.prf {
                line += &format!("{q}\tprf\t{p}\n");
            }
            for (t, v) in &r.rab {
                line += &format!("{q}\trab@{t}\t{v}\n");
            }
            out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}
