//! Dataset model and the plain-text file formats it is read from.
//!
//! Collections and query sets are `id<TAB>text` files. Candidate lists come
//! from six-column ranked runs (`qid Q0 pid rank score tag`) and ground truth
//! from four-column qrels (`qid 0 pid grade`).

mod synth;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, SynthSpec, SyntheticCorpus};

/// Lowercase, turn every non-alphanumeric character into a separator, split.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    normalized.split_whitespace().map(str::to_owned).collect()
}

/// A passage or query: an identifier, the raw text and its token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self {
            id: id.into(),
            text,
            tokens,
        }
    }
}

pub type Passage = Document;
pub type Query = Document;

/// Passages keyed by id, in file order.
pub type Collection = IndexMap<String, Passage>;
/// Queries keyed by id, in file order.
pub type QuerySet = IndexMap<String, Query>;

/// One query together with its ranked candidate passages, exactly one of
/// which is the clicked (relevant) passage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPair {
    pub query_id: String,
    pub candidates: Vec<String>,
    pub clicked_index: usize,
}

impl DataPair {
    pub fn new(
        query_id: impl Into<String>,
        candidates: Vec<String>,
        clicked_index: usize,
    ) -> Result<Self> {
        let query_id = query_id.into();
        if candidates.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "query {query_id}: a data pair needs at least 2 candidates, got {}",
                candidates.len()
            )));
        }
        if clicked_index >= candidates.len() {
            return Err(Error::InvalidInput(format!(
                "query {query_id}: clicked index {clicked_index} out of range for {} candidates",
                candidates.len()
            )));
        }
        let mut seen = HashSet::with_capacity(candidates.len());
        for pid in &candidates {
            if !seen.insert(pid.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "query {query_id}: duplicate candidate {pid}"
                )));
            }
        }
        Ok(Self {
            query_id,
            candidates,
            clicked_index,
        })
    }

    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn clicked(&self) -> &str {
        &self.candidates[self.clicked_index]
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Parse `id<TAB>text` records. Blank lines are skipped.
pub fn read_documents(reader: impl BufRead, path: &Path) -> Result<IndexMap<String, Document>> {
    let mut docs = IndexMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, lineno, "expected `id<TAB>text`"))?;
        if id.is_empty() {
            return Err(Error::format(path, lineno, "empty id"));
        }
        if docs.contains_key(id) {
            return Err(Error::format(path, lineno, format!("duplicate id {id}")));
        }
        docs.insert(id.to_owned(), Document::new(id, text));
    }
    Ok(docs)
}

pub fn load_collection(path: impl AsRef<Path>) -> Result<Collection> {
    let path = path.as_ref();
    read_documents(open(path)?, path)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<QuerySet> {
    load_collection(path)
}

pub fn write_documents<'a>(
    path: impl AsRef<Path>,
    docs: impl IntoIterator<Item = &'a Document>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for doc in docs {
        writeln!(out, "{}\t{}", doc.id, doc.text).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_collection(path: impl AsRef<Path>, collection: &Collection) -> Result<()> {
    write_documents(path, collection.values())
}

/// One line of a six-column ranked run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub passage_id: String,
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

/// Run entries grouped by query (in first-seen order), each list sorted by rank.
pub type Run = IndexMap<String, Vec<RunEntry>>;

pub fn read_run(reader: impl BufRead, path: &Path) -> Result<Run> {
    let mut run: Run = IndexMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::format(
                path,
                lineno,
                format!("expected 6 columns `qid Q0 pid rank score tag`, got {}", cols.len()),
            ));
        }
        let rank: u32 = cols[3]
            .parse()
            .map_err(|_| Error::format(path, lineno, format!("bad rank `{}`", cols[3])))?;
        if rank == 0 {
            return Err(Error::format(path, lineno, "ranks start at 1"));
        }
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| Error::format(path, lineno, format!("bad score `{}`", cols[4])))?;
        if !seen.insert((cols[0].to_owned(), cols[2].to_owned())) {
            return Err(Error::format(
                path,
                lineno,
                format!("passage {} listed twice for query {}", cols[2], cols[0]),
            ));
        }
        run.entry(cols[0].to_owned()).or_default().push(RunEntry {
            query_id: cols[0].to_owned(),
            passage_id: cols[2].to_owned(),
            rank,
            score,
            tag: cols[5].to_owned(),
        });
    }
    for entries in run.values_mut() {
        entries.sort_by_key(|e| e.rank);
    }
    Ok(run)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<Run> {
    let path = path.as_ref();
    read_run(open(path)?, path)
}

pub fn write_run<'a>(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = &'a RunEntry>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for e in entries {
        writeln!(
            out,
            "{} Q0 {} {} {} {}",
            e.query_id, e.passage_id, e.rank, e.score, e.tag
        )
        .map_err(|err| Error::io(path, err))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Relevant passages per query. Any grade >= 1 counts as relevant.
pub type Qrels = HashMap<String, Vec<String>>;

pub fn read_qrels(reader: impl BufRead, path: &Path) -> Result<Qrels> {
    let mut qrels: Qrels = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::format(
                path,
                lineno,
                format!("expected 4 columns `qid 0 pid grade`, got {}", cols.len()),
            ));
        }
        let grade: i64 = cols[3]
            .parse()
            .map_err(|_| Error::format(path, lineno, format!("bad grade `{}`", cols[3])))?;
        let rel = qrels.entry(cols[0].to_owned()).or_default();
        if grade >= 1 && !rel.iter().any(|p| p == cols[2]) {
            rel.push(cols[2].to_owned());
        }
    }
    Ok(qrels)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    read_qrels(open(path)?, path)
}

pub fn write_qrels(path: impl AsRef<Path>, pairs: &[DataPair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for pair in pairs {
        writeln!(out, "{} 0 {} 1", pair.query_id, pair.clicked()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Write a run listing each pair's candidates in their stored order.
pub fn write_pairs_as_run(path: impl AsRef<Path>, pairs: &[DataPair], tag: &str) -> Result<()> {
    let entries: Vec<RunEntry> = pairs
        .iter()
        .flat_map(|pair| {
            let k = pair.k();
            pair.candidates.iter().enumerate().map(move |(j, pid)| RunEntry {
                query_id: pair.query_id.clone(),
                passage_id: pid.clone(),
                rank: j as u32 + 1,
                score: (k - j) as f64,
                tag: tag.to_owned(),
            })
        })
        .collect();
    write_run(path, &entries)
}

/// Outcome of assembling data pairs, with counters for skipped queries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedPairs {
    pub pairs: Vec<DataPair>,
    pub skipped_no_relevant: usize,
    pub skipped_no_candidates: usize,
}

/// Assemble one data pair per query from a run and qrels.
///
/// `k` caps the candidate list. A relevant passage missing from the top `k`
/// run entries is put in the last slot, evicting the rank-`k` entry.
pub fn build_pairs(queries: &QuerySet, run: &Run, qrels: &Qrels, k: usize) -> Result<LoadedPairs> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("K must be at least 2, got {k}")));
    }
    let mut out = LoadedPairs::default();
    for qid in queries.keys() {
        let relevant = qrels.get(qid).map(Vec::as_slice).unwrap_or(&[]);
        let relevant = match relevant {
            [] => {
                out.skipped_no_relevant += 1;
                continue;
            }
            [one] => one,
            many => {
                return Err(Error::InvalidInput(format!(
                    "query {qid} has {} relevant passages; exactly one is supported",
                    many.len()
                )))
            }
        };
        let Some(entries) = run.get(qid) else {
            out.skipped_no_candidates += 1;
            continue;
        };
        let mut candidates: Vec<String> = entries
            .iter()
            .take(k)
            .map(|e| e.passage_id.clone())
            .collect();
        let clicked_index = match candidates.iter().position(|p| p == relevant) {
            Some(j) => j,
            None => {
                if candidates.len() == k {
                    candidates.pop();
                }
                candidates.push(relevant.clone());
                candidates.len() - 1
            }
        };
        if candidates.len() < 2 {
            out.skipped_no_candidates += 1;
            continue;
        }
        out.pairs.push(DataPair::new(qid.clone(), candidates, clicked_index)?);
    }
    Ok(out)
}

pub fn load_pairs(
    queries: impl AsRef<Path>,
    candidates_run: impl AsRef<Path>,
    qrels: impl AsRef<Path>,
    k: usize,
) -> Result<LoadedPairs> {
    let queries = load_queries(queries)?;
    let run = load_run(candidates_run)?;
    let qrels = load_qrels(qrels)?;
    build_pairs(&queries, &run, &qrels, k)
}
