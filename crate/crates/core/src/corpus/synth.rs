//! Deterministic synthetic corpora with controllable injected gender bias.
//!
//! Every query is non-gendered. Its clicked passage carries definitional
//! words of one group (male for a `group_imbalance` fraction of queries,
//! female otherwise). With probability `bias_strength` each non-clicked
//! candidate is a hard negative of the opposite group: it carries the other
//! group's definitional words and shares query vocabulary almost as often as
//! the clicked passage does. The remaining negatives are neutral and share
//! little with the query. A ranker that picks up the majority group's words
//! as a relevance cue therefore ranks the two groups' clicked passages
//! unequally.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_documents, write_pairs_as_run, write_qrels, Collection, DataPair, Document, QuerySet};
use crate::bias::{BiasLexicon, Side};
use crate::error::{Error, Result};

const QUERY_PREFIX: &[&str] = &["what", "is", "the"];
const TOPIC_TERMS: usize = 3;
const FILLER_TERMS: usize = 8;
const GENDER_TERMS: usize = 2;
const CLICKED_OVERLAP: f64 = 0.9;
const HARD_NEGATIVE_OVERLAP: f64 = 0.6;
const EASY_NEGATIVE_OVERLAP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_queries: usize,
    /// Candidates per query.
    pub k: usize,
    pub vocab_size: usize,
    /// In [0, 1]: how strongly relevance is coupled to injected gendered terms.
    pub bias_strength: f64,
    /// In (0, 1): fraction of queries whose clicked passage is male-biased.
    pub group_imbalance: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_queries: 100,
            k: 8,
            vocab_size: 2000,
            bias_strength: 0.8,
            group_imbalance: 0.6,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.vocab_size < TOPIC_TERMS {
            return Err(Error::InvalidInput(
                "num_queries and vocab_size must be positive".into(),
            ));
        }
        if self.k < 2 {
            return Err(Error::InvalidInput("K must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::InvalidInput("bias_strength must lie in [0, 1]".into()));
        }
        if !(self.group_imbalance > 0.0 && self.group_imbalance < 1.0) {
            return Err(Error::InvalidInput("group_imbalance must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// A generated corpus: passages, queries, one data pair per query, and the
/// lexicon whose words were injected.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub collection: Collection,
    pub queries: QuerySet,
    pub pairs: Vec<DataPair>,
    pub lexicon: BiasLexicon,
}

impl SyntheticCorpus {
    /// Partition the pairs into consecutive chunks of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Vec<DataPair>>> {
        let total: usize = sizes.iter().sum();
        if total > self.pairs.len() {
            return Err(Error::InvalidInput(format!(
                "split sizes sum to {total} but only {} pairs exist",
                self.pairs.len()
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in sizes {
            out.push(self.pairs[start..start + n].to_vec());
            start += n;
        }
        Ok(out)
    }

    /// Write `collection.tsv`, `queries.tsv`, `candidates.run`, `qrels.txt` and
    /// `lexicon.json` into `dir`. With `splits`, also write one
    /// `queries.<name>.tsv` per named chunk.
    pub fn write(&self, dir: impl AsRef<Path>, splits: &[(&str, usize)]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_documents(dir.join("collection.tsv"), self.collection.values())?;
        write_documents(dir.join("queries.tsv"), self.queries.values())?;
        write_pairs_as_run(dir.join("candidates.run"), &self.pairs, "synth")?;
        write_qrels(dir.join("qrels.txt"), &self.pairs)?;
        self.lexicon.save(dir.join("lexicon.json"))?;
        if !splits.is_empty() {
            let sizes: Vec<usize> = splits.iter().map(|(_, n)| *n).collect();
            for ((name, _), chunk) in splits.iter().zip(self.split(&sizes)?) {
                let docs = chunk.iter().map(|p| &self.queries[&p.query_id]);
                write_documents(dir.join(format!("queries.{name}.tsv")), docs)?;
            }
        }
        Ok(())
    }
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &'a [String]) -> &'a str {
    &pool[rng.gen_range(0..pool.len())]
}

fn passage_tokens<R: Rng>(
    rng: &mut R,
    topic: &[String],
    overlap: f64,
    at_least_one: bool,
    vocab: &[String],
    gender: Option<&[String]>,
) -> Vec<String> {
    let mut tokens: Vec<String> = topic
        .iter()
        .filter(|_| rng.gen_bool(overlap))
        .cloned()
        .collect();
    if at_least_one && tokens.is_empty() {
        tokens.push(topic[rng.gen_range(0..topic.len())].clone());
    }
    for _ in 0..FILLER_TERMS {
        tokens.push(pick(rng, vocab).to_owned());
    }
    if let Some(words) = gender {
        for _ in 0..GENDER_TERMS {
            tokens.push(pick(rng, words).to_owned());
        }
    }
    tokens.shuffle(rng);
    tokens
}

/// Generate a corpus. A pure function of `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lexicon = BiasLexicon::default_english();
    let male: Vec<String> = lexicon.words(Side::Male).iter().cloned().collect();
    let female: Vec<String> = lexicon.words(Side::Female).iter().cloned().collect();
    let vocab: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();

    let n_male = (spec.group_imbalance * spec.num_queries as f64).round() as usize;
    let mut groups: Vec<Side> = (0..spec.num_queries)
        .map(|i| if i < n_male { Side::Male } else { Side::Female })
        .collect();
    groups.shuffle(&mut rng);

    let mut collection = Collection::new();
    let mut queries = QuerySet::new();
    let mut pairs = Vec::with_capacity(spec.num_queries);

    for (qi, &group) in groups.iter().enumerate() {
        let qid = format!("q{qi:05}");
        let topic: Vec<String> = vocab
            .choose_multiple(&mut rng, TOPIC_TERMS)
            .cloned()
            .collect();
        let query_text = QUERY_PREFIX
            .iter()
            .map(|s| s.to_string())
            .chain(topic.iter().cloned())
            .collect::<Vec<_>>()
            .join(" ");
        queries.insert(qid.clone(), Document::new(qid.clone(), query_text));

        let (own, other) = match group {
            Side::Male => (&male, &female),
            Side::Female => (&female, &male),
        };
        let clicked_index = rng.gen_range(0..spec.k);
        let mut candidates = Vec::with_capacity(spec.k);
        for j in 0..spec.k {
            let tokens = if j == clicked_index {
                passage_tokens(&mut rng, &topic, CLICKED_OVERLAP, true, &vocab, Some(own))
            } else if rng.gen_bool(spec.bias_strength) {
                passage_tokens(&mut rng, &topic, HARD_NEGATIVE_OVERLAP, false, &vocab, Some(other))
            } else {
                passage_tokens(&mut rng, &topic, EASY_NEGATIVE_OVERLAP, false, &vocab, None)
            };
            let pid = format!("p{qi:05}-{j:03}");
            collection.insert(pid.clone(), Document::new(pid.clone(), tokens.join(" ")));
            candidates.push(pid);
        }
        pairs.push(DataPair::new(qid, candidates, clicked_index)?);
    }

    Ok(SyntheticCorpus {
        collection,
        queries,
        pairs,
        lexicon,
    })
}
