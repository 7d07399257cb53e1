//! Lexicon-based gender magnitude and bias labels for passages.
//!
//! The magnitude of a passage is the signed difference of log occurrence
//! counts of male- and female-definitional words:
//!
//! ```text
//! mag(p) = sum_{w in male} ln(1 + |<w,p>|) - sum_{w in female} ln(1 + |<w,p>|)
//! ```
//!
//! Absent words contribute exactly zero, so a passage without definitional
//! words has magnitude 0 and the neutral label.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Collection, Passage};
use crate::error::{Error, Result};

const DEFAULT_MALE: &[&str] = &[
    "he", "him", "his", "himself", "man", "men", "boy", "boys", "male", "males", "father",
    "fathers", "dad", "son", "sons", "brother", "brothers", "husband", "husbands", "king",
    "kings", "uncle", "nephew", "grandfather", "grandpa", "gentleman", "gentlemen", "sir",
    "mr", "prince", "boyfriend", "groom",
];

const DEFAULT_FEMALE: &[&str] = &[
    "she", "her", "hers", "herself", "woman", "women", "girl", "girls", "female", "females",
    "mother", "mothers", "mom", "daughter", "daughters", "sister", "sisters", "wife", "wives",
    "queen", "queens", "aunt", "niece", "grandmother", "grandma", "lady", "ladies", "madam",
    "mrs", "princess", "girlfriend", "bride",
];

/// Which side of the lexicon a word set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Male,
    Female,
}

/// Male- and female-definitional word sets. Disjoint and both non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LexiconFile", into = "LexiconFile")]
pub struct BiasLexicon {
    male: BTreeSet<String>,
    female: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    male: Vec<String>,
    female: Vec<String>,
}

impl TryFrom<LexiconFile> for BiasLexicon {
    type Error = Error;

    fn try_from(file: LexiconFile) -> Result<Self> {
        BiasLexicon::new(file.male, file.female)
    }
}

impl From<BiasLexicon> for LexiconFile {
    fn from(lex: BiasLexicon) -> Self {
        LexiconFile {
            male: lex.male.into_iter().collect(),
            female: lex.female.into_iter().collect(),
        }
    }
}

fn normalize_word(word: &str) -> Result<String> {
    match tokenize(word).as_slice() {
        [one] => Ok(one.clone()),
        _ => Err(Error::InvalidInput(format!(
            "lexicon entry `{word}` is not a single token"
        ))),
    }
}

impl BiasLexicon {
    pub fn new<I, J, S, T>(male: I, female: J) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let male = male
            .into_iter()
            .map(|w| normalize_word(w.as_ref()))
            .collect::<Result<BTreeSet<_>>>()?;
        let female = female
            .into_iter()
            .map(|w| normalize_word(w.as_ref()))
            .collect::<Result<BTreeSet<_>>>()?;
        if male.is_empty() || female.is_empty() {
            return Err(Error::InvalidInput(
                "both lexicon sides must be non-empty".into(),
            ));
        }
        if let Some(w) = male.intersection(&female).next() {
            return Err(Error::InvalidInput(format!(
                "`{w}` appears on both lexicon sides"
            )));
        }
        Ok(Self { male, female })
    }

    /// The built-in lexicon of common gender-definitional English words.
    pub fn default_english() -> Self {
        Self::new(DEFAULT_MALE.iter().copied(), DEFAULT_FEMALE.iter().copied())
            .expect("built-in lexicon is valid")
    }

    pub fn words(&self, side: Side) -> &BTreeSet<String> {
        match side {
            Side::Male => &self.male,
            Side::Female => &self.female,
        }
    }

    pub fn male_words(&self) -> &BTreeSet<String> {
        &self.male
    }

    pub fn female_words(&self) -> &BTreeSet<String> {
        &self.female
    }

    /// The same lexicon with its two sides exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            male: self.female.clone(),
            female: self.male.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| {
            Error::format(path, e.line(), format!("invalid lexicon: {e}"))
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("lexicon serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-passage magnitude and its sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasLabel {
    pub magnitude: f64,
    /// +1 male-biased, -1 female-biased, 0 neutral.
    pub label: i8,
}

impl BiasLabel {
    pub fn from_magnitude(magnitude: f64) -> Self {
        let label = if magnitude > 0.0 {
            1
        } else if magnitude < 0.0 {
            -1
        } else {
            0
        };
        Self { magnitude, label }
    }

    pub const NEUTRAL: BiasLabel = BiasLabel {
        magnitude: 0.0,
        label: 0,
    };
}

/// Number of occurrences of `word` in the passage's tokens.
pub fn word_count(passage: &Passage, word: &str) -> usize {
    passage.tokens.iter().filter(|t| *t == word).count()
}

fn token_counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    counts
}

fn side_sum(counts: &HashMap<&str, usize>, words: &BTreeSet<String>) -> f64 {
    words
        .iter()
        .map(|w| (counts.get(w.as_str()).copied().unwrap_or(0) as f64).ln_1p())
        .sum()
}

pub fn side_magnitude(passage: &Passage, lex: &BiasLexicon, side: Side) -> f64 {
    side_sum(&token_counts(&passage.tokens), lex.words(side))
}

pub fn magnitude(passage: &Passage, lex: &BiasLexicon) -> f64 {
    let counts = token_counts(&passage.tokens);
    side_sum(&counts, &lex.male) - side_sum(&counts, &lex.female)
}

pub fn label(passage: &Passage, lex: &BiasLexicon) -> BiasLabel {
    BiasLabel::from_magnitude(magnitude(passage, lex))
}

/// Bias labels keyed by passage id.
pub type LabelMap = IndexMap<String, BiasLabel>;

pub fn label_collection(collection: &Collection, lex: &BiasLexicon) -> LabelMap {
    collection
        .iter()
        .map(|(id, p)| (id.clone(), label(p, lex)))
        .collect()
}

/// Write `pid<TAB>magnitude<TAB>label` lines.
pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (pid, l) in labels {
        writeln!(out, "{pid}\t{}\t{}", l.magnitude, l.label).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(reader: impl BufRead, path: &Path) -> Result<LabelMap> {
    let mut labels = LabelMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [pid, mag, lab] = cols.as_slice() else {
            return Err(Error::format(path, lineno, "expected `pid<TAB>magnitude<TAB>label`"));
        };
        let magnitude: f64 = mag
            .parse()
            .map_err(|_| Error::format(path, lineno, format!("bad magnitude `{mag}`")))?;
        let label: i8 = match *lab {
            "1" => 1,
            "0" => 0,
            "-1" => -1,
            other => {
                return Err(Error::format(path, lineno, format!("bad label `{other}`")));
            }
        };
        if BiasLabel::from_magnitude(magnitude).label != label {
            return Err(Error::format(path, lineno, "label disagrees with magnitude sign"));
        }
        if labels.insert(pid.to_string(), BiasLabel { magnitude, label }).is_some() {
            return Err(Error::format(path, lineno, format!("duplicate passage id {pid}")));
        }
    }
    Ok(labels)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_labels(BufReader::new(file), path)
}
