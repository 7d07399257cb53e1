//! Hashed bag-of-words two-tower encoder.
//!
//! A text is mapped to the weighted mean of its tokens' embedding rows
//! (tokens hashed into `vocab_buckets` with 64-bit FNV-1a), then multiplied
//! by a `emb_dim x dim` projection. A query and a passage are scored by the
//! dot product of their output vectors. By default both texts go through
//! the same tower.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bias::{BiasLabel, LabelMap};
use crate::corpus::{Collection, DataPair, QuerySet};
use crate::error::{Error, Result};
use crate::losses::ScoredPair;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

const INIT_RANGE: f64 = 0.05;

/// 64-bit FNV-1a over the token's UTF-8 bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn bucket(token: &str, vocab_buckets: usize) -> usize {
    (fnv1a64(token.as_bytes()) % vocab_buckets as u64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output dimension `d`.
    pub dim: usize,
    /// Internal embedding dimension.
    pub emb_dim: usize,
    pub vocab_buckets: usize,
    pub shared_towers: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            emb_dim: 64,
            vocab_buckets: 1 << 16,
            shared_towers: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.emb_dim == 0 || self.vocab_buckets == 0 {
            return Err(Error::Config(
                "dim, emb_dim and vocab_buckets must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which side of the two-tower model a text is encoded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Passage,
}

/// Embedding table (`vocab_buckets x emb_dim`) and projection
/// (`emb_dim x dim`), both row-major. Also used as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub embedding: Vec<f64>,
    pub projection: Vec<f64>,
}

impl Tower {
    fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            embedding: vec![0.0; cfg.vocab_buckets * cfg.emb_dim],
            projection: vec![0.0; cfg.emb_dim * cfg.dim],
        }
    }

    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let embedding = (0..cfg.vocab_buckets * cfg.emb_dim)
            .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        // Identity on the first min(emb_dim, dim) coordinates.
        let mut projection = vec![0.0; cfg.emb_dim * cfg.dim];
        for i in 0..cfg.emb_dim.min(cfg.dim) {
            projection[i * cfg.dim + i] = 1.0;
        }
        Self {
            embedding,
            projection,
        }
    }
}

/// Bucket ids with weights `count / len`, sorted by bucket.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenBag {
    entries: Vec<(usize, f64)>,
}

impl TokenBag {
    pub fn new<S: AsRef<str>>(tokens: &[S], vocab_buckets: usize) -> Self {
        if tokens.is_empty() {
            return Self::default();
        }
        let mut ids: Vec<usize> = tokens
            .iter()
            .map(|t| bucket(t.as_ref(), vocab_buckets))
            .collect();
        ids.sort_unstable();
        let n = tokens.len() as f64;
        let mut entries: Vec<(usize, f64)> = Vec::new();
        let mut i = 0;
        while i < ids.len() {
            let mut j = i;
            while j < ids.len() && ids[j] == ids[i] {
                j += 1;
            }
            entries.push((ids[i], (j - i) as f64 / n));
            i = j;
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A `dim`-length output vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    /// Mean embedding, length `emb_dim`.
    pub hidden: Vec<f64>,
    /// Output vector, length `dim`.
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    seed: u64,
    pub query: Tower,
    /// Present only with separate towers.
    pub passage: Option<Tower>,
}

/// Gradient buffer shaped like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub query: Tower,
    pub passage: Option<Tower>,
}

impl EncoderGrads {
    pub fn tower_mut(&mut self, role: Role) -> &mut Tower {
        match (role, self.passage.as_mut()) {
            (Role::Passage, Some(t)) => t,
            _ => &mut self.query,
        }
    }

    pub fn tower(&self, role: Role) -> &Tower {
        match (role, self.passage.as_ref()) {
            (Role::Passage, Some(t)) => t,
            _ => &self.query,
        }
    }

    pub fn clear(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }

    /// Flat parameter slices in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.query.embedding.as_slice(), self.query.projection.as_slice()];
        if let Some(p) = &self.passage {
            out.push(&p.embedding);
            out.push(&p.projection);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.query.embedding.as_mut_slice(),
            self.query.projection.as_mut_slice(),
        ];
        if let Some(p) = &mut self.passage {
            out.push(&mut p.embedding);
            out.push(&mut p.projection);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

impl EncoderParams {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query = Tower::init(&config, &mut rng);
        let passage = (!config.shared_towers).then(|| Tower::init(&config, &mut rng));
        Ok(Self {
            config,
            seed,
            query,
            passage,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tower(&self, role: Role) -> &Tower {
        match (role, self.passage.as_ref()) {
            (Role::Passage, Some(t)) => t,
            _ => &self.query,
        }
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            query: Tower::zeros(&self.config),
            passage: self.passage.as_ref().map(|_| Tower::zeros(&self.config)),
        }
    }

    /// Same layout as [`EncoderGrads::slices_mut`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.query.embedding.as_mut_slice(),
            self.query.projection.as_mut_slice(),
        ];
        if let Some(p) = &mut self.passage {
            out.push(&mut p.embedding);
            out.push(&mut p.projection);
        }
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.query.embedding.as_slice(), self.query.projection.as_slice()];
        if let Some(p) = &self.passage {
            out.push(&p.embedding);
            out.push(&p.projection);
        }
        out
    }

    pub fn bag<S: AsRef<str>>(&self, tokens: &[S]) -> TokenBag {
        TokenBag::new(tokens, self.config.vocab_buckets)
    }

    pub fn forward(&self, role: Role, bag: &TokenBag) -> Activation {
        let EncoderConfig { dim, emb_dim, .. } = self.config;
        let tower = self.tower(role);
        let mut hidden = vec![0.0; emb_dim];
        for &(b, w) in bag.entries() {
            let row = &tower.embedding[b * emb_dim..(b + 1) * emb_dim];
            for (h, e) in hidden.iter_mut().zip(row) {
                *h += w * e;
            }
        }
        let mut output = vec![0.0; dim];
        for (i, &h) in hidden.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let row = &tower.projection[i * dim..(i + 1) * dim];
            for (o, w) in output.iter_mut().zip(row) {
                *o += h * w;
            }
        }
        Activation { hidden, output }
    }

    /// Accumulate the gradient of `output . upstream` into `grads`.
    pub fn backward(
        &self,
        role: Role,
        bag: &TokenBag,
        act: &Activation,
        upstream: &[f64],
        grads: &mut EncoderGrads,
    ) {
        let EncoderConfig { dim, emb_dim, .. } = self.config;
        let tower = self.tower(role);
        let grad = grads.tower_mut(role);
        let mut d_hidden = vec![0.0; emb_dim];
        for i in 0..emb_dim {
            let w_row = &tower.projection[i * dim..(i + 1) * dim];
            d_hidden[i] = dot(w_row, upstream);
            let h = act.hidden[i];
            if h != 0.0 {
                let g_row = &mut grad.projection[i * dim..(i + 1) * dim];
                for (g, u) in g_row.iter_mut().zip(upstream) {
                    *g += h * u;
                }
            }
        }
        for &(b, w) in bag.entries() {
            let g_row = &mut grad.embedding[b * emb_dim..(b + 1) * emb_dim];
            for (g, d) in g_row.iter_mut().zip(&d_hidden) {
                *g += w * d;
            }
        }
    }

    pub fn encode<S: AsRef<str>>(&self, role: Role, tokens: &[S]) -> EmbeddingVector {
        EmbeddingVector(self.forward(role, &self.bag(tokens)).output)
    }

    /// Ranking score of a passage for a query.
    pub fn sim<S: AsRef<str>, T: AsRef<str>>(&self, query: &[S], passage: &[T]) -> f64 {
        self.encode(Role::Query, query)
            .dot(&self.encode(Role::Passage, passage))
    }

    /// Accumulate `upstream * d sim(query, passage) / d params` into `grads`.
    pub fn backward_sim<S: AsRef<str>, T: AsRef<str>>(
        &self,
        query: &[S],
        passage: &[T],
        upstream: f64,
        grads: &mut EncoderGrads,
    ) {
        if upstream == 0.0 {
            return;
        }
        let qb = self.bag(query);
        let pb = self.bag(passage);
        let qa = self.forward(Role::Query, &qb);
        let pa = self.forward(Role::Passage, &pb);
        let dq: Vec<f64> = pa.output.iter().map(|v| upstream * v).collect();
        let dp: Vec<f64> = qa.output.iter().map(|v| upstream * v).collect();
        self.backward(Role::Query, &qb, &qa, &dq, grads);
        self.backward(Role::Passage, &pb, &pa, &dp, grads);
    }

    /// Score every candidate of `pair` and attach bias labels.
    ///
    /// Candidates without an entry in `labels` are treated as neutral.
    pub fn score_pair(
        &self,
        pair: &DataPair,
        queries: &QuerySet,
        collection: &Collection,
        labels: &LabelMap,
    ) -> Result<ScoredPair> {
        let query = queries.get(&pair.query_id).ok_or_else(|| {
            Error::InvalidInput(format!("unknown query id {}", pair.query_id))
        })?;
        let z_q = self.encode(Role::Query, &query.tokens);
        let mut scores = Vec::with_capacity(pair.k());
        let mut bias = Vec::with_capacity(pair.k());
        for pid in &pair.candidates {
            let passage = collection
                .get(pid)
                .ok_or_else(|| Error::InvalidInput(format!("unknown passage id {pid}")))?;
            scores.push(z_q.dot(&self.encode(Role::Passage, &passage.tokens)));
            bias.push(labels.get(pid).copied().unwrap_or(BiasLabel::NEUTRAL));
        }
        ScoredPair::new(pair.clone(), scores, &bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            dim: 12,
            emb_dim: 8,
            vocab_buckets: 97,
            shared_towers: true,
        }
    }

    fn toks(s: &str) -> Vec<String> {
        crate::corpus::tokenize(s)
    }

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_encodes_to_zero() {
        let p = EncoderParams::new(EncoderConfig::default(), 3).unwrap();
        let z = p.encode(Role::Query, &Vec::<String>::new());
        assert_eq!(z.0, vec![0.0; 128]);
        assert_eq!(p.sim(&Vec::<String>::new(), &toks("a b c")), 0.0);
        assert_eq!(p.sim(&toks("a b c"), &Vec::<String>::new()), 0.0);
    }

    #[test]
    fn single_token_is_row_times_projection() {
        let cfg = small();
        let p = EncoderParams::new(cfg, 5).unwrap();
        let b = bucket("cat", cfg.vocab_buckets);
        let row = &p.query.embedding[b * cfg.emb_dim..(b + 1) * cfg.emb_dim];
        let mut expected = vec![0.0; cfg.dim];
        for (i, e) in row.iter().enumerate() {
            for j in 0..cfg.dim {
                expected[j] += e * p.query.projection[i * cfg.dim + j];
            }
        }
        let z = p.encode(Role::Query, &toks("cat"));
        for (a, b) in z.0.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_bag_encodes_identically() {
        let p = EncoderParams::new(small(), 7).unwrap();
        assert_eq!(p.encode(Role::Query, &toks("cat cat")), p.encode(Role::Query, &toks("cat")));
        assert_eq!(
            p.encode(Role::Query, &toks("cat dog cat dog")),
            p.encode(Role::Query, &toks("cat dog"))
        );
    }

    #[test]
    fn shared_towers_make_sim_symmetric() {
        let p = EncoderParams::new(small(), 7).unwrap();
        let a = toks("what is the capital of france");
        let b = toks("paris is the capital and largest city of france");
        assert_eq!(p.sim(&a, &b), p.sim(&b, &a));
    }

    #[test]
    fn sim_regression_value() {
        let p = EncoderParams::new(EncoderConfig::default(), 7).unwrap();
        let q = toks("what is the capital of france");
        let d = toks("Paris is the capital and largest city of France.");
        let s = p.sim(&q, &d);
        assert_eq!(s, SIM_GOLDEN, "sim = {s:e}");
    }

    // Recorded from the first verified run of the default encoder at seed 7.
    const SIM_GOLDEN: f64 = 3.5789718699021237e-3;

    #[test]
    fn zero_upstream_leaves_gradient_untouched() {
        let p = EncoderParams::new(small(), 1).unwrap();
        let mut g = p.zero_grads();
        p.backward_sim(&toks("a b"), &toks("b c"), 0.0, &mut g);
        assert_eq!(g, p.zero_grads());
    }

    #[test]
    fn separate_towers_have_two_parameter_sets() {
        let cfg = EncoderConfig {
            shared_towers: false,
            ..small()
        };
        let p = EncoderParams::new(cfg, 1).unwrap();
        assert!(p.passage.is_some());
        assert_eq!(p.slices().len(), 4);
        assert_eq!(p.zero_grads().slices().len(), 4);
    }
}
