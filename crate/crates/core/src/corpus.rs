//! Soft-label datasets: distinct contexts, their empirical priors and sparse
//! next-token distributions.
//!
//! A raw corpus of `n` (context, next-token) windows collapses to `m ≤ n`
//! distinct contexts. Context `j` carries a prior `pi[j]` (fraction of
//! windows with that context) and a conditional distribution over the
//! vocabulary whose support is typically a small subset of tokens.
//!
//! Datasets come from three places: [`ingest_corpus`] on raw text,
//! [`gen_symmetric`] (every size-k support set exactly once) and
//! [`gen_random`] (random supports with Dirichlet soft labels).

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;

/// Largest number of columns `gen_symmetric` will materialize by default.
pub const DEFAULT_SYMMETRIC_CAP: u64 = 200_000;

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus has {tokens} tokens, need at least {needed}")]
    EmptyCorpus { tokens: usize, needed: usize },
    #[error("token {0:?} is not in the fixed vocabulary table")]
    VocabOverflow(String),
    #[error("C({v},{k}) = {count} columns exceeds the cap of {cap}")]
    SizeOverflow { v: usize, k: usize, count: u64, cap: u64 },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Token table. Ids are `0..size`; synthetic data carries no strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
    tokens: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn anonymous(size: usize) -> Self {
        Vocabulary { size, tokens: None }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(CorpusError::Invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary {
            size: tokens.len(),
            tokens: Some(tokens),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn tokens(&self) -> Option<&[String]> {
        self.tokens.as_deref()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.as_ref()?.iter().position(|t| t == token)
    }
}

/// Sparse next-token distribution of one distinct context.
///
/// `support` is strictly increasing; `probs[i]` is the probability of token
/// `support[i]` and is strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub support: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Column {
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn prob(&self, token: usize) -> f64 {
        match self.support.binary_search(&token) {
            Ok(i) => self.probs[i],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, token: usize) -> bool {
        self.support.binary_search(&token).is_ok()
    }
}

/// Binary support pattern of a dataset: one sorted token set per context.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SupportMatrix {
    vocab_size: usize,
    sets: Vec<Vec<usize>>,
}

impl SupportMatrix {
    pub fn new(vocab_size: usize, mut sets: Vec<Vec<usize>>) -> Result<Self> {
        for (j, s) in sets.iter_mut().enumerate() {
            s.sort_unstable();
            s.dedup();
            if s.is_empty() {
                return Err(CorpusError::Invalid(format!("context {j} has an empty support")));
            }
            if s.last().is_some_and(|&z| z >= vocab_size) {
                return Err(CorpusError::Invalid(format!(
                    "context {j} references a token outside 0..{vocab_size}"
                )));
            }
        }
        Ok(SupportMatrix { vocab_size, sets })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_contexts(&self) -> usize {
        self.sets.len()
    }

    pub fn set(&self, j: usize) -> &[usize] {
        &self.sets[j]
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn contains(&self, token: usize, j: usize) -> bool {
        self.sets[j].binary_search(&token).is_ok()
    }

    /// Dense V×m 0/1 matrix.
    pub fn to_matrix(&self) -> Mat {
        let mut s = Mat::zeros(self.vocab_size, self.sets.len());
        for (j, set) in self.sets.iter().enumerate() {
            for &z in set {
                s[(z, j)] = 1.0;
            }
        }
        s
    }
}

/// Distinct contexts with priors and sparse soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelDataset {
    vocab_size: usize,
    n: u64,
    pi: Vec<f64>,
    columns: Vec<Column>,
    contexts: Option<Vec<Vec<usize>>>,
}

impl SoftLabelDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        vocab_size: usize,
        n: u64,
        pi: Vec<f64>,
        columns: Vec<Column>,
        contexts: Option<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let ds = SoftLabelDataset {
            vocab_size,
            n,
            pi,
            columns,
            contexts,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CorpusError::Invalid(msg));
        if self.vocab_size == 0 {
            return bad("vocabulary is empty".into());
        }
        if self.columns.is_empty() {
            return bad("dataset has no contexts".into());
        }
        if self.pi.len() != self.columns.len() {
            return bad(format!("pi has {} entries for {} contexts", self.pi.len(), self.columns.len()));
        }
        if self.pi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return bad("every context prior must be positive".into());
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > SUM_TOL * self.pi.len().max(1) as f64 {
            return bad(format!("pi sums to {total}"));
        }
        for (j, col) in self.columns.iter().enumerate() {
            if col.support.is_empty() || col.support.len() != col.probs.len() {
                return bad(format!("column {j} has a malformed support"));
            }
            if col.support.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("column {j} support is not strictly increasing"));
            }
            if col.support.last().is_some_and(|&z| z >= self.vocab_size) {
                return bad(format!("column {j} has a token outside the vocabulary"));
            }
            if col.probs.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                return bad(format!("column {j} has a non-positive probability"));
            }
            let s: f64 = col.probs.iter().sum();
            if (s - 1.0).abs() > SUM_TOL * col.len() as f64 {
                return bad(format!("column {j} sums to {s}"));
            }
        }
        if let Some(ctx) = &self.contexts {
            if ctx.len() != self.columns.len() {
                return bad("context list length differs from m".into());
            }
            let len = ctx[0].len();
            if ctx.iter().any(|c| c.len() != len) {
                return bad("contexts have unequal lengths".into());
            }
            let mut seen = std::collections::HashSet::new();
            if !ctx.iter().all(|c| seen.insert(c)) {
                return bad("contexts are not pairwise distinct".into());
            }
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_contexts(&self) -> usize {
        self.columns.len()
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn contexts(&self) -> Option<&[Vec<usize>]> {
        self.contexts.as_deref()
    }

    pub fn support(&self) -> SupportMatrix {
        SupportMatrix {
            vocab_size: self.vocab_size,
            sets: self.columns.iter().map(|c| c.support.clone()).collect(),
        }
    }

    /// Dense V×m conditional probability matrix.
    pub fn probs_matrix(&self) -> Mat {
        let mut p = Mat::zeros(self.vocab_size, self.columns.len());
        for (j, col) in self.columns.iter().enumerate() {
            for (&z, &q) in col.support.iter().zip(&col.probs) {
                p[(z, j)] = q;
            }
        }
        p
    }

    /// Replaces the soft labels, keeping priors. Used by tests and generators.
    pub fn with_columns(&self, columns: Vec<Column>) -> Result<Self> {
        SoftLabelDataset::new(self.vocab_size, self.n, self.pi.clone(), columns, self.contexts.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DatasetFile::from(self)).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        file.into_dataset()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk dataset layout.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    #[serde(rename = "V")]
    vocab_size: usize,
    m: usize,
    n: u64,
    pi: Vec<f64>,
    columns: Vec<Column>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contexts: Option<Vec<Vec<usize>>>,
}

impl From<&SoftLabelDataset> for DatasetFile {
    fn from(ds: &SoftLabelDataset) -> Self {
        DatasetFile {
            vocab_size: ds.vocab_size,
            m: ds.columns.len(),
            n: ds.n,
            pi: ds.pi.clone(),
            columns: ds.columns.clone(),
            contexts: ds.contexts.clone(),
        }
    }
}

impl DatasetFile {
    fn into_dataset(self) -> Result<SoftLabelDataset> {
        if self.m != self.columns.len() {
            return Err(CorpusError::Invalid(format!(
                "header says m={} but file has {} columns",
                self.m,
                self.columns.len()
            )));
        }
        SoftLabelDataset::new(self.vocab_size, self.n, self.pi, self.columns, self.contexts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tokenizer {
    Char,
    WhitespaceWord,
    FixedTable(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusConfig {
    pub tokenizer: Tokenizer,
    /// Context length T−1.
    pub context_len: usize,
    pub lowercase: bool,
    /// Contexts seen fewer times than this are dropped.
    pub min_count: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            tokenizer: Tokenizer::Char,
            context_len: 1,
            lowercase: false,
            min_count: 1,
        }
    }
}

fn tokenize(text: &[u8], cfg: &CorpusConfig) -> Result<(Vocabulary, Vec<usize>)> {
    let mut decoded = String::from_utf8_lossy(text).into_owned();
    if cfg.lowercase {
        decoded = decoded.to_lowercase();
    }
    let pieces: Vec<String> = match &cfg.tokenizer {
        Tokenizer::Char => decoded.chars().map(String::from).collect(),
        Tokenizer::WhitespaceWord | Tokenizer::FixedTable(_) => {
            decoded.split_whitespace().map(String::from).collect()
        }
    };
    match &cfg.tokenizer {
        Tokenizer::FixedTable(table) => {
            let vocab = Vocabulary::from_tokens(table.clone())?;
            let index: HashMap<&str, usize> =
                table.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
            let ids = pieces
                .iter()
                .map(|p| index.get(p.as_str()).copied().ok_or_else(|| CorpusError::VocabOverflow(p.clone())))
                .collect::<Result<Vec<_>>>()?;
            Ok((vocab, ids))
        }
        _ => {
            let mut index: HashMap<String, usize> = HashMap::new();
            let mut table = Vec::new();
            let ids = pieces
                .into_iter()
                .map(|p| {
                    *index.entry(p.clone()).or_insert_with(|| {
                        table.push(p);
                        table.len() - 1
                    })
                })
                .collect();
            Ok((Vocabulary::from_tokens(table)?, ids))
        }
    }
}

/// Builds a dataset from raw text with stride-1 windows.
///
/// Every window of `context_len` tokens followed by one more token is a
/// sample. Token ids and context order follow first occurrence.
pub fn ingest_corpus(text: &[u8], cfg: &CorpusConfig) -> Result<(Vocabulary, SoftLabelDataset)> {
    if cfg.context_len == 0 {
        return Err(CorpusError::Argument("context length must be at least 1".into()));
    }
    let (vocab, ids) = tokenize(text, cfg)?;
    let needed = cfg.context_len + 1;
    if ids.len() < needed {
        return Err(CorpusError::EmptyCorpus {
            tokens: ids.len(),
            needed,
        });
    }
    ingest_token_ids(vocab, &ids, cfg.context_len, cfg.min_count)
}

/// Same as [`ingest_corpus`] for an already tokenized stream.
pub fn ingest_token_ids(
    vocab: Vocabulary,
    ids: &[usize],
    context_len: usize,
    min_count: u64,
) -> Result<(Vocabulary, SoftLabelDataset)> {
    let needed = context_len + 1;
    if ids.len() < needed {
        return Err(CorpusError::EmptyCorpus {
            tokens: ids.len(),
            needed,
        });
    }
    let mut index: HashMap<&[usize], usize> = HashMap::new();
    let mut contexts: Vec<&[usize]> = Vec::new();
    // per context: (total, next-token counts)
    let mut counts: Vec<(u64, HashMap<usize, u64>)> = Vec::new();
    for window in ids.windows(needed) {
        let (ctx, next) = window.split_at(context_len);
        let j = *index.entry(ctx).or_insert_with(|| {
            contexts.push(ctx);
            counts.push((0, HashMap::new()));
            contexts.len() - 1
        });
        counts[j].0 += 1;
        *counts[j].1.entry(next[0]).or_insert(0) += 1;
    }

    let kept: Vec<usize> = (0..contexts.len()).filter(|&j| counts[j].0 >= min_count.max(1)).collect();
    if kept.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            tokens: ids.len(),
            needed,
        });
    }
    let n: u64 = kept.iter().map(|&j| counts[j].0).sum();
    let mut pi = Vec::with_capacity(kept.len());
    let mut columns = Vec::with_capacity(kept.len());
    let mut ctx_out = Vec::with_capacity(kept.len());
    for &j in &kept {
        let (total, next) = &counts[j];
        let mut entries: Vec<(usize, u64)> = next.iter().map(|(&z, &c)| (z, c)).collect();
        entries.sort_unstable();
        pi.push(*total as f64 / n as f64);
        columns.push(Column {
            support: entries.iter().map(|e| e.0).collect(),
            probs: entries.iter().map(|e| e.1 as f64 / *total as f64).collect(),
        });
        ctx_out.push(contexts[j].to_vec());
    }
    let ds = SoftLabelDataset::new(vocab.size(), n, pi, columns, Some(ctx_out))?;
    Ok((vocab, ds))
}

pub fn binomial(n: usize, k: usize) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// Next k-subset of `0..v` in lexicographic order, in place.
fn next_combination(c: &mut [usize], v: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < v - k + i {
            c[i] += 1;
            for t in i + 1..k {
                c[t] = c[t - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Every size-`k` support set once, uniform labels and uniform priors.
pub fn gen_symmetric(v: usize, k: usize) -> Result<SoftLabelDataset> {
    gen_symmetric_capped(v, k, DEFAULT_SYMMETRIC_CAP)
}

pub fn gen_symmetric_capped(v: usize, k: usize, cap: u64) -> Result<SoftLabelDataset> {
    if k == 0 || k >= v {
        return Err(CorpusError::Argument(format!("need 1 <= k <= V-1, got V={v}, k={k}")));
    }
    let count = binomial(v, k).unwrap_or(u64::MAX);
    if count > cap {
        return Err(CorpusError::SizeOverflow { v, k, count, cap });
    }
    let m = count as usize;
    let mut columns = Vec::with_capacity(m);
    let mut comb: Vec<usize> = (0..k).collect();
    loop {
        columns.push(Column {
            support: comb.clone(),
            probs: vec![1.0 / k as f64; k],
        });
        if !next_combination(&mut comb, v) {
            break;
        }
    }
    SoftLabelDataset::new(v, m as u64, vec![1.0 / m as f64; m], columns, None)
}

/// Support-set size for random generation: a fixed size or an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportSize {
    Fixed(usize),
    Range(usize, usize),
}

impl SupportSize {
    fn bounds(self) -> (usize, usize) {
        match self {
            SupportSize::Fixed(k) => (k, k),
            SupportSize::Range(lo, hi) => (lo, hi),
        }
    }
}

impl std::str::FromStr for SupportSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad support size {t:?}: {e}"));
        match s.split_once(['-', ':']) {
            Some((a, b)) => Ok(SupportSize::Range(parse(a)?, parse(b)?)),
            None => Ok(SupportSize::Fixed(parse(s)?)),
        }
    }
}

/// Random supports (drawn without replacement) with Dirichlet(1) labels and
/// uniform priors. Deterministic in `seed`.
pub fn gen_random(v: usize, m: usize, size: SupportSize, seed: u64) -> Result<SoftLabelDataset> {
    let (lo, hi) = size.bounds();
    if lo == 0 || lo > hi || hi > v {
        return Err(CorpusError::Argument(format!(
            "support size {lo}..={hi} is not within 1..={v}"
        )));
    }
    if m == 0 {
        return Err(CorpusError::Argument("m must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns = (0..m)
        .map(|_| {
            let k = rng.random_range(lo..=hi);
            let mut support = sample(&mut rng, v, k).into_vec();
            support.sort_unstable();
            let raw: Vec<f64> = (0..k)
                .map(|_| {
                    let x: f64 = Exp1.sample(&mut rng);
                    x.max(f64::MIN_POSITIVE)
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let probs = normalize(raw.iter().map(|x| x / total).collect());
            Column { support, probs }
        })
        .collect();
    SoftLabelDataset::new(v, m as u64, vec![1.0 / m as f64; m], columns, None)
}

/// Random soft labels on a given support pattern (Dirichlet(1), uniform priors).
pub fn random_labels(support: &SupportMatrix, seed: u64) -> Result<SoftLabelDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = support.num_contexts();
    let columns = support
        .sets()
        .iter()
        .map(|set| {
            let raw: Vec<f64> = set.iter().map(|_| Exp1.sample(&mut rng)).map(|x: f64| x.max(1e-300)).collect();
            let total: f64 = raw.iter().sum();
            Column {
                support: set.clone(),
                probs: normalize(raw.iter().map(|x| x / total).collect()),
            }
        })
        .collect();
    SoftLabelDataset::new(support.vocab_size(), m as u64, vec![1.0 / m as f64; m], columns, None)
}

/// Pushes the rounding residue of a probability vector onto its largest entry.
fn normalize(mut p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    if let Some(imax) = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])) {
        p[imax] += 1.0 - s;
    }
    p
}

/// Empirical conditional entropy in nats: −Σ_j π_j Σ_z p_jz log p_jz.
pub fn entropy(ds: &SoftLabelDataset) -> f64 {
    let h: f64 = ds
        .pi
        .iter()
        .zip(&ds.columns)
        .map(|(pi, col)| pi * col.probs.iter().map(|&p| -p * p.ln()).sum::<f64>())
        .sum();
    h.max(0.0)
}
