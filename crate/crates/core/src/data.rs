//! Corpus I/O, vocabulary construction, byte-length accounting, and a
//! synthetic length-conditioned corpus generator.
//!
//! The synthetic task is *prefix truncation*: the target of each pair is the
//! longest prefix of the source whose rendered byte length fits a sampled
//! budget. Correct length behavior and correct content are then checkable at
//! the same time, which isolates the length-control mechanisms from
//! linguistic difficulty.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved vocabulary ids.
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: missing TAB separator")]
    MissingTab { path: String, line: usize },
    #[error("{path}:{line}: empty {side} side")]
    EmptySide {
        path: String,
        line: usize,
        side: &'static str,
    },
    #[error("{path}: not valid UTF-8")]
    InvalidUtf8 { path: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("toy corpus config invalid: {0}")]
    BadToyConfig(String),
    #[error("length_stats requires a non-empty collection")]
    EmptyStats,
}

/// Token ↔ id mapping with reserved BOS/EOS/UNK ids 0/1/2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// A vocabulary containing only the reserved tags.
    pub fn reserved() -> Self {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN] {
            v.push_token(tok);
        }
        v
    }

    fn push_token(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    /// Rebuilds a vocabulary from its full token list (reserved tags first),
    /// as stored alongside checkpoints.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in tokens {
            v.push_token(&tok);
        }
        debug_assert_eq!(v.id_to_token.first().map(String::as_str), Some(BOS_TOKEN));
        v
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id for a token, falling back to UNK.
    pub fn encode(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode_all(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t)).collect()
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// UTF-8 byte length of every token's rendered string, indexed by id.
    pub fn token_byte_lens(&self) -> Vec<usize> {
        self.id_to_token.iter().map(|t| t.len()).collect()
    }
}

/// One sentence-summary pair; `target_bytes` is the rendered byte length of
/// the space-joined target and always matches [`byte_length`] of the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSummaryPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub target_bytes: usize,
}

impl SentenceSummaryPair {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Self {
        let target_bytes = byte_length(&target);
        SentenceSummaryPair {
            source,
            target,
            target_bytes,
        }
    }
}

/// Byte length of a space-joined token sequence: the sum of each token's
/// UTF-8 byte count plus one separator byte per gap.
pub fn byte_length<S: AsRef<str>>(tokens: &[S]) -> usize {
    let token_bytes: usize = tokens.iter().map(|t| t.as_ref().len()).sum();
    token_bytes + tokens.len().saturating_sub(1)
}

/// Result of [`load_corpus`]; blank lines are skipped, and their line numbers
/// are reported so callers can warn about them.
#[derive(Debug)]
pub struct CorpusLoad {
    pub pairs: Vec<SentenceSummaryPair>,
    pub skipped_blank_lines: Vec<usize>,
}

/// Loads a TSV corpus: one `source<TAB>target` pair per line, tokens
/// space-separated. Errors carry 1-based line numbers.
pub fn load_corpus(path: &Path) -> Result<CorpusLoad, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|_| DataError::InvalidUtf8 {
        path: path.display().to_string(),
    })?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            skipped.push(lineno);
            continue;
        }
        let Some((src, tgt)) = line.split_once('\t') else {
            return Err(DataError::MissingTab {
                path: path.display().to_string(),
                line: lineno,
            });
        };
        let source: Vec<String> = src.split_whitespace().map(str::to_string).collect();
        let target: Vec<String> = tgt.split_whitespace().map(str::to_string).collect();
        if source.is_empty() {
            return Err(DataError::EmptySide {
                path: path.display().to_string(),
                line: lineno,
                side: "source",
            });
        }
        if target.is_empty() {
            return Err(DataError::EmptySide {
                path: path.display().to_string(),
                line: lineno,
                side: "target",
            });
        }
        pairs.push(SentenceSummaryPair::new(source, target));
    }
    Ok(CorpusLoad {
        pairs,
        skipped_blank_lines: skipped,
    })
}

/// Writes pairs in the same TSV format that [`load_corpus`] reads.
pub fn save_corpus(pairs: &[SentenceSummaryPair], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.source.join(" "));
        out.push('\t');
        out.push_str(&p.target.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Builds separate source/target vocabularies: frequency-sorted (ties broken
/// lexicographically), truncated to the requested maximum sizes (which
/// include the three reserved tags).
pub fn build_vocab(
    pairs: &[SentenceSummaryPair],
    max_src: usize,
    max_tgt: usize,
) -> Result<(Vocabulary, Vocabulary), DataError> {
    if pairs.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let count_side = |side: &dyn Fn(&SentenceSummaryPair) -> &Vec<String>| {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for p in pairs {
            for tok in side(p) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked
    };
    let build = |ranked: Vec<(&str, usize)>, max: usize| {
        let mut vocab = Vocabulary::reserved();
        let budget = max.saturating_sub(vocab.len());
        for (tok, _) in ranked.into_iter().take(budget) {
            vocab.push_token(tok);
        }
        vocab
    };
    let src_ranked = count_side(&|p: &SentenceSummaryPair| &p.source);
    let tgt_ranked = count_side(&|p: &SentenceSummaryPair| &p.target);
    Ok((build(src_ranked, max_src), build(tgt_ranked, max_tgt)))
}

/// Configuration for the synthetic prefix-truncation corpus.
#[derive(Debug, Clone)]
pub struct ToyCorpusConfig {
    /// Number of distinct content words (reserved tags excluded).
    pub vocab_size: usize,
    /// Inclusive range of source lengths in tokens.
    pub source_len_range: (usize, usize),
    /// Inclusive range of byte budgets for the target prefix.
    pub budget_range: (usize, usize),
    pub size: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            vocab_size: 40,
            source_len_range: (15, 30),
            budget_range: (10, 60),
            size: 1000,
            seed: 0,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.vocab_size <= 3 {
            return Err(DataError::BadToyConfig(format!(
                "vocab_size must exceed 3, got {}",
                self.vocab_size
            )));
        }
        if self.source_len_range.0 == 0 || self.source_len_range.0 > self.source_len_range.1 {
            return Err(DataError::BadToyConfig(format!(
                "bad source_len_range {:?}",
                self.source_len_range
            )));
        }
        if self.budget_range.0 > self.budget_range.1 {
            return Err(DataError::BadToyConfig(format!(
                "bad budget_range {:?}",
                self.budget_range
            )));
        }
        if self.size == 0 {
            return Err(DataError::BadToyConfig("size must be positive".into()));
        }
        Ok(())
    }
}

/// Side statistics from [`gen_toy_corpus`].
#[derive(Debug, Default, Clone)]
pub struct ToyGenStats {
    /// Pairs whose budget was smaller than the first source token, so the
    /// target fell back to that single token and exceeds the budget.
    pub budget_underflows: usize,
}

/// The deterministic content vocabulary of the toy corpus: ASCII words with
/// byte lengths cycling over 2..=8 so byte accounting is non-trivial.
pub fn toy_content_words(vocab_size: usize) -> Vec<String> {
    let mut words = Vec::with_capacity(vocab_size);
    for i in 0..vocab_size {
        let target_len = 2 + (i % 7);
        let mut core = String::new();
        let mut v = i;
        loop {
            core.insert(0, (b'a' + (v % 26) as u8) as char);
            v /= 26;
            if v == 0 {
                break;
            }
        }
        while core.len() < target_len {
            core.insert(0, 'a');
        }
        words.push(core);
    }
    words
}

/// Generates the prefix-truncation corpus: source tokens sampled uniformly
/// from the content vocabulary, target = longest source prefix whose rendered
/// byte length fits a budget sampled from `budget_range`. Deterministic for a
/// fixed seed.
pub fn gen_toy_corpus(
    config: &ToyCorpusConfig,
) -> Result<(Vec<SentenceSummaryPair>, ToyGenStats), DataError> {
    config.validate()?;
    let words = toy_content_words(config.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pairs = Vec::with_capacity(config.size);
    let mut stats = ToyGenStats::default();
    for _ in 0..config.size {
        let len = rng.random_range(config.source_len_range.0..=config.source_len_range.1);
        let source: Vec<String> = (0..len)
            .map(|_| words[rng.random_range(0..words.len())].clone())
            .collect();
        let budget = rng.random_range(config.budget_range.0..=config.budget_range.1);
        let mut take = 0;
        let mut used = 0;
        for (i, tok) in source.iter().enumerate() {
            let cost = tok.len() + usize::from(i > 0);
            if used + cost > budget {
                break;
            }
            used += cost;
            take = i + 1;
        }
        if take == 0 {
            // Budget smaller than the very first token: fall back to a
            // one-token target and record the underflow.
            take = 1;
            stats.budget_underflows += 1;
        }
        let target = source[..take].to_vec();
        pairs.push(SentenceSummaryPair::new(source, target));
    }
    Ok((pairs, stats))
}

/// Mean and fixed-width histogram of a collection of byte lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub bin_width: usize,
    /// `(bin_start, count)` for contiguous bins from 0 through the maximum
    /// observed length.
    pub bins: Vec<(usize, usize)>,
}

pub const DEFAULT_BIN_WIDTH: usize = 5;

/// Computes [`LengthStats`] over byte lengths.
pub fn length_stats(lengths: &[usize], bin_width: usize) -> Result<LengthStats, DataError> {
    if lengths.is_empty() || bin_width == 0 {
        return Err(DataError::EmptyStats);
    }
    let sum: usize = lengths.iter().sum();
    let mean = sum as f64 / lengths.len() as f64;
    let max = *lengths.iter().max().unwrap();
    let n_bins = max / bin_width + 1;
    let mut bins: Vec<(usize, usize)> = (0..n_bins).map(|i| (i * bin_width, 0)).collect();
    for &l in lengths {
        bins[l / bin_width].1 += 1;
    }
    Ok(LengthStats {
        mean,
        bin_width,
        bins,
    })
}

impl LengthStats {
    /// CSV rendering: a `bin_start,count` header, one row per bin, and a
    /// `mean,<value>` footer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,count\n");
        for (start, count) in &self.bins {
            let _ = writeln!(out, "{start},{count}");
        }
        let _ = writeln!(out, "mean,{}", self.mean);
        out
    }
}
