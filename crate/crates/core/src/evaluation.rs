//! ROUGE-1/2/L scoring against multiple references with byte truncation,
//! two-sided permutation significance testing, and length-deviation reports.
//!
//! Conventions (stated explicitly so results are reproducible):
//!
//! * ROUGE is computed as **recall**, not F-measure: candidates are truncated
//!   to the byte limit, references are left untruncated, and a shorter summary
//!   earns no bonus.
//! * Multi-reference aggregation is **pooled counts** for ROUGE-N (clipped
//!   n-gram overlap summed over references, divided by the summed reference
//!   n-gram mass) and **maximum over references** for ROUGE-L.
//! * Token matching is case-sensitive; tokenization is whatever the corpus
//!   provides.
//! * The sampled permutation test uses the add-one estimator
//!   `(1 + hits) / (1 + iterations)` so a p-value is never exactly zero; the
//!   exact mode enumerates all `2^n` sign flips and reports the plain
//!   fraction, which is positive because the identity assignment always
//!   reproduces the observed statistic.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{length_stats, DataError, LengthStats};

/// Largest pair count for which [`permutation_test`] enumerates all `2^n`
/// sign assignments instead of sampling.
pub const EXACT_PERMUTATION_LIMIT: usize = 12;

/// Default iteration count for the sampled permutation test.
pub const DEFAULT_PERM_ITERATIONS: u64 = 100_000;

/// Byte tolerance used for the "fraction within tolerance" length statistic.
pub const WITHIN_TOLERANCE_BYTES: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("n-gram order must be at least 1")]
    ZeroGram,
    #[error("at least one reference is required")]
    NoReferences,
    #[error("score vectors must have equal length (got {a} and {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("permutation test requires at least one score pair")]
    EmptyScores,
    #[error("sampled permutation test requires at least one iteration")]
    ZeroIterations,
    #[error("length group (desired {desired:?}) is empty")]
    EmptyGroup { desired: Option<usize> },
    #[error("at least one system is required")]
    NoSystems,
    #[error("at least one document is required")]
    NoDocuments,
    #[error("system {system:?} has {found} documents, expected {expected}")]
    MisalignedDocuments {
        system: String,
        expected: usize,
        found: usize,
    },
    #[error("report (de)serialization failed: {0}")]
    Serde(String),
}

// ---------------------------------------------------------------------------
// Truncation
// ---------------------------------------------------------------------------

/// Longest prefix of `tokens` whose rendered byte length (single-byte
/// separators between words) does not exceed `limit`. Truncation is
/// whole-token: no partial words are kept.
pub fn truncate_bytes<S: AsRef<str>>(tokens: &[S], limit: usize) -> &[S] {
    let mut used = 0usize;
    for (i, tok) in tokens.iter().enumerate() {
        let cost = usize::from(i > 0) + tok.as_ref().len();
        if used + cost > limit {
            return &tokens[..i];
        }
        used += cost;
    }
    tokens
}

// ---------------------------------------------------------------------------
// ROUGE
// ---------------------------------------------------------------------------

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let gram: Vec<&str> = window.iter().map(|t| t.as_ref()).collect();
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Multi-reference ROUGE-N recall with pooled reference counts:
/// `Σ_ref Σ_gram min(count_cand, count_ref) / Σ_ref Σ_gram count_ref`.
///
/// Counts are multiset counts. A candidate shorter than `n` contributes no
/// overlap but the score stays defined; if every reference is shorter than
/// `n` the reference mass is zero and the score is 0.
pub fn rouge_n<S: AsRef<str>, R: AsRef<str>>(
    candidate: &[S],
    references: &[Vec<R>],
    n: usize,
) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroGram);
    }
    if references.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let cand = ngram_counts(candidate, n);
    let mut overlap = 0usize;
    let mut mass = 0usize;
    for reference in references {
        for (gram, &count) in &ngram_counts(reference.as_slice(), n) {
            mass += count;
            overlap += count.min(cand.get(gram).copied().unwrap_or(0));
        }
    }
    if mass == 0 {
        return Ok(0.0);
    }
    Ok(overlap as f64 / mass as f64)
}

fn lcs_len<S: AsRef<str>, R: AsRef<str>>(a: &[S], b: &[R]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for tok_a in a {
        for (j, tok_b) in b.iter().enumerate() {
            cur[j + 1] = if tok_a.as_ref() == tok_b.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.fill(0);
    }
    prev[b.len()]
}

/// Multi-reference ROUGE-L recall: `max_ref LCS(candidate, ref) / |ref|`,
/// with the longest common subsequence computed by dynamic programming.
/// An empty reference contributes 0.
pub fn rouge_l<S: AsRef<str>, R: AsRef<str>>(
    candidate: &[S],
    references: &[Vec<R>],
) -> Result<f64, EvalError> {
    if references.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let mut best = 0.0f64;
    for reference in references {
        if reference.is_empty() {
            continue;
        }
        let score = lcs_len(candidate, reference.as_slice()) as f64 / reference.len() as f64;
        best = best.max(score);
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Scored instances
// ---------------------------------------------------------------------------

/// One candidate summary with its references and an optional byte limit.
/// When the limit is set the candidate is truncated before scoring; the
/// references are never truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub length_limit: Option<usize>,
}

impl EvalInstance {
    pub fn new(
        candidate: Vec<String>,
        references: Vec<Vec<String>>,
        length_limit: Option<usize>,
    ) -> Result<Self, EvalError> {
        if references.is_empty() {
            return Err(EvalError::NoReferences);
        }
        Ok(Self {
            candidate,
            references,
            length_limit,
        })
    }

    /// The candidate as scored: truncated to the byte limit when one is set.
    pub fn scored_candidate(&self) -> &[String] {
        match self.length_limit {
            Some(limit) => truncate_bytes(&self.candidate, limit),
            None => &self.candidate,
        }
    }

    pub fn rouge_n(&self, n: usize) -> Result<f64, EvalError> {
        rouge_n(self.scored_candidate(), &self.references, n)
    }

    pub fn rouge_l(&self) -> Result<f64, EvalError> {
        rouge_l(self.scored_candidate(), &self.references)
    }
}

// ---------------------------------------------------------------------------
// Permutation significance test
// ---------------------------------------------------------------------------

fn paired_diffs(scores_a: &[f64], scores_b: &[f64]) -> Result<Vec<f64>, EvalError> {
    if scores_a.len() != scores_b.len() {
        return Err(EvalError::LengthMismatch {
            a: scores_a.len(),
            b: scores_b.len(),
        });
    }
    if scores_a.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    Ok(scores_a
        .iter()
        .zip(scores_b)
        .map(|(a, b)| a - b)
        .collect())
}

/// `|mean(a') − mean(b')|` after flipping the marked pairs, computed as
/// `|Σ ±d_i| / n` so the unflipped assignment reproduces the observed
/// statistic bit for bit.
fn flip_statistic(diffs: &[f64], flipped: impl Fn(usize) -> bool) -> f64 {
    let sum: f64 = diffs
        .iter()
        .enumerate()
        .map(|(i, &d)| if flipped(i) { -d } else { d })
        .sum();
    (sum / diffs.len() as f64).abs()
}

/// Exact two-sided paired permutation test: enumerates all `2^n` sign
/// assignments of the per-document differences and reports the fraction whose
/// statistic `|mean(a) − mean(b)|` is at least the observed one.
pub fn permutation_test_exact(scores_a: &[f64], scores_b: &[f64]) -> Result<f64, EvalError> {
    let diffs = paired_diffs(scores_a, scores_b)?;
    let n = diffs.len();
    let observed = flip_statistic(&diffs, |_| false);
    let total = 1u64 << n;
    let mut hits = 0u64;
    for mask in 0..total {
        if flip_statistic(&diffs, |i| mask >> i & 1 == 1) >= observed {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Sampled two-sided paired permutation test: each iteration flips every
/// pair independently with probability 1/2. Uses the add-one estimator
/// `(1 + hits) / (1 + iterations)` so the p-value is never zero.
pub fn permutation_test_sampled(
    scores_a: &[f64],
    scores_b: &[f64],
    iterations: u64,
    seed: u64,
) -> Result<f64, EvalError> {
    if iterations == 0 {
        return Err(EvalError::ZeroIterations);
    }
    let diffs = paired_diffs(scores_a, scores_b)?;
    let observed = flip_statistic(&diffs, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..iterations {
        let flips: Vec<bool> = (0..diffs.len()).map(|_| rng.random()).collect();
        if flip_statistic(&diffs, |i| flips[i]) >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + iterations) as f64)
}

/// Two-sided paired permutation test on per-document scores.
///
/// For `n ≤` [`EXACT_PERMUTATION_LIMIT`] the test is exact (and `iterations`
/// and `seed` are ignored); otherwise it is sampled. The p-value is always in
/// `(0, 1]`.
pub fn permutation_test(
    scores_a: &[f64],
    scores_b: &[f64],
    iterations: u64,
    seed: u64,
) -> Result<f64, EvalError> {
    if scores_a.len() == scores_b.len() && scores_a.len() <= EXACT_PERMUTATION_LIMIT {
        permutation_test_exact(scores_a, scores_b)
    } else {
        permutation_test_sampled(scores_a, scores_b, iterations, seed)
    }
}

// ---------------------------------------------------------------------------
// Length reports
// ---------------------------------------------------------------------------

/// Byte lengths of the outputs decoded for one desired length
/// (`desired = None` marks a free-decode group). The optional label
/// distinguishes groups from different systems or runs.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthGroup {
    pub label: Option<String>,
    pub desired: Option<usize>,
    pub byte_lengths: Vec<usize>,
}

/// Length behavior of one group: how far outputs land from the desired
/// length, and how their lengths are distributed. Free-decode groups report
/// dispersion only (mean and histogram): there is no target to deviate from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthGroupReport {
    pub label: Option<String>,
    pub desired: Option<usize>,
    pub count: usize,
    pub mean_bytes: f64,
    /// Mean `|bytes − desired|`; absent for free-decode groups.
    pub mean_abs_deviation: Option<f64>,
    /// Fraction of outputs within [`WITHIN_TOLERANCE_BYTES`] of the desired
    /// length; absent for free-decode groups.
    pub frac_within_tolerance: Option<f64>,
    pub histogram: LengthStats,
}

/// Per-group length statistics over decoded outputs.
pub fn length_report(
    groups: &[LengthGroup],
    bin_width: usize,
) -> Result<Vec<LengthGroupReport>, EvalError> {
    groups
        .iter()
        .map(|group| {
            if group.byte_lengths.is_empty() {
                return Err(EvalError::EmptyGroup {
                    desired: group.desired,
                });
            }
            let histogram = length_stats(&group.byte_lengths, bin_width)?;
            let count = group.byte_lengths.len();
            let (mean_abs_deviation, frac_within_tolerance) = match group.desired {
                Some(desired) => {
                    let dev_sum: f64 = group
                        .byte_lengths
                        .iter()
                        .map(|&l| l.abs_diff(desired) as f64)
                        .sum();
                    let within = group
                        .byte_lengths
                        .iter()
                        .filter(|&&l| l.abs_diff(desired) <= WITHIN_TOLERANCE_BYTES)
                        .count();
                    (
                        Some(dev_sum / count as f64),
                        Some(within as f64 / count as f64),
                    )
                }
                None => (None, None),
            };
            Ok(LengthGroupReport {
                label: group.label.clone(),
                desired: group.desired,
                count,
                mean_bytes: histogram.mean,
                mean_abs_deviation,
                frac_within_tolerance,
                histogram,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Multi-system evaluation
// ---------------------------------------------------------------------------

/// Per-document outputs of one system, aligned with the reference list.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemOutput {
    pub name: String,
    pub documents: Vec<Vec<String>>,
}

/// Mean ROUGE scores of one system under one byte limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScores {
    pub system: String,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
}

/// Pairwise significance of a score difference under one byte limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSignificance {
    pub system_a: String,
    pub system_b: String,
    pub metric: String,
    pub p_value: f64,
}

/// Score table and pairwise p-value matrix for one byte limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    pub limit: usize,
    pub scores: Vec<SystemScores>,
    pub pairwise: Vec<PairwiseSignificance>,
}

/// Full evaluation report: per-limit score tables with pairwise significance,
/// plus per-desired-length output statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub limits: Vec<LimitReport>,
    pub length_groups: Vec<LengthGroupReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        serde_json::to_string_pretty(self).map_err(|e| EvalError::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Serde(e.to_string()))
    }
}

/// Metric names in report order (also the order of [`score_document`]'s
/// result and the per-metric vectors fed to [`limit_report_from_scores`]).
pub const METRIC_NAMES: [&str; 3] = ["rouge-1", "rouge-2", "rouge-l"];

/// ROUGE-1/2/L of one candidate truncated to `limit` bytes, scored against
/// untruncated references. The unit of per-document parallelism: callers may
/// fan documents out across workers and aggregate with
/// [`limit_report_from_scores`]; results are independent of worker order.
pub fn score_document(
    candidate: &[String],
    references: &[Vec<String>],
    limit: usize,
) -> Result<[f64; 3], EvalError> {
    let truncated = truncate_bytes(candidate, limit);
    Ok([
        rouge_n(truncated, references, 1)?,
        rouge_n(truncated, references, 2)?,
        rouge_l(truncated, references)?,
    ])
}

/// Per-system per-document scores under one limit, from `per_doc[system][doc]
/// = [r1, r2, rl]`, reduced to means plus pairwise permutation p-values.
///
/// The k-th test (pair-major, metric-minor order) is seeded with
/// `seed + first_test_index + k` so multi-limit reports stay deterministic
/// however the per-document scores were computed.
pub fn limit_report_from_scores(
    limit: usize,
    names: &[String],
    per_doc: &[Vec<[f64; 3]>],
    perm_iterations: u64,
    seed: u64,
    first_test_index: u64,
) -> Result<LimitReport, EvalError> {
    if names.len() != per_doc.len() || names.is_empty() {
        return Err(EvalError::NoSystems);
    }
    let n_docs = per_doc[0].len();
    if n_docs == 0 {
        return Err(EvalError::NoDocuments);
    }
    let metric_vec = |sys: usize, m: usize| -> Vec<f64> {
        per_doc[sys].iter().map(|doc| doc[m]).collect()
    };

    let mut scores = Vec::with_capacity(names.len());
    for (sys, name) in names.iter().enumerate() {
        if per_doc[sys].len() != n_docs {
            return Err(EvalError::MisalignedDocuments {
                system: name.clone(),
                expected: n_docs,
                found: per_doc[sys].len(),
            });
        }
        let mean = |m: usize| metric_vec(sys, m).iter().sum::<f64>() / n_docs as f64;
        scores.push(SystemScores {
            system: name.clone(),
            rouge_1: mean(0),
            rouge_2: mean(1),
            rouge_l: mean(2),
        });
    }

    let mut pairwise = Vec::new();
    let mut test_index = first_test_index;
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            for (m, metric) in METRIC_NAMES.iter().enumerate() {
                let p = permutation_test(
                    &metric_vec(i, m),
                    &metric_vec(j, m),
                    perm_iterations,
                    seed.wrapping_add(test_index),
                )?;
                test_index += 1;
                pairwise.push(PairwiseSignificance {
                    system_a: names[i].clone(),
                    system_b: names[j].clone(),
                    metric: metric.to_string(),
                    p_value: p,
                });
            }
        }
    }

    Ok(LimitReport {
        limit,
        scores,
        pairwise,
    })
}

/// Number of pairwise tests [`limit_report_from_scores`] performs for
/// `n_systems`, for advancing `first_test_index` across limits.
pub fn tests_per_limit(n_systems: usize) -> u64 {
    (n_systems * n_systems.saturating_sub(1) / 2 * METRIC_NAMES.len()) as u64
}

/// Scores every system against the shared references under each byte limit.
///
/// For each limit, candidates are truncated to the limit and scored with
/// ROUGE-1/2/L recall against the untruncated references; per-system means
/// are reported together with two-sided permutation p-values for every system
/// pair and metric. Documents with more references than others are fine; the
/// outputs must align one-to-one with `references`.
///
/// p-values are deterministic for a fixed `seed`: the k-th test performed (in
/// limit, pair, metric order) uses `seed + k`.
pub fn evaluate(
    systems: &[SystemOutput],
    references: &[Vec<Vec<String>>],
    limits: &[usize],
    perm_iterations: u64,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if systems.is_empty() {
        return Err(EvalError::NoSystems);
    }
    let n_docs = references.len();
    if n_docs == 0 {
        return Err(EvalError::NoDocuments);
    }
    if references.iter().any(|refs| refs.is_empty()) {
        return Err(EvalError::NoReferences);
    }
    for system in systems {
        if system.documents.len() != n_docs {
            return Err(EvalError::MisalignedDocuments {
                system: system.name.clone(),
                expected: n_docs,
                found: system.documents.len(),
            });
        }
    }

    let names: Vec<String> = systems.iter().map(|s| s.name.clone()).collect();
    let mut limit_reports = Vec::with_capacity(limits.len());
    let mut test_index = 0u64;
    for &limit in limits {
        let per_doc: Vec<Vec<[f64; 3]>> = systems
            .iter()
            .map(|system| {
                system
                    .documents
                    .iter()
                    .zip(references)
                    .map(|(candidate, refs)| score_document(candidate, refs, limit))
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        limit_reports.push(limit_report_from_scores(
            limit,
            &names,
            &per_doc,
            perm_iterations,
            seed,
            test_index,
        )?);
        test_index += tests_per_limit(systems.len());
    }

    Ok(EvalReport {
        limits: limit_reports,
        length_groups: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::byte_length;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn random_tokens(rng: &mut ChaCha8Rng, vocab: &[&str], max_len: usize) -> Vec<String> {
        let len = rng.random_range(0..=max_len);
        (0..len)
            .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
            .collect()
    }

    // -- truncation --------------------------------------------------------

    #[test]
    fn truncate_keeps_everything_when_limit_covers_total() {
        let tokens = toks("two cases of bird flu");
        assert_eq!(byte_length(&tokens), 21);
        assert_eq!(truncate_bytes(&tokens, 21), &tokens[..]);
        assert_eq!(truncate_bytes(&tokens, 500), &tokens[..]);
    }

    #[test]
    fn truncate_zero_limit_empties() {
        let tokens = toks("aa bb");
        assert!(truncate_bytes(&tokens, 0).is_empty());
    }

    #[test]
    fn truncate_drops_whole_tokens_only() {
        let tokens = toks("aa bb cc");
        assert_eq!(byte_length(&tokens), 8);
        assert_eq!(truncate_bytes(&tokens, 5), &tokens[..2]);
        // Four bytes cannot hold "aa bb"; only "aa" fits.
        assert_eq!(truncate_bytes(&tokens, 4), &tokens[..1]);
    }

    #[test]
    fn truncation_is_maximal_on_random_instances() {
        let vocab = ["a", "bb", "ccc", "dddd", "eeeeeeee"];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let tokens = random_tokens(&mut rng, &vocab, 10);
            let limit = rng.random_range(0..30);
            let kept = truncate_bytes(&tokens, limit);
            assert!(byte_length(kept) <= limit);
            if kept.len() < tokens.len() {
                // Appending the next dropped token must overflow the limit.
                assert!(byte_length(&tokens[..kept.len() + 1]) > limit);
            }
        }
    }

    // -- ROUGE-N -----------------------------------------------------------

    #[test]
    fn rouge_n_identity_scores_one() {
        let cand = toks("a b c d");
        assert_eq!(rouge_n(&cand, &[cand.clone()], 1).unwrap(), 1.0);
        assert_eq!(rouge_n(&cand, &[cand.clone()], 2).unwrap(), 1.0);
    }

    #[test]
    fn rouge_n_disjoint_vocabularies_score_zero() {
        let cand = toks("a b c");
        let refs = vec![toks("x y z")];
        assert_eq!(rouge_n(&cand, &refs, 1).unwrap(), 0.0);
    }

    #[test]
    fn rouge_n_clips_multiset_counts() {
        // cand has {a:1, b:2}; ref has {a:1, b:1, c:1} → overlap 2, mass 3.
        let cand = toks("a b b");
        let refs = vec![toks("a b c")];
        assert_eq!(rouge_n(&cand, &refs, 1).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn rouge_n_short_candidate_is_defined() {
        let cand = toks("a");
        let refs = vec![toks("a b c")];
        assert_eq!(rouge_n(&cand, &refs, 2).unwrap(), 0.0);
        // All references shorter than n → zero reference mass → score 0.
        let refs_short = vec![toks("a")];
        assert_eq!(rouge_n(&cand, &refs_short, 2).unwrap(), 0.0);
    }

    #[test]
    fn rouge_n_rejects_zero_order_and_missing_references() {
        let cand = toks("a");
        assert!(matches!(
            rouge_n(&cand, &[cand.clone()], 0),
            Err(EvalError::ZeroGram)
        ));
        let no_refs: Vec<Vec<String>> = Vec::new();
        assert!(matches!(
            rouge_n(&cand, &no_refs, 1),
            Err(EvalError::NoReferences)
        ));
    }

    /// Independent oracle: scan each reference n-gram by position and count
    /// overlap with naive O(n²) list scans instead of hash maps.
    fn rouge_n_bruteforce(cand: &[String], refs: &[Vec<String>], n: usize) -> f64 {
        let grams = |toks: &[String]| -> Vec<Vec<String>> {
            if toks.len() < n {
                return Vec::new();
            }
            toks.windows(n).map(|w| w.to_vec()).collect()
        };
        let cand_grams = grams(cand);
        let mut overlap = 0usize;
        let mut mass = 0usize;
        for reference in refs {
            let ref_grams = grams(reference);
            mass += ref_grams.len();
            let mut seen: Vec<&Vec<String>> = Vec::new();
            for g in &ref_grams {
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let in_ref = ref_grams.iter().filter(|x| *x == g).count();
                let in_cand = cand_grams.iter().filter(|x| *x == g).count();
                overlap += in_ref.min(in_cand);
            }
        }
        if mass == 0 {
            0.0
        } else {
            overlap as f64 / mass as f64
        }
    }

    #[test]
    fn rouge_n_matches_bruteforce_oracle_on_random_instances() {
        let vocab = ["a", "b", "c", "d"];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for case in 0..100 {
            let n = rng.random_range(1..=3);
            let cand = random_tokens(&mut rng, &vocab, 8);
            let n_refs = rng.random_range(1..=3);
            let refs: Vec<Vec<String>> = (0..n_refs)
                .map(|_| random_tokens(&mut rng, &vocab, 8))
                .collect();
            let got = rouge_n(&cand, &refs, n).unwrap();
            let want = rouge_n_bruteforce(&cand, &refs, n);
            assert_eq!(got, want, "case {case}: n={n} cand={cand:?} refs={refs:?}");
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn rouge_n_invariant_under_reference_permutation() {
        let cand = toks("a b c a");
        let refs = vec![toks("a b"), toks("c a a"), toks("b b c")];
        let permuted = vec![refs[2].clone(), refs[0].clone(), refs[1].clone()];
        assert_eq!(
            rouge_n(&cand, &refs, 1).unwrap(),
            rouge_n(&cand, &permuted, 1).unwrap()
        );
    }

    // -- ROUGE-L -----------------------------------------------------------

    #[test]
    fn rouge_l_identity_scores_one() {
        let cand = toks("a b c");
        assert_eq!(rouge_l(&cand, &[cand.clone()]).unwrap(), 1.0);
    }

    #[test]
    fn rouge_l_counts_noncontiguous_subsequences() {
        let cand = toks("a c d");
        let refs = vec![toks("a b c d")];
        assert_eq!(rouge_l(&cand, &refs).unwrap(), 0.75);
    }

    #[test]
    fn rouge_l_empty_candidate_scores_zero() {
        let cand: Vec<String> = Vec::new();
        let refs = vec![toks("a b")];
        assert_eq!(rouge_l(&cand, &refs).unwrap(), 0.0);
    }

    /// Independent oracle: exhaustively enumerate every subsequence of the
    /// reference (2^|r| bitmasks) and keep the longest one that is also a
    /// subsequence of the candidate.
    fn lcs_bruteforce(cand: &[String], reference: &[String]) -> usize {
        let is_subseq = |needle: &[&String], hay: &[String]| -> bool {
            let mut it = hay.iter();
            needle.iter().all(|n| it.any(|h| h == *n))
        };
        let mut best = 0usize;
        for mask in 0u32..1 << reference.len() {
            let picked: Vec<&String> = reference
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, t)| t)
                .collect();
            if picked.len() > best && is_subseq(&picked, cand) {
                best = picked.len();
            }
        }
        best
    }

    #[test]
    fn rouge_l_matches_exhaustive_subsequence_oracle() {
        let vocab = ["a", "b", "c"];
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for case in 0..100 {
            let cand = random_tokens(&mut rng, &vocab, 10);
            let n_refs = rng.random_range(1..=2);
            let refs: Vec<Vec<String>> = (0..n_refs)
                .map(|_| {
                    let mut r = random_tokens(&mut rng, &vocab, 12);
                    if r.is_empty() {
                        r.push("a".to_string());
                    }
                    r
                })
                .collect();
            let got = rouge_l(&cand, &refs).unwrap();
            let want = refs
                .iter()
                .map(|r| lcs_bruteforce(&cand, r) as f64 / r.len() as f64)
                .fold(0.0f64, f64::max);
            assert_eq!(got, want, "case {case}: cand={cand:?} refs={refs:?}");
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn rouge_l_invariant_under_duplicating_a_reference() {
        let cand = toks("a b c");
        let refs = vec![toks("a c d"), toks("b x")];
        let duplicated = vec![refs[0].clone(), refs[1].clone(), refs[0].clone()];
        assert_eq!(
            rouge_l(&cand, &refs).unwrap(),
            rouge_l(&cand, &duplicated).unwrap()
        );
    }

    #[test]
    fn eval_instance_truncates_candidate_before_scoring() {
        let instance = EvalInstance::new(
            toks("aa bb cc"),
            vec![toks("aa bb")],
            Some(5),
        )
        .unwrap();
        assert_eq!(instance.scored_candidate(), &toks("aa bb")[..]);
        assert_eq!(instance.rouge_n(1).unwrap(), 1.0);
        assert_eq!(instance.rouge_l().unwrap(), 1.0);
        // Without the limit, the stray third word does not hurt recall either
        // (references are untruncated and recall has no precision term).
        let free = EvalInstance::new(toks("aa bb cc"), vec![toks("aa bb")], None).unwrap();
        assert_eq!(free.rouge_n(1).unwrap(), 1.0);
    }

    // -- permutation test --------------------------------------------------

    #[test]
    fn permutation_identical_scores_give_p_one() {
        let scores = vec![0.3, 0.5, 0.9, 0.1];
        assert_eq!(permutation_test_exact(&scores, &scores).unwrap(), 1.0);
        assert_eq!(
            permutation_test_sampled(&scores, &scores, 500, 7).unwrap(),
            1.0
        );
    }

    #[test]
    fn permutation_exact_matches_hand_enumeration() {
        // d = (1,1,1): only the two all-same-sign assignments reach |Δ| = 1,
        // so p = 2/8.
        let a = vec![1.0, 1.0, 1.0];
        let b = vec![0.0, 0.0, 0.0];
        assert_eq!(permutation_test_exact(&a, &b).unwrap(), 0.25);
        // Distinct positive diffs: only identity and full flip tie the
        // observed statistic → p = 2 / 2^n.
        let a = vec![1.0, 2.0, 3.0, 4.5, 5.25];
        let b = vec![0.0; 5];
        assert_eq!(permutation_test_exact(&a, &b).unwrap(), 2.0 / 32.0);
    }

    #[test]
    fn permutation_dispatch_uses_exact_mode_for_small_n() {
        let a = vec![1.0, 1.0, 1.0];
        let b = vec![0.0, 0.0, 0.0];
        // iterations/seed are ignored below the exact-enumeration limit.
        assert_eq!(permutation_test(&a, &b, 3, 1).unwrap(), 0.25);
        assert_eq!(permutation_test(&a, &b, 9999, 2).unwrap(), 0.25);
    }

    #[test]
    fn permutation_sampled_tracks_exact_within_two_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let exact = permutation_test_exact(&a, &b).unwrap();
        let sampled = permutation_test_sampled(&a, &b, DEFAULT_PERM_ITERATIONS, 13).unwrap();
        assert!(
            (exact - sampled).abs() <= 0.02,
            "exact {exact} vs sampled {sampled}"
        );
        assert!(exact > 0.0 && sampled > 0.0);
    }

    #[test]
    fn permutation_rejects_mismatched_or_empty_inputs() {
        assert!(matches!(
            permutation_test(&[1.0], &[1.0, 2.0], 10, 0),
            Err(EvalError::LengthMismatch { a: 1, b: 2 })
        ));
        assert!(matches!(
            permutation_test(&[], &[], 10, 0),
            Err(EvalError::EmptyScores)
        ));
        assert!(matches!(
            permutation_test_sampled(&[1.0], &[0.0], 0, 0),
            Err(EvalError::ZeroIterations)
        ));
    }

    // -- length reports ----------------------------------------------------

    #[test]
    fn length_report_exact_outputs_deviate_zero() {
        let groups = vec![LengthGroup {
            label: None,
            desired: Some(30),
            byte_lengths: vec![30, 30, 30],
        }];
        let report = length_report(&groups, 5).unwrap();
        assert_eq!(report[0].count, 3);
        assert_eq!(report[0].mean_abs_deviation, Some(0.0));
        assert_eq!(report[0].frac_within_tolerance, Some(1.0));
        assert_eq!(report[0].mean_bytes, 30.0);
    }

    #[test]
    fn length_report_free_group_reports_dispersion_only() {
        let groups = vec![LengthGroup {
            label: None,
            desired: None,
            byte_lengths: vec![10, 20, 60],
        }];
        let report = length_report(&groups, 5).unwrap();
        assert_eq!(report[0].mean_abs_deviation, None);
        assert_eq!(report[0].frac_within_tolerance, None);
        assert_eq!(report[0].mean_bytes, 30.0);
        assert_eq!(report[0].histogram.bins.iter().map(|b| b.1).sum::<usize>(), 3);
    }

    #[test]
    fn length_report_symmetric_deviation_arithmetic() {
        let groups = vec![LengthGroup {
            label: None,
            desired: Some(25),
            byte_lengths: vec![20, 30],
        }];
        let report = length_report(&groups, 5).unwrap();
        assert_eq!(report[0].mean_abs_deviation, Some(5.0));
        assert_eq!(report[0].frac_within_tolerance, Some(1.0));
    }

    #[test]
    fn length_report_rejects_empty_group() {
        let groups = vec![LengthGroup {
            label: None,
            desired: Some(10),
            byte_lengths: vec![],
        }];
        assert!(matches!(
            length_report(&groups, 5),
            Err(EvalError::EmptyGroup { desired: Some(10) })
        ));
    }

    // -- evaluate ----------------------------------------------------------

    fn toy_systems_and_refs() -> (Vec<SystemOutput>, Vec<Vec<Vec<String>>>) {
        let refs = vec![
            vec![toks("aa bb cc"), toks("aa bb")],
            vec![toks("dd ee")],
            vec![toks("ff gg hh ii")],
        ];
        let good = SystemOutput {
            name: "good".to_string(),
            documents: vec![toks("aa bb cc"), toks("dd ee"), toks("ff gg hh ii")],
        };
        let noisy = SystemOutput {
            name: "noisy".to_string(),
            documents: vec![toks("aa xx"), toks("yy"), toks("ff gg zz")],
        };
        (vec![good, noisy], refs)
    }

    #[test]
    fn evaluate_identical_systems_tie_with_p_one() {
        let (mut systems, refs) = toy_systems_and_refs();
        systems[1] = SystemOutput {
            name: "clone".to_string(),
            documents: systems[0].documents.clone(),
        };
        let report = evaluate(&systems, &refs, &[30, 75], 100, 0).unwrap();
        assert_eq!(report.limits.len(), 2);
        for limit in &report.limits {
            assert_eq!(limit.scores[0].rouge_1, limit.scores[1].rouge_1);
            assert_eq!(limit.scores[0].rouge_2, limit.scores[1].rouge_2);
            assert_eq!(limit.scores[0].rouge_l, limit.scores[1].rouge_l);
            assert_eq!(limit.pairwise.len(), 3);
            for pair in &limit.pairwise {
                assert_eq!(pair.p_value, 1.0);
            }
        }
    }

    #[test]
    fn evaluate_generous_limit_matches_untruncated_scores() {
        let (systems, refs) = toy_systems_and_refs();
        let report = evaluate(&systems, &refs, &[10_000], 100, 0).unwrap();
        for (scores, system) in report.limits[0].scores.iter().zip(&systems) {
            let direct: f64 = system
                .documents
                .iter()
                .zip(&refs)
                .map(|(cand, r)| rouge_n(cand, r, 1).unwrap())
                .sum::<f64>()
                / refs.len() as f64;
            assert_eq!(scores.rouge_1, direct);
        }
        // The better system must not score below the noisy one.
        assert!(report.limits[0].scores[0].rouge_1 >= report.limits[0].scores[1].rouge_1);
    }

    #[test]
    fn evaluate_tight_limit_equals_manual_truncation() {
        let (systems, refs) = toy_systems_and_refs();
        let limit = 5;
        let report = evaluate(&systems, &refs, &[limit], 100, 0).unwrap();
        let manual: f64 = systems[0]
            .documents
            .iter()
            .zip(&refs)
            .map(|(cand, r)| rouge_n(truncate_bytes(cand, limit), r, 1).unwrap())
            .sum::<f64>()
            / refs.len() as f64;
        assert_eq!(report.limits[0].scores[0].rouge_1, manual);
    }

    #[test]
    fn evaluate_rejects_misaligned_documents() {
        let (mut systems, refs) = toy_systems_and_refs();
        systems[1].documents.pop();
        assert!(matches!(
            evaluate(&systems, &refs, &[30], 100, 0),
            Err(EvalError::MisalignedDocuments { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn eval_report_json_roundtrip() {
        let (systems, refs) = toy_systems_and_refs();
        let mut report = evaluate(&systems, &refs, &[30, 75], 100, 0).unwrap();
        report.length_groups = length_report(
            &[
                LengthGroup {
                    label: None,
                    desired: Some(30),
                    byte_lengths: vec![28, 30, 33],
                },
                LengthGroup {
                    label: None,
                    desired: None,
                    byte_lengths: vec![12, 40],
                },
            ],
            5,
        )
        .unwrap();
        let json = report.to_json().unwrap();
        let back = EvalReport::from_json(&json).unwrap();
        assert_eq!(back, report);
        assert!(json.contains("rouge_1"));
    }
}
