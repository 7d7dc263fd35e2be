//! Python bindings for the length-controllable encoder-decoder laboratory.
//!
//! Exposes the main operations of the core crate: toy-corpus generation,
//! training the three model variants, constrained decoding, byte
//! accounting, ROUGE scoring, and the paired permutation test.
//!
//! The module builds as `lencon_py`; see `python/smoke_test.py` for a
//! round-trip exercise of every binding.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use lencon_core::data::{self, ToyCorpusConfig, Vocabulary};
use lencon_core::decoding::{
    beam_search, decode_learned, DecodeConstraint, DEFAULT_BEAM, FIXRNG_BEAM,
};
use lencon_core::evaluation;
use lencon_core::model::{
    load_checkpoint, load_vocab_sidecar, save_checkpoint, save_vocab_sidecar, Hyper, ModelParams,
    Variant,
};
use lencon_core::numerics::Tape;
use lencon_core::training::{encode_corpus, train, AdamState, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_variant(tag: &str) -> PyResult<Variant> {
    match tag {
        "plain" => Ok(Variant::Plain),
        "lenemb" => Ok(Variant::LenEmb),
        "leninit" => Ok(Variant::LenInit),
        other => Err(PyValueError::new_err(format!(
            "unknown variant {other:?}; expected plain, lenemb, or leninit"
        ))),
    }
}

fn split_tokens(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_string).collect()
}

/// Rendered UTF-8 byte length of a token sequence joined by single spaces.
#[pyfunction]
fn byte_length(tokens: Vec<String>) -> usize {
    data::byte_length(&tokens)
}

/// Longest whole-token prefix of `tokens` whose rendered byte length fits
/// `limit`.
#[pyfunction]
fn truncate_bytes(tokens: Vec<String>, limit: usize) -> Vec<String> {
    evaluation::truncate_bytes(&tokens, limit).to_vec()
}

/// N-gram recall of `candidate` against one or more references (pooled
/// clipped counts).
#[pyfunction]
fn rouge_n(candidate: Vec<String>, references: Vec<Vec<String>>, n: usize) -> PyResult<f64> {
    evaluation::rouge_n(&candidate, &references, n).map_err(value_err)
}

/// Longest-common-subsequence recall of `candidate` against the best of the
/// references.
#[pyfunction]
fn rouge_l(candidate: Vec<String>, references: Vec<Vec<String>>) -> PyResult<f64> {
    evaluation::rouge_l(&candidate, &references).map_err(value_err)
}

/// Paired two-sided permutation test on score vectors: exact enumeration up
/// to 12 pairs, add-one-smoothed sign sampling beyond.
#[pyfunction]
#[pyo3(signature = (scores_a, scores_b, iterations = 100_000, seed = 0))]
fn permutation_test(
    scores_a: Vec<f64>,
    scores_b: Vec<f64>,
    iterations: u64,
    seed: u64,
) -> PyResult<f64> {
    evaluation::permutation_test(&scores_a, &scores_b, iterations, seed).map_err(value_err)
}

/// Deterministic prefix-truncation corpus: each pair is (source sentence,
/// target = longest source prefix within a sampled byte budget), returned as
/// space-joined strings.
#[pyfunction]
#[pyo3(signature = (size, seed = 0, vocab_size = 40, source_len_range = (15, 30), budget_range = (10, 60)))]
fn gen_toy_corpus(
    size: usize,
    seed: u64,
    vocab_size: usize,
    source_len_range: (usize, usize),
    budget_range: (usize, usize),
) -> PyResult<Vec<(String, String)>> {
    let (pairs, _) = data::gen_toy_corpus(&ToyCorpusConfig {
        vocab_size,
        source_len_range,
        budget_range,
        size,
        seed,
    })
    .map_err(value_err)?;
    Ok(pairs
        .into_iter()
        .map(|p| (p.source.join(" "), p.target.join(" ")))
        .collect())
}

/// An attentional encoder-decoder with optional learned length control.
///
/// Construct with [`Model.train`] or [`Model.load`]; persist with `save`,
/// which writes the checkpoint plus a vocabulary sidecar next to it.
#[pyclass]
struct Model {
    params: ModelParams,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    tgt_bytes: Vec<usize>,
}

#[pymethods]
impl Model {
    /// Train a model on (source sentence, target sentence) string pairs.
    #[staticmethod]
    #[pyo3(signature = (
        pairs,
        variant = "plain",
        embed_dim = 16,
        hidden_dim = 32,
        len_embed_dim = 16,
        len_types = 300,
        updates = 200,
        batch_size = 40,
        alpha = 0.005,
        seed = 0,
        max_src_vocab = 30_000,
        max_tgt_vocab = 30_000,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        pairs: Vec<(String, String)>,
        variant: &str,
        embed_dim: usize,
        hidden_dim: usize,
        len_embed_dim: usize,
        len_types: usize,
        updates: usize,
        batch_size: usize,
        alpha: f64,
        seed: u64,
        max_src_vocab: usize,
        max_tgt_vocab: usize,
    ) -> PyResult<Self> {
        let variant = parse_variant(variant)?;
        let parsed: Vec<data::SentenceSummaryPair> = pairs
            .iter()
            .map(|(src, tgt)| {
                data::SentenceSummaryPair::new(split_tokens(src), split_tokens(tgt))
            })
            .collect();
        let (src_vocab, tgt_vocab) =
            data::build_vocab(&parsed, max_src_vocab, max_tgt_vocab).map_err(value_err)?;
        let corpus = encode_corpus(&parsed, &src_vocab, &tgt_vocab);
        let tgt_bytes = tgt_vocab.token_byte_lens();
        let hyper = Hyper {
            variant,
            e: embed_dim,
            h: hidden_dim,
            d_len: len_embed_dim,
            l_types: len_types,
            v_src: src_vocab.len(),
            v_tgt: tgt_vocab.len(),
        };
        let mut params = ModelParams::new_random(hyper, seed);
        let mut opt = AdamState::new();
        let config = TrainConfig {
            batch_size,
            alpha,
            max_updates: updates,
            seed,
            ..Default::default()
        };
        train(&mut params, &corpus, &tgt_bytes, &config, &mut opt, |_, _, _, _| {})
            .map_err(value_err)?;
        Ok(Model {
            params,
            src_vocab,
            tgt_vocab,
            tgt_bytes,
        })
    }

    /// Load a checkpoint saved by `save` (or by the command-line trainer);
    /// expects the vocabulary sidecar next to it.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let params = load_checkpoint(&path).map_err(value_err)?;
        let (src_vocab, tgt_vocab) = load_vocab_sidecar(&path).map_err(value_err)?;
        let tgt_bytes = tgt_vocab.token_byte_lens();
        Ok(Model {
            params,
            src_vocab,
            tgt_vocab,
            tgt_bytes,
        })
    }

    /// Write the checkpoint and its vocabulary sidecar.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.params, &path).map_err(value_err)?;
        save_vocab_sidecar(&path, &self.src_vocab, &self.tgt_vocab).map_err(value_err)
    }

    /// The variant tag: "plain", "lenemb", or "leninit".
    #[getter]
    fn variant(&self) -> &'static str {
        self.params.hyper.variant.tag()
    }

    /// Decode one source sentence.
    ///
    /// Methods: "free" (plain beam search), "fixlen" (EOS-free search
    /// truncated at `length` bytes), "fixrng" (output length forced into
    /// [`min_bytes`, `max_bytes`]), and "learned" (length-conditioned model
    /// steered to `length`; `hard=True` additionally caps the output at
    /// `length` bytes).
    ///
    /// Returns `(summary, bytes, logprob)`.
    #[pyo3(signature = (
        source,
        method = "free",
        length = None,
        min_bytes = None,
        max_bytes = None,
        hard = false,
        beam = None,
    ))]
    fn decode(
        &self,
        source: &str,
        method: &str,
        length: Option<usize>,
        min_bytes: Option<usize>,
        max_bytes: Option<usize>,
        hard: bool,
        beam: Option<usize>,
    ) -> PyResult<(String, usize, f64)> {
        let ids = self.src_vocab.encode_all(&split_tokens(source));
        let beam = beam.unwrap_or(match (method, hard) {
            ("fixrng", _) | ("learned", true) => FIXRNG_BEAM,
            _ => DEFAULT_BEAM,
        });
        let mut tape = Tape::new();
        let result = match method {
            "free" => {
                let mut c = DecodeConstraint::free(beam);
                if let Some(l) = length {
                    c = c.with_desired(l);
                }
                beam_search(&self.params, &mut tape, &ids, &c, &self.tgt_bytes)
            }
            "fixlen" => {
                let desired = length
                    .ok_or_else(|| PyValueError::new_err("method 'fixlen' requires length"))?;
                let c = DecodeConstraint::fix_len(desired, beam);
                beam_search(&self.params, &mut tape, &ids, &c, &self.tgt_bytes)
            }
            "fixrng" => {
                let mut c = DecodeConstraint::fix_rng(min_bytes.unwrap_or(0), max_bytes, beam);
                if let Some(l) = length {
                    c = c.with_desired(l);
                }
                beam_search(&self.params, &mut tape, &ids, &c, &self.tgt_bytes)
            }
            "learned" => {
                let desired = length
                    .ok_or_else(|| PyValueError::new_err("method 'learned' requires length"))?;
                decode_learned(&self.params, &mut tape, &ids, desired, hard, beam, &self.tgt_bytes)
            }
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown method {other:?}; expected free, fixlen, fixrng, or learned"
                )))
            }
        }
        .map_err(value_err)?;
        let best = result.best();
        let words: Vec<&str> = best
            .tokens
            .iter()
            .map(|&t| self.tgt_vocab.decode(t).unwrap_or(data::UNK_TOKEN))
            .collect();
        Ok((words.join(" "), best.bytes, best.logprob))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={:?}, embed={}, hidden={}, src_vocab={}, tgt_vocab={})",
            self.params.hyper.variant.tag(),
            self.params.hyper.e,
            self.params.hyper.h,
            self.src_vocab.len(),
            self.tgt_vocab.len(),
        )
    }
}

#[pymodule]
fn lencon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(byte_length, m)?)?;
    m.add_function(wrap_pyfunction!(truncate_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_n, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(permutation_test, m)?)?;
    m.add_function(wrap_pyfunction!(gen_toy_corpus, m)?)?;
    Ok(())
}
