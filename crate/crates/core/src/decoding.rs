//! Beam-search decoding with the four length-control regimes.
//!
//! * `free` — plain beam search; hypotheses finish when EOS is emitted.
//! * `fixLen` — EOS is masked out of every expansion, so hypotheses grow
//!   until the next word would overflow the desired byte length; that word is
//!   then dropped and replaced with EOS (scored with the EOS log-probability).
//! * `fixRng` — hypotheses that emit EOS below the minimum byte length are
//!   discarded; extensions past the maximum are force-finalized by the same
//!   EOS-replacement rule and re-enter the beam.
//! * learned models (LenEmb/LenInit) decode with the desired length wired
//!   into the decoder state: `hard` mode reuses the fixRng hooks with the
//!   range `(0, desired)`, soft mode is free search.
//!
//! Scores are raw summed log-probabilities without length normalization.

use thiserror::Error;

use crate::data::{BOS, EOS};
use crate::model::{
    decoder_step, encode, init_decoder_state, DecoderState, ModelError, ModelParams, Variant,
};
use crate::numerics::Tape;

/// Additive logit penalty used to mask EOS in fixLen expansions. Finite on
/// purpose: the arithmetic stays well-defined while the masked coordinate can
/// never win an expansion.
pub const EOS_MASK: f64 = -1e9;

/// Default beam width for free, fixLen, and learned decoding.
pub const DEFAULT_BEAM: usize = 10;
/// Default beam width for fixRng, which discards aggressively.
pub const FIXRNG_BEAM: usize = 30;
/// Step cap when no byte bound implies one.
pub const UNCONSTRAINED_STEP_CAP: usize = 120;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid decode constraint: {reason}")]
    InvalidConstraint { reason: String },
    #[error("beam emptied with no finished hypothesis under constraint {constraint}")]
    EmptyBeam { constraint: String },
    #[error("step cap {steps} exhausted with no finished hypothesis under constraint {constraint}")]
    StepCapExhausted { constraint: String, steps: usize },
    #[error("learned decoding requires a LenEmb or LenInit model, got {found:?}")]
    WrongVariant { found: Variant },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMethod {
    Free,
    FixLen,
    FixRng,
}

impl DecodeMethod {
    pub fn tag(self) -> &'static str {
        match self {
            DecodeMethod::Free => "free",
            DecodeMethod::FixLen => "fixlen",
            DecodeMethod::FixRng => "fixrng",
        }
    }
}

/// Which regime to decode under, with its byte bounds and beam width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeConstraint {
    pub method: DecodeMethod,
    /// Desired byte length: the fixLen bound, and the length wired into
    /// length-conditioned models in any method.
    pub desired: Option<usize>,
    /// fixRng lower bound (defaults to 0 when absent).
    pub min_bytes: Option<usize>,
    /// fixRng upper bound; `None` means unbounded.
    pub max_bytes: Option<usize>,
    pub beam_size: usize,
    /// Overrides the derived step cap when set.
    pub max_steps: Option<usize>,
}

impl DecodeConstraint {
    pub fn free(beam_size: usize) -> Self {
        DecodeConstraint {
            method: DecodeMethod::Free,
            desired: None,
            min_bytes: None,
            max_bytes: None,
            beam_size,
            max_steps: None,
        }
    }

    pub fn fix_len(desired: usize, beam_size: usize) -> Self {
        DecodeConstraint {
            method: DecodeMethod::FixLen,
            desired: Some(desired),
            min_bytes: None,
            max_bytes: None,
            beam_size,
            max_steps: None,
        }
    }

    pub fn fix_rng(min_bytes: usize, max_bytes: Option<usize>, beam_size: usize) -> Self {
        DecodeConstraint {
            method: DecodeMethod::FixRng,
            desired: None,
            min_bytes: Some(min_bytes),
            max_bytes,
            beam_size,
            max_steps: None,
        }
    }

    pub fn with_desired(mut self, desired: usize) -> Self {
        self.desired = Some(desired);
        self
    }

    pub fn with_max_steps(mut self, steps: usize) -> Self {
        self.max_steps = Some(steps);
        self
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidConstraint {
                reason: "beam_size must be at least 1".into(),
            });
        }
        match self.method {
            DecodeMethod::Free => {}
            DecodeMethod::FixLen => {
                if self.desired.is_none() {
                    return Err(DecodeError::InvalidConstraint {
                        reason: "fixlen requires a desired length".into(),
                    });
                }
            }
            DecodeMethod::FixRng => {
                if let Some(max) = self.max_bytes {
                    if self.min_bytes.unwrap_or(0) > max {
                        return Err(DecodeError::InvalidConstraint {
                            reason: format!(
                                "fixrng range is empty: min {} > max {}",
                                self.min_bytes.unwrap_or(0),
                                max
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Derived step cap: four steps per desired/maximum byte, or the
    /// unconstrained cap when no bound applies. Always at least one step.
    pub fn step_cap(&self) -> usize {
        let derived = match self.method {
            DecodeMethod::FixLen => self.desired.map(|d| 4 * d),
            DecodeMethod::FixRng => self.max_bytes.map(|m| 4 * m),
            DecodeMethod::Free => self.desired.map(|d| 4 * d),
        };
        self.max_steps
            .unwrap_or_else(|| derived.unwrap_or(UNCONSTRAINED_STEP_CAP))
            .max(1)
    }

    pub fn describe(&self) -> String {
        let mut parts = vec![format!("method={}", self.method.tag())];
        if let Some(d) = self.desired {
            parts.push(format!("desired={d}"));
        }
        if let Some(m) = self.min_bytes {
            parts.push(format!("min={m}"));
        }
        if let Some(m) = self.max_bytes {
            parts.push(format!("max={m}"));
        }
        parts.push(format!("beam={}", self.beam_size));
        parts.join(" ")
    }
}

/// Evidence for the fixLen/fixRng truncation rule: the word whose addition
/// would have overflowed the bound, replaced by EOS in the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplacedWord {
    pub token: usize,
    /// Byte cost the word would have added, separator included.
    pub bytes_with_sep: usize,
}

/// One beam entry. `tokens` holds emitted content words only (no BOS, no
/// EOS); `bytes` is always the rendered byte length of the space-joined
/// tokens.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub state: DecoderState,
    pub bytes: usize,
    pub finished: bool,
    /// Set when the hypothesis was finalized by EOS replacement.
    pub replaced: Option<ReplacedWord>,
}

/// Finished hypotheses ranked by log-probability, plus termination flags.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub hypotheses: Vec<BeamHypothesis>,
    /// The step cap fired while live hypotheses remained (reported, never
    /// silent).
    pub cap_hit: bool,
    /// A fixLen finalization happened on an empty hypothesis: the first word
    /// alone already exceeded the desired length.
    pub first_word_overflow: bool,
}

impl DecodeResult {
    pub fn best(&self) -> &BeamHypothesis {
        &self.hypotheses[0]
    }
}

/// Decision for one candidate extension under fixLen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixlenAction {
    Extend { new_bytes: usize },
    /// Drop the word, append EOS instead, and score the step with the EOS
    /// log-probability.
    FinalizeWithReplacement { overflow_bytes: usize },
}

/// fixLen rule: if appending the next word (separator included) would exceed
/// the desired byte length, the word is replaced with EOS.
pub fn apply_fixlen(hyp: &BeamHypothesis, next_word_bytes: usize, desired: usize) -> FixlenAction {
    let cost = next_word_bytes + usize::from(!hyp.tokens.is_empty());
    let new_bytes = hyp.bytes + cost;
    if new_bytes > desired {
        FixlenAction::FinalizeWithReplacement {
            overflow_bytes: cost,
        }
    } else {
        FixlenAction::Extend { new_bytes }
    }
}

/// Decision for one candidate under fixRng.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixrngAction {
    Keep,
    Discard,
    ForceFinalize,
}

/// fixRng rules: EOS below the minimum discards the hypothesis; growing past
/// the maximum force-finalizes it by EOS replacement; everything else stays.
pub fn apply_fixrng(
    bytes: usize,
    emitted_eos: bool,
    min_bytes: usize,
    max_bytes: Option<usize>,
) -> FixrngAction {
    if emitted_eos {
        if bytes < min_bytes {
            FixrngAction::Discard
        } else {
            FixrngAction::Keep
        }
    } else if max_bytes.is_some_and(|m| bytes > m) {
        FixrngAction::ForceFinalize
    } else {
        FixrngAction::Keep
    }
}

/// Log-softmax of raw logits, optionally with the EOS coordinate masked by
/// [`EOS_MASK`]. The mask shifts every unmasked coordinate by the same
/// constant, so their relative order is unchanged.
fn log_softmax(logits: &[f64], mask_eos: bool) -> Vec<f64> {
    let mut z = logits.to_vec();
    if mask_eos && z.len() > EOS {
        z[EOS] += EOS_MASK;
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Beam search over the model's output distributions under `constraint`.
///
/// Every live hypothesis is expanded over the full target vocabulary each
/// step; the top `beam_size` candidates by summed log-probability survive.
/// Finished hypotheses keep competing for beam slots but are never extended.
/// Ties break toward the lexicographically smaller token-id sequence.
///
/// `tgt_token_bytes` maps target ids to rendered byte lengths (see
/// [`crate::data::Vocabulary::token_byte_lens`]).
pub fn beam_search(
    params: &ModelParams,
    tape: &mut Tape,
    source: &[usize],
    constraint: &DecodeConstraint,
    tgt_token_bytes: &[usize],
) -> Result<DecodeResult, DecodeError> {
    constraint.validate()?;
    let enc = encode(params, tape, source)?;
    let init = init_decoder_state(params, tape, &enc, constraint.desired)?;
    let v_tgt = params.hyper.v_tgt;
    let cap = constraint.step_cap();
    let mask_eos = constraint.method == DecodeMethod::FixLen;
    let min_bytes = constraint.min_bytes.unwrap_or(0);

    let mut beam = vec![BeamHypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: init,
        bytes: 0,
        finished: false,
        replaced: None,
    }];
    let mut cap_hit = false;
    let mut first_word_overflow = false;

    for _step in 0..cap {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<BeamHypothesis> = Vec::new();
        for hyp in &beam {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let out = decoder_step(params, tape, &hyp.state, prev, &enc, tgt_token_bytes)?;
            let logits = tape.value(out.logits).to_vec();
            let lp = log_softmax(&logits, false);
            let lp_scored = if mask_eos {
                log_softmax(&logits, true)
            } else {
                lp.clone()
            };
            let eos_logprob = lp[EOS];

            // Best-scoring word whose addition would overflow the bound;
            // all such words collapse into one EOS-replaced candidate.
            let mut best_overflow: Option<(f64, ReplacedWord)> = None;
            for tok in 0..v_tgt {
                if tok == EOS {
                    match constraint.method {
                        // EOS is masked out of fixLen expansions entirely.
                        DecodeMethod::FixLen => {}
                        DecodeMethod::Free => {
                            candidates.push(finish_naturally(hyp, &out.next_state, eos_logprob));
                        }
                        DecodeMethod::FixRng => {
                            match apply_fixrng(
                                hyp.bytes,
                                true,
                                min_bytes,
                                constraint.max_bytes,
                            ) {
                                FixrngAction::Keep => candidates.push(finish_naturally(
                                    hyp,
                                    &out.next_state,
                                    eos_logprob,
                                )),
                                FixrngAction::Discard => {}
                                FixrngAction::ForceFinalize => unreachable!("EOS is terminal"),
                            }
                        }
                    }
                    continue;
                }
                let cost = tgt_token_bytes[tok] + usize::from(!hyp.tokens.is_empty());
                let new_bytes = hyp.bytes + cost;
                let extend = |candidates: &mut Vec<BeamHypothesis>| {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    candidates.push(BeamHypothesis {
                        tokens,
                        logprob: hyp.logprob + lp_scored[tok],
                        state: out.next_state,
                        bytes: new_bytes,
                        finished: false,
                        replaced: None,
                    });
                };
                match constraint.method {
                    DecodeMethod::Free => extend(&mut candidates),
                    DecodeMethod::FixLen => {
                        match apply_fixlen(hyp, tgt_token_bytes[tok], constraint.desired.unwrap())
                        {
                            FixlenAction::Extend { .. } => extend(&mut candidates),
                            FixlenAction::FinalizeWithReplacement { overflow_bytes } => {
                                note_overflow(&mut best_overflow, lp_scored[tok], tok, overflow_bytes);
                            }
                        }
                    }
                    DecodeMethod::FixRng => {
                        match apply_fixrng(new_bytes, false, min_bytes, constraint.max_bytes) {
                            FixrngAction::Keep => extend(&mut candidates),
                            FixrngAction::ForceFinalize => {
                                // The forced hypothesis ends in EOS at the
                                // pre-extension length; if that is still
                                // below the minimum it is discarded too.
                                if hyp.bytes >= min_bytes {
                                    note_overflow(
                                        &mut best_overflow,
                                        lp_scored[tok],
                                        tok,
                                        tgt_token_bytes[tok] + usize::from(!hyp.tokens.is_empty()),
                                    );
                                }
                            }
                            FixrngAction::Discard => unreachable!("words never discard"),
                        }
                    }
                }
            }
            if let Some((_, replaced)) = best_overflow {
                if hyp.tokens.is_empty() && constraint.method == DecodeMethod::FixLen {
                    first_word_overflow = true;
                }
                candidates.push(BeamHypothesis {
                    tokens: hyp.tokens.clone(),
                    logprob: hyp.logprob + eos_logprob,
                    state: out.next_state,
                    bytes: hyp.bytes,
                    finished: true,
                    replaced: Some(replaced),
                });
            }
        }

        // Rank: higher logprob first, then lexicographically smaller token
        // sequence, then finished-first; drop exact duplicates (a natural
        // EOS and a forced finalization of the same hypothesis coincide in
        // both tokens and score).
        candidates.sort_by(|a, b| {
            b.logprob
                .total_cmp(&a.logprob)
                .then_with(|| a.tokens.cmp(&b.tokens))
                .then_with(|| b.finished.cmp(&a.finished))
        });
        candidates.dedup_by(|a, b| a.tokens == b.tokens && a.finished == b.finished);
        candidates.truncate(constraint.beam_size);
        if candidates.is_empty() {
            return Err(DecodeError::EmptyBeam {
                constraint: constraint.describe(),
            });
        }
        beam = candidates;
    }

    if beam.iter().any(|h| !h.finished) {
        cap_hit = true;
    }
    let mut finished: Vec<BeamHypothesis> =
        beam.into_iter().filter(|h| h.finished).collect();
    if finished.is_empty() {
        return Err(DecodeError::StepCapExhausted {
            constraint: constraint.describe(),
            steps: cap,
        });
    }
    finished.sort_by(|a, b| {
        b.logprob
            .total_cmp(&a.logprob)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(DecodeResult {
        hypotheses: finished,
        cap_hit,
        first_word_overflow,
    })
}

fn finish_naturally(
    hyp: &BeamHypothesis,
    next_state: &DecoderState,
    eos_logprob: f64,
) -> BeamHypothesis {
    BeamHypothesis {
        tokens: hyp.tokens.clone(),
        logprob: hyp.logprob + eos_logprob,
        state: *next_state,
        bytes: hyp.bytes,
        finished: true,
        replaced: None,
    }
}

fn note_overflow(
    best: &mut Option<(f64, ReplacedWord)>,
    score: f64,
    token: usize,
    bytes_with_sep: usize,
) {
    let candidate = (
        score,
        ReplacedWord {
            token,
            bytes_with_sep,
        },
    );
    match best {
        Some((s, _)) if *s >= score => {}
        _ => *best = Some(candidate),
    }
}

/// Decoding for LenEmb/LenInit models: the desired length feeds the decoder
/// state; `hard` additionally applies the fixRng hooks with range
/// `(0, desired)`, so outputs can never exceed `desired` bytes.
pub fn decode_learned(
    params: &ModelParams,
    tape: &mut Tape,
    source: &[usize],
    desired: usize,
    hard: bool,
    beam_size: usize,
    tgt_token_bytes: &[usize],
) -> Result<DecodeResult, DecodeError> {
    if !matches!(params.hyper.variant, Variant::LenEmb | Variant::LenInit) {
        return Err(DecodeError::WrongVariant {
            found: params.hyper.variant,
        });
    }
    let constraint = if hard {
        DecodeConstraint::fix_rng(0, Some(desired), beam_size).with_desired(desired)
    } else {
        DecodeConstraint::free(beam_size).with_desired(desired)
    };
    beam_search(params, tape, source, &constraint, tgt_token_bytes)
}
