//! The attentional BiLSTM encoder-decoder with the two learning-based
//! length-control variants (LenEmb, LenInit), plus checkpoint persistence.
//!
//! Model structure: a forward and a backward encoder LSTM over source word
//! embeddings; per-position summarized states `h̄_i = fwd_h_i + bwd_h_i`;
//! a decoder LSTM with global dot-product attention over the `h̄_i` and input
//! feeding (the previous attentional vector `s̃` is part of each step's
//! input). The decoder starts from the backward encoder's state at position
//! one; LenInit instead sets the initial memory cell to `b_c * length`, and
//! LenEmb feeds an embedding of the remaining byte budget at every step.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Vocabulary, BOS};
use crate::numerics::{NumericsError, ParamCollection, Tape, Tensor, ValueId};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LENCON1\n";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("source sequence is empty")]
    EmptySource,
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("variant {variant:?} requires a desired length")]
    MissingDesiredLength { variant: Variant },
    #[error("operation requires variant {expected:?}, model is {found:?}")]
    VariantMismatch { expected: Variant, found: Variant },
    #[error("checkpoint I/O on {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint magic in {path}")]
    BadMagic { path: String },
    #[error("bad checkpoint header in {path}: {reason}")]
    BadHeader { path: String, reason: String },
    #[error("checkpoint {path} is truncated")]
    Truncated { path: String },
    #[error("checkpoint record {name} has dims {found:?}, header implies {expected:?}")]
    RecordDimMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint contains unknown parameter record {0}")]
    UnknownRecord(String),
    #[error("checkpoint is missing parameter {0}")]
    MissingRecord(String),
    #[error("vocabulary sidecar error at {path}: {reason}")]
    VocabSidecar { path: String, reason: String },
}

/// Which length-control mechanism (if any) is baked into the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Plain,
    LenEmb,
    LenInit,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::LenEmb => "lenemb",
            Variant::LenInit => "leninit",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Variant> {
        match tag {
            "plain" => Some(Variant::Plain),
            "lenemb" => Some(Variant::LenEmb),
            "leninit" => Some(Variant::LenInit),
            _ => None,
        }
    }
}

/// Model hyperparameters. `e`/`h` default to 100/200 and `l_types` to 300;
/// desk-scale runs shrink them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hyper {
    pub variant: Variant,
    /// Word embedding dimension (E).
    pub e: usize,
    /// LSTM hidden dimension (H).
    pub h: usize,
    /// Length-embedding dimension (LenEmb only).
    pub d_len: usize,
    /// Number of length-embedding rows; remaining lengths clamp to
    /// `l_types - 1`.
    pub l_types: usize,
    pub v_src: usize,
    pub v_tgt: usize,
}

impl Hyper {
    pub fn new(variant: Variant, e: usize, h: usize, v_src: usize, v_tgt: usize) -> Self {
        Hyper {
            variant,
            e,
            h,
            d_len: 100,
            l_types: 300,
            v_src,
            v_tgt,
        }
    }

    /// Decoder LSTM input width: word embedding + fed-back attentional vector
    /// (+ length embedding for LenEmb).
    pub fn dec_input_dim(&self) -> usize {
        self.e
            + self.h
            + if self.variant == Variant::LenEmb {
                self.d_len
            } else {
                0
            }
    }
}

/// Weights of one LSTM: stacked gate rows in order `[i, f, g, o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmBlock {
    /// `[4H, input_dim]`
    pub w_x: Tensor,
    /// `[4H, H]`
    pub w_h: Tensor,
    /// `[4H]`
    pub b: Tensor,
}

impl LstmBlock {
    fn zeros(input_dim: usize, h: usize) -> Self {
        LstmBlock {
            w_x: Tensor::zeros(vec![4 * h, input_dim]),
            w_h: Tensor::zeros(vec![4 * h, h]),
            b: Tensor::zeros(vec![4 * h]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.dims[1]
    }
}

/// All trainable tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    pub fwd_lstm: LstmBlock,
    pub bwd_lstm: LstmBlock,
    pub dec_lstm: LstmBlock,
    pub w_hs: Tensor,
    pub b_hs: Tensor,
    pub w_so: Tensor,
    pub b_so: Tensor,
    /// Length embedding matrix `[l_types, d_len]`; present iff LenEmb.
    pub w_le: Option<Tensor>,
    /// LenInit vector `[h]` scaled by the desired length; present iff LenInit.
    pub b_c: Option<Tensor>,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `hyper`.
    pub fn zeros(hyper: Hyper) -> Self {
        let (e, h) = (hyper.e, hyper.h);
        ModelParams {
            hyper,
            src_embed: Tensor::zeros(vec![hyper.v_src, e]),
            tgt_embed: Tensor::zeros(vec![hyper.v_tgt, e]),
            fwd_lstm: LstmBlock::zeros(e, h),
            bwd_lstm: LstmBlock::zeros(e, h),
            dec_lstm: LstmBlock::zeros(hyper.dec_input_dim(), h),
            w_hs: Tensor::zeros(vec![h, 2 * h]),
            b_hs: Tensor::zeros(vec![h]),
            w_so: Tensor::zeros(vec![hyper.v_tgt, h]),
            b_so: Tensor::zeros(vec![hyper.v_tgt]),
            w_le: (hyper.variant == Variant::LenEmb)
                .then(|| Tensor::zeros(vec![hyper.l_types, hyper.d_len])),
            b_c: (hyper.variant == Variant::LenInit).then(|| Tensor::zeros(vec![h])),
        }
    }

    /// Random initialization: weights uniform in (-0.1, 0.1), biases zero,
    /// LSTM forget-gate biases 1.0. Deterministic for a fixed seed.
    pub fn new_random(hyper: Hyper, seed: u64) -> Self {
        let mut params = Self::zeros(hyper);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight_names: Vec<String> = params
            .param_names()
            .into_iter()
            .filter(|n| !Self::is_bias(n))
            .collect();
        for name in weight_names {
            let t = params.param_mut(&name).unwrap();
            for v in &mut t.values {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let h = hyper.h;
        for block in [
            &mut params.fwd_lstm,
            &mut params.bwd_lstm,
            &mut params.dec_lstm,
        ] {
            for k in h..2 * h {
                block.b.values[k] = 1.0;
            }
        }
        params
    }

    fn is_bias(name: &str) -> bool {
        // b_c is the LenInit scale vector, not an additive bias; it still
        // starts at zero (its gradient is `length * dL/dc0`, so it trains).
        matches!(name, "b_hs" | "b_so" | "b_c") || name.ends_with(".b")
    }

    /// Canonical parameter order used for initialization, checkpoints, the
    /// optimizer, and gradient checks.
    pub fn canonical_names(variant: Variant) -> Vec<&'static str> {
        let mut names = vec![
            "src_embed",
            "tgt_embed",
            "fwd_lstm.w_x",
            "fwd_lstm.w_h",
            "fwd_lstm.b",
            "bwd_lstm.w_x",
            "bwd_lstm.w_h",
            "bwd_lstm.b",
            "dec_lstm.w_x",
            "dec_lstm.w_h",
            "dec_lstm.b",
            "w_hs",
            "b_hs",
            "w_so",
            "b_so",
        ];
        match variant {
            Variant::Plain => {}
            Variant::LenEmb => names.push("w_le"),
            Variant::LenInit => names.push("b_c"),
        }
        names
    }

    pub fn ensure_variant(&self, expected: Variant) -> Result<(), ModelError> {
        if self.hyper.variant != expected {
            return Err(ModelError::VariantMismatch {
                expected,
                found: self.hyper.variant,
            });
        }
        Ok(())
    }
}

impl ParamCollection for ModelParams {
    fn param_names(&self) -> Vec<String> {
        Self::canonical_names(self.hyper.variant)
            .into_iter()
            .map(str::to_string)
            .collect()
    }

    fn param(&self, name: &str) -> Option<&Tensor> {
        match name {
            "src_embed" => Some(&self.src_embed),
            "tgt_embed" => Some(&self.tgt_embed),
            "fwd_lstm.w_x" => Some(&self.fwd_lstm.w_x),
            "fwd_lstm.w_h" => Some(&self.fwd_lstm.w_h),
            "fwd_lstm.b" => Some(&self.fwd_lstm.b),
            "bwd_lstm.w_x" => Some(&self.bwd_lstm.w_x),
            "bwd_lstm.w_h" => Some(&self.bwd_lstm.w_h),
            "bwd_lstm.b" => Some(&self.bwd_lstm.b),
            "dec_lstm.w_x" => Some(&self.dec_lstm.w_x),
            "dec_lstm.w_h" => Some(&self.dec_lstm.w_h),
            "dec_lstm.b" => Some(&self.dec_lstm.b),
            "w_hs" => Some(&self.w_hs),
            "b_hs" => Some(&self.b_hs),
            "w_so" => Some(&self.w_so),
            "b_so" => Some(&self.b_so),
            "w_le" => self.w_le.as_ref(),
            "b_c" => self.b_c.as_ref(),
            _ => None,
        }
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "src_embed" => Some(&mut self.src_embed),
            "tgt_embed" => Some(&mut self.tgt_embed),
            "fwd_lstm.w_x" => Some(&mut self.fwd_lstm.w_x),
            "fwd_lstm.w_h" => Some(&mut self.fwd_lstm.w_h),
            "fwd_lstm.b" => Some(&mut self.fwd_lstm.b),
            "bwd_lstm.w_x" => Some(&mut self.bwd_lstm.w_x),
            "bwd_lstm.w_h" => Some(&mut self.bwd_lstm.w_h),
            "bwd_lstm.b" => Some(&mut self.bwd_lstm.b),
            "dec_lstm.w_x" => Some(&mut self.dec_lstm.w_x),
            "dec_lstm.w_h" => Some(&mut self.dec_lstm.w_h),
            "dec_lstm.b" => Some(&mut self.dec_lstm.b),
            "w_hs" => Some(&mut self.w_hs),
            "b_hs" => Some(&mut self.b_hs),
            "w_so" => Some(&mut self.w_so),
            "b_so" => Some(&mut self.b_so),
            "w_le" => self.w_le.as_mut(),
            "b_c" => self.b_c.as_mut(),
            _ => None,
        }
    }
}

/// Per-position encoder states on a tape. All vectors have the source length.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub fwd_h: Vec<ValueId>,
    pub fwd_c: Vec<ValueId>,
    pub bwd_h: Vec<ValueId>,
    pub bwd_c: Vec<ValueId>,
    /// `h̄_i = fwd_h_i + bwd_h_i`.
    pub summed: Vec<ValueId>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.summed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summed.is_empty()
    }
}

/// Recurrent decoder state between steps.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: ValueId,
    pub c: ValueId,
    /// Previous attentional vector `s̃` (input feeding); zero at the first
    /// step.
    pub fed: ValueId,
    /// Remaining byte budget (LenEmb only); clamped at zero.
    pub remaining: Option<usize>,
    /// Content words already charged against the budget (determines whether
    /// the next charge pays a separator byte).
    pub charged_words: usize,
}

/// One LSTM step: `i,f,o` sigmoid gates, `g` tanh candidate,
/// `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`. Parameters are registered on the
/// tape under `name.{w_x,w_h,b}`.
pub fn lstm_step(
    tape: &mut Tape,
    block: &LstmBlock,
    name: &str,
    h_prev: ValueId,
    c_prev: ValueId,
    input: ValueId,
) -> Result<(ValueId, ValueId), ModelError> {
    let h = block.hidden_dim();
    let w_x = tape.param(&format!("{name}.w_x"), &block.w_x)?;
    let w_h = tape.param(&format!("{name}.w_h"), &block.w_h)?;
    let b = tape.param(&format!("{name}.b"), &block.b)?;
    let zx = tape.affine(w_x, input, Some(b))?;
    let zh = tape.affine(w_h, h_prev, None)?;
    let z = tape.add(zx, zh)?;
    let zi = tape.slice(z, 0, h)?;
    let zf = tape.slice(z, h, h)?;
    let zg = tape.slice(z, 2 * h, h)?;
    let zo = tape.slice(z, 3 * h, h)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h_out = tape.mul(o, tc)?;
    Ok((h_out, c))
}

fn check_ids(ids: &[usize], size: usize) -> Result<(), ModelError> {
    for &id in ids {
        if id >= size {
            return Err(ModelError::TokenOutOfRange { id, size });
        }
    }
    Ok(())
}

/// Bidirectional encoding: a forward pass left→right and a backward pass
/// right→left, both from zero states, plus the per-position sums.
pub fn encode(
    params: &ModelParams,
    tape: &mut Tape,
    source: &[usize],
) -> Result<EncoderStates, ModelError> {
    if source.is_empty() {
        return Err(ModelError::EmptySource);
    }
    check_ids(source, params.hyper.v_src)?;
    let n = source.len();
    let h = params.hyper.h;
    let src_embed = tape.param("src_embed", &params.src_embed)?;
    let embeds: Vec<ValueId> = source
        .iter()
        .map(|&id| tape.lookup(src_embed, id))
        .collect::<Result<_, _>>()?;
    let zero = tape.leaf(&[h], vec![0.0; h])?;

    let mut fwd_h = Vec::with_capacity(n);
    let mut fwd_c = Vec::with_capacity(n);
    let (mut hh, mut cc) = (zero, zero);
    for &x in &embeds {
        let (nh, nc) = lstm_step(tape, &params.fwd_lstm, "fwd_lstm", hh, cc, x)?;
        fwd_h.push(nh);
        fwd_c.push(nc);
        (hh, cc) = (nh, nc);
    }

    let mut bwd_h = vec![zero; n];
    let mut bwd_c = vec![zero; n];
    let (mut hh, mut cc) = (zero, zero);
    for i in (0..n).rev() {
        let (nh, nc) = lstm_step(tape, &params.bwd_lstm, "bwd_lstm", hh, cc, embeds[i])?;
        bwd_h[i] = nh;
        bwd_c[i] = nc;
        (hh, cc) = (nh, nc);
    }

    let mut summed = Vec::with_capacity(n);
    for i in 0..n {
        summed.push(tape.add(fwd_h[i], bwd_h[i])?);
    }
    Ok(EncoderStates {
        fwd_h,
        fwd_c,
        bwd_h,
        bwd_c,
        summed,
    })
}

/// Initial decoder state: `h0` is the backward encoder state at position one
/// in all variants; `c0` likewise for Plain/LenEmb, while LenInit sets
/// `c0 = b_c * length`. LenEmb seeds the remaining-byte counter with the
/// desired length.
pub fn init_decoder_state(
    params: &ModelParams,
    tape: &mut Tape,
    enc: &EncoderStates,
    desired_length: Option<usize>,
) -> Result<DecoderState, ModelError> {
    let h = params.hyper.h;
    let fed = tape.leaf(&[h], vec![0.0; h])?;
    let variant = params.hyper.variant;
    let (c, remaining) = match variant {
        Variant::Plain => (enc.bwd_c[0], None),
        Variant::LenEmb => {
            let desired =
                desired_length.ok_or(ModelError::MissingDesiredLength { variant })?;
            (enc.bwd_c[0], Some(desired))
        }
        Variant::LenInit => {
            let desired =
                desired_length.ok_or(ModelError::MissingDesiredLength { variant })?;
            let b_c = tape.param("b_c", params.b_c.as_ref().expect("LenInit has b_c"))?;
            (tape.scale(b_c, desired as f64), None)
        }
    };
    Ok(DecoderState {
        h: enc.bwd_h[0],
        c,
        fed,
        remaining,
        charged_words: 0,
    })
}

/// Global attention: weights are a softmax over dot products of the decoder
/// state with each summarized encoder vector; the context is their weighted
/// sum. Returns `(d_t, a_t)`.
pub fn attend(
    tape: &mut Tape,
    h_t: ValueId,
    enc: &EncoderStates,
) -> Result<(ValueId, ValueId), ModelError> {
    let scores: Vec<ValueId> = enc
        .summed
        .iter()
        .map(|&hb| tape.dot(h_t, hb))
        .collect::<Result<_, _>>()?;
    let logits = tape.concat(&scores)?;
    let a = tape.softmax(logits)?;
    let mut weighted = Vec::with_capacity(enc.len());
    for (i, &hb) in enc.summed.iter().enumerate() {
        let ai = tape.pick(a, i)?;
        weighted.push(tape.mul_scalar(hb, ai)?);
    }
    let d = tape.add_many(&weighted)?;
    Ok((d, a))
}

/// Length-embedding lookup with the index clamped to `[0, l_types - 1]`.
/// LenEmb models only.
pub fn length_embedding(
    params: &ModelParams,
    tape: &mut Tape,
    remaining: usize,
) -> Result<ValueId, ModelError> {
    params.ensure_variant(Variant::LenEmb)?;
    let w_le = tape.param("w_le", params.w_le.as_ref().expect("LenEmb has w_le"))?;
    let row = remaining.min(params.hyper.l_types - 1);
    Ok(tape.lookup(w_le, row)?)
}

/// The remaining-length update `l_{t+1} = max(0, l_t - byte(y_t))`, where a
/// word's byte cost includes one separator byte unless it is the first word.
pub fn remaining_length_update(l_t: usize, emitted: &str, is_first_word: bool) -> usize {
    remaining_after_cost(l_t, emitted.len(), is_first_word)
}

fn remaining_after_cost(l_t: usize, token_bytes: usize, is_first_word: bool) -> usize {
    l_t.saturating_sub(token_bytes + usize::from(!is_first_word))
}

/// Everything one decoder step produces.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Output distribution over the target vocabulary (sums to one).
    pub dist: ValueId,
    /// Pre-softmax logits, exposed so decoding-time masking can re-normalize.
    pub logits: ValueId,
    /// State for the next step (with input feeding and, for LenEmb, the
    /// remaining counter updated by the token just consumed).
    pub next_state: DecoderState,
    pub s_tilde: ValueId,
}

/// One decoder step conditioned on the previously emitted token.
///
/// For LenEmb the remaining counter is charged for `prev_token` on entry
/// (BOS costs nothing) and the embedding of the *post-charge* value is part
/// of the LSTM input, so the counter seen at step `t` is
/// `desired − byte(y_1..y_{t−1})`.
///
/// `tgt_token_bytes` maps each target vocabulary id to its rendered UTF-8
/// byte length (see [`Vocabulary::token_byte_lens`]).
pub fn decoder_step(
    params: &ModelParams,
    tape: &mut Tape,
    state: &DecoderState,
    prev_token: usize,
    enc: &EncoderStates,
    tgt_token_bytes: &[usize],
) -> Result<StepOutput, ModelError> {
    let hyper = &params.hyper;
    if prev_token >= hyper.v_tgt {
        return Err(ModelError::TokenOutOfRange {
            id: prev_token,
            size: hyper.v_tgt,
        });
    }
    let (remaining, charged_words) = if hyper.variant == Variant::LenEmb {
        let l_t = state.remaining.ok_or(ModelError::MissingDesiredLength {
            variant: hyper.variant,
        })?;
        if prev_token == BOS {
            (Some(l_t), state.charged_words)
        } else {
            let is_first = state.charged_words == 0;
            let l_next = remaining_after_cost(l_t, tgt_token_bytes[prev_token], is_first);
            (Some(l_next), state.charged_words + 1)
        }
    } else {
        (None, state.charged_words + usize::from(prev_token != BOS))
    };

    let tgt_embed = tape.param("tgt_embed", &params.tgt_embed)?;
    let embed = tape.lookup(tgt_embed, prev_token)?;
    let mut parts = vec![embed, state.fed];
    if hyper.variant == Variant::LenEmb {
        parts.push(length_embedding(params, tape, remaining.unwrap())?);
    }
    let x = tape.concat(&parts)?;
    let (h_t, c_t) = lstm_step(tape, &params.dec_lstm, "dec_lstm", state.h, state.c, x)?;
    let (d_t, _a_t) = attend(tape, h_t, enc)?;
    let w_hs = tape.param("w_hs", &params.w_hs)?;
    let b_hs = tape.param("b_hs", &params.b_hs)?;
    let hd = tape.concat(&[h_t, d_t])?;
    let pre = tape.affine(w_hs, hd, Some(b_hs))?;
    let s_tilde = tape.tanh(pre);
    let w_so = tape.param("w_so", &params.w_so)?;
    let b_so = tape.param("b_so", &params.b_so)?;
    let logits = tape.affine(w_so, s_tilde, Some(b_so))?;
    let dist = tape.softmax(logits)?;
    Ok(StepOutput {
        dist,
        logits,
        next_state: DecoderState {
            h: h_t,
            c: c_t,
            fed: s_tilde,
            remaining,
            charged_words,
        },
        s_tilde,
    })
}

/// Teacher-forced log-probability of `target` (which should end with EOS)
/// given `source`: `Σ_t log p(y_t | y_<t, x)`. Returns the scalar tape node.
/// Length-conditioned variants take the reference byte length as
/// `desired_length`.
pub fn sequence_logprob(
    params: &ModelParams,
    tape: &mut Tape,
    source: &[usize],
    target: &[usize],
    desired_length: Option<usize>,
    tgt_token_bytes: &[usize],
) -> Result<ValueId, ModelError> {
    if target.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    check_ids(target, params.hyper.v_tgt)?;
    let enc = encode(params, tape, source)?;
    let mut state = init_decoder_state(params, tape, &enc, desired_length)?;
    let mut prev = BOS;
    let mut step_logprobs = Vec::with_capacity(target.len());
    for &y in target {
        let out = decoder_step(params, tape, &state, prev, &enc, tgt_token_bytes)?;
        let py = tape.pick(out.dist, y)?;
        step_logprobs.push(tape.ln(py)?);
        state = out.next_state;
        prev = y;
    }
    Ok(tape.add_many(&step_logprobs)?)
}

// ---------------------------------------------------------------------------
// Checkpoint persistence
// ---------------------------------------------------------------------------

/// Writes the checkpoint: magic `LENCON1\n`, a UTF-8 header line of
/// `key=value` pairs (`variant`, `E`, `H`, `D_len`, `L_types`, `V_src`,
/// `V_tgt`), then one record per parameter in canonical order: name length
/// (u32 LE), name bytes, rank (u32 LE), dims (u32 LE each), values (f64 LE,
/// row-major).
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let io_err = |source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    };
    let hyper = &params.hyper;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let header = format!(
        "variant={} E={} H={} D_len={} L_types={} V_src={} V_tgt={}\n",
        hyper.variant.tag(),
        hyper.e,
        hyper.h,
        hyper.d_len,
        hyper.l_types,
        hyper.v_src,
        hyper.v_tgt
    );
    out.extend_from_slice(header.as_bytes());
    for name in ModelParams::canonical_names(hyper.variant) {
        let t = params.param(name).expect("canonical name present");
        write_record(&mut out, name, t);
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&out).map_err(io_err)?;
    Ok(())
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads a checkpoint written by [`save_checkpoint`], validating magic,
/// header, record names, and record dimensions against the header.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let io_err = |source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    };
    let path_str = || path.display().to_string();
    let mut f = fs::File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(io_err)?;

    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
    {
        return Err(ModelError::BadMagic { path: path_str() });
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::Truncated { path: path_str() })?;
    let header = std::str::from_utf8(&rest[..nl]).map_err(|_| ModelError::BadHeader {
        path: path_str(),
        reason: "header is not UTF-8".into(),
    })?;
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| ModelError::BadHeader {
            path: path_str(),
            reason: format!("malformed field {kv:?}"),
        })?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields.get(k).copied().ok_or_else(|| ModelError::BadHeader {
            path: path_str(),
            reason: format!("missing field {k}"),
        })
    };
    let parse_usize = |k: &str| -> Result<usize, ModelError> {
        get(k)?.parse().map_err(|_| ModelError::BadHeader {
            path: path_str(),
            reason: format!("field {k} is not an integer"),
        })
    };
    let variant = Variant::from_tag(get("variant")?).ok_or_else(|| ModelError::BadHeader {
        path: path_str(),
        reason: format!("unknown variant {:?}", fields["variant"]),
    })?;
    let hyper = Hyper {
        variant,
        e: parse_usize("E")?,
        h: parse_usize("H")?,
        d_len: parse_usize("D_len")?,
        l_types: parse_usize("L_types")?,
        v_src: parse_usize("V_src")?,
        v_tgt: parse_usize("V_tgt")?,
    };

    let mut params = ModelParams::zeros(hyper);
    let mut filled: Vec<String> = Vec::new();
    let mut cursor = &rest[nl + 1..];
    let take = |cursor: &mut &[u8], n: usize| -> Result<Vec<u8>, ModelError> {
        if cursor.len() < n {
            return Err(ModelError::Truncated { path: path_str() });
        }
        let (head, tail) = cursor.split_at(n);
        *cursor = tail;
        Ok(head.to_vec())
    };
    let take_u32 = |cursor: &mut &[u8]| -> Result<u32, ModelError> {
        let b = take(cursor, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    while !cursor.is_empty() {
        let name_len = take_u32(&mut cursor)? as usize;
        let name_bytes = take(&mut cursor, name_len)?;
        let name = String::from_utf8(name_bytes).map_err(|_| ModelError::BadHeader {
            path: path_str(),
            reason: "record name is not UTF-8".into(),
        })?;
        let rank = take_u32(&mut cursor)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(take_u32(&mut cursor)? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = take(&mut cursor, numel * 8)?;
        let expected = params
            .param(&name)
            .ok_or_else(|| ModelError::UnknownRecord(name.clone()))?;
        if expected.dims != dims {
            return Err(ModelError::RecordDimMismatch {
                name,
                expected: expected.dims.clone(),
                found: dims,
            });
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.param_mut(&name).unwrap().values = values;
        filled.push(name);
    }
    for name in ModelParams::canonical_names(variant) {
        if !filled.iter().any(|f| f == name) {
            return Err(ModelError::MissingRecord(name.to_string()));
        }
    }
    Ok(params)
}

/// Vocabularies stored next to a checkpoint so decoding can reconstruct the
/// token maps.
#[derive(Debug, Serialize, Deserialize)]
struct VocabSidecar {
    src: Vec<String>,
    tgt: Vec<String>,
}

/// `<checkpoint>.vocab`
pub fn vocab_sidecar_path(ckpt: &Path) -> PathBuf {
    PathBuf::from(format!("{}.vocab", ckpt.display()))
}

pub fn save_vocab_sidecar(
    ckpt: &Path,
    src: &Vocabulary,
    tgt: &Vocabulary,
) -> Result<(), ModelError> {
    let path = vocab_sidecar_path(ckpt);
    let sidecar = VocabSidecar {
        src: src.tokens().to_vec(),
        tgt: tgt.tokens().to_vec(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("vocab serializes");
    fs::write(&path, json).map_err(|e| ModelError::VocabSidecar {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_vocab_sidecar(ckpt: &Path) -> Result<(Vocabulary, Vocabulary), ModelError> {
    let path = vocab_sidecar_path(ckpt);
    let text = fs::read_to_string(&path).map_err(|e| ModelError::VocabSidecar {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let sidecar: VocabSidecar =
        serde_json::from_str(&text).map_err(|e| ModelError::VocabSidecar {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    Ok((
        Vocabulary::from_tokens(sidecar.src),
        Vocabulary::from_tokens(sidecar.tgt),
    ))
}
