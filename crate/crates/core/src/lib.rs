//! A desk-scale laboratory for length-controllable neural encoder-decoders.
//!
//! The crate implements an attentional BiLSTM encoder-decoder with four ways of
//! controlling the byte length of its output:
//!
//! * **fixLen** — decoding-time control: the EOS tag is forbidden during beam
//!   search and the hypothesis is truncated at the desired byte length by
//!   replacing the overflowing word with EOS (and the EOS score).
//! * **fixRng** — decoding-time control: hypotheses that emit EOS before a
//!   minimum byte length are discarded; hypotheses that grow past a maximum are
//!   force-finalized by EOS replacement.
//! * **LenEmb** — learning-based control: an embedding of the *remaining* byte
//!   budget is fed to the decoder LSTM at every step.
//! * **LenInit** — learning-based control: the decoder's initial memory cell is
//!   set to `b_c * length`.
//!
//! Everything is built on a minimal reverse-mode autodiff tape ([`numerics`]),
//! trained with Adam ([`training`]), exercised on a synthetic prefix-truncation
//! corpus ([`data`]), and scored with ROUGE plus permutation significance tests
//! ([`evaluation`]).

pub mod data;
pub mod decoding;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod training;
