//! Maximum-likelihood training: negative-log-likelihood batch loss, Adam,
//! global-norm gradient clipping, and the length-grouped batch shuffling
//! scheme (sample a pool, group examples sharing a source length into
//! batches, shuffle the groups, resample periodically).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{SentenceSummaryPair, Vocabulary, EOS};
use crate::model::{sequence_logprob, ModelError, ModelParams};
use crate::numerics::{GradMap, NumericsError, ParamCollection, Tape};

pub const OPT_MAGIC: &[u8; 8] = b"LENOPT1\n";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite loss {loss} on a batch of {batch_size} (update aborted)")]
    NonFiniteLoss { loss: f64, batch_size: usize },
    #[error("optimizer sidecar error at {path}: {reason}")]
    OptSidecar { path: String, reason: String },
}

/// Training hyperparameters. Defaults: batch 80; Adam α=0.001, β1=0.9,
/// β2=0.999, ε=1e-8; pool of 800000 resampled every 10000 updates; clip 5.0.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Examples sampled per shuffling cycle; scaled down proportionally when
    /// the corpus is smaller.
    pub sample_pool: usize,
    /// Updates between resampling cycles; scales with the pool.
    pub regroup_every: usize,
    pub max_updates: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 80,
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            sample_pool: 800_000,
            regroup_every: 10_000,
            max_updates: 1000,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(TrainError::BadConfig(format!(
                    "{name} must lie in (0,1), got {v}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.sample_pool == 0 || self.regroup_every == 0 {
            return Err(TrainError::BadConfig(
                "sample_pool and regroup_every must be positive".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }

    /// Pool size actually used: no larger than the corpus.
    pub fn effective_pool(&self, corpus_len: usize) -> usize {
        self.sample_pool.min(corpus_len)
    }

    /// Resampling period scaled by the same ratio as the pool (at least 1).
    pub fn effective_regroup(&self, corpus_len: usize) -> usize {
        let pool = self.effective_pool(corpus_len);
        ((self.regroup_every as u128 * pool as u128) / self.sample_pool as u128).max(1) as usize
    }
}

/// One training example with ids: `target` ends with EOS, `desired` is the
/// reference summary's rendered byte length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub desired: usize,
}

/// Encodes string pairs through the vocabularies, appending EOS to targets.
pub fn encode_corpus(
    pairs: &[SentenceSummaryPair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| {
            let mut target = tgt_vocab.encode_all(&p.target);
            target.push(EOS);
            EncodedPair {
                source: src_vocab.encode_all(&p.source),
                target,
                desired: p.target_bytes,
            }
        })
        .collect()
}

/// Mean negative log-likelihood over the batch and its parameter gradients,
/// computed on a single tape. Length-conditioned variants consume each
/// pair's `desired`; the plain variant ignores it.
pub fn nll_loss(
    params: &ModelParams,
    batch: &[EncodedPair],
    tgt_token_bytes: &[usize],
) -> Result<(f64, GradMap), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let mut logprobs = Vec::with_capacity(batch.len());
    for pair in batch {
        logprobs.push(sequence_logprob(
            params,
            &mut tape,
            &pair.source,
            &pair.target,
            Some(pair.desired),
            tgt_token_bytes,
        )?);
    }
    let total = tape.add_many(&logprobs)?;
    let loss = tape.scale(total, -1.0 / batch.len() as f64);
    let loss_value = tape.value(loss)[0];
    if !loss_value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            loss: loss_value,
            batch_size: batch.len(),
        });
    }
    let grads = tape.backward(loss)?;
    Ok((loss_value, tape.param_grads(&grads)))
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Adam's per-parameter moment estimates and its step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update with bias correction. The step counter increments exactly
/// once per call; moments spring into existence as zeros on first use.
pub fn adam_step<P: ParamCollection>(
    params: &mut P,
    grads: &GradMap,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for (name, g) in grads {
        let tensor = params
            .param_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for k in 0..g.len() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            tensor.values[k] -= config.alpha * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Cycling stream of source-length-homogeneous batches.
///
/// Each cycle samples `effective_pool` examples (without replacement when the
/// corpus is at least pool-sized, with replacement otherwise), buckets them
/// by exact source token length, chunks each bucket into `batch_size` groups,
/// and shuffles the full groups; leftover partial groups come last. The whole
/// stream is a deterministic function of (corpus, config).
pub struct BatchStream<'c> {
    corpus: &'c [EncodedPair],
    config: TrainConfig,
    rng: ChaCha8Rng,
    groups: Vec<Vec<usize>>,
    position: usize,
    emitted_this_cycle: usize,
}

/// See [`BatchStream`].
pub fn make_batches<'c>(
    corpus: &'c [EncodedPair],
    config: &TrainConfig,
) -> Result<BatchStream<'c>, TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    Ok(BatchStream {
        corpus,
        config: config.clone(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        groups: Vec::new(),
        position: 0,
        emitted_this_cycle: 0,
    })
}

impl<'c> BatchStream<'c> {
    fn refill(&mut self) {
        let pool_size = self.config.effective_pool(self.corpus.len());
        let mut picked: Vec<usize> = if self.corpus.len() > pool_size {
            rand::seq::index::sample(&mut self.rng, self.corpus.len(), pool_size).into_vec()
        } else if self.corpus.len() == pool_size {
            let mut all: Vec<usize> = (0..self.corpus.len()).collect();
            all.shuffle(&mut self.rng);
            all
        } else {
            unreachable!("pool never exceeds the corpus")
        };
        // Bucket by exact source token length, preserving sampled order.
        let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for idx in picked.drain(..) {
            buckets
                .entry(self.corpus[idx].source.len())
                .or_default()
                .push(idx);
        }
        let mut full: Vec<Vec<usize>> = Vec::new();
        let mut partial: Vec<Vec<usize>> = Vec::new();
        for bucket in buckets.values() {
            for chunk in bucket.chunks(self.config.batch_size) {
                if chunk.len() == self.config.batch_size {
                    full.push(chunk.to_vec());
                } else {
                    partial.push(chunk.to_vec());
                }
            }
        }
        full.shuffle(&mut self.rng);
        full.extend(partial);
        self.groups = full;
        self.position = 0;
        self.emitted_this_cycle = 0;
    }

    /// Next batch of examples (cloned out of the corpus).
    pub fn next_batch(&mut self) -> Vec<EncodedPair> {
        // A cycle ends when its groups are exhausted. Periodic resampling
        // can additionally cut a cycle short, but only when the pool is a
        // proper subsample of the corpus; when the pool IS the corpus, early
        // resampling would just re-emit the head of the group order (partial
        // groups sort deterministically) and starve the tail.
        let pool = self.config.effective_pool(self.corpus.len());
        let subsampled = self.corpus.len() > pool;
        let regroup = self.config.effective_regroup(self.corpus.len());
        if self.position >= self.groups.len()
            || (subsampled && self.emitted_this_cycle >= regroup)
        {
            self.refill();
        }
        let group = &self.groups[self.position];
        self.position += 1;
        self.emitted_this_cycle += 1;
        group.iter().map(|&i| self.corpus[i].clone()).collect()
    }
}

/// Loss history of a training run: `(update, loss)` with 1-based updates.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub loss_curve: Vec<(u64, f64)>,
}

impl TrainReport {
    /// UTF-8 CSV rendering: header `update,loss`, one row per update.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("update,loss\n");
        for (update, loss) in &self.loss_curve {
            out.push_str(&format!("{update},{loss}\n"));
        }
        out
    }
}

/// Runs `config.max_updates` optimization steps over the batch stream,
/// mutating `params` and `opt` in place. `on_update` observes every update
/// as it completes, with the post-update parameters and optimizer state (so
/// callers can stream a loss curve or write periodic checkpoints). Resuming
/// from a checkpoint restarts the batch stream from the configured seed;
/// parameters and optimizer moments carry over.
pub fn train(
    params: &mut ModelParams,
    corpus: &[EncodedPair],
    tgt_token_bytes: &[usize],
    config: &TrainConfig,
    opt: &mut AdamState,
    mut on_update: impl FnMut(u64, f64, &ModelParams, &AdamState),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let mut stream = make_batches(corpus, config)?;
    let mut report = TrainReport::default();
    for update in 1..=config.max_updates as u64 {
        let batch = stream.next_batch();
        let (loss, mut grads) = nll_loss(params, &batch, tgt_token_bytes)?;
        clip_global_norm(&mut grads, config.clip_norm);
        adam_step(params, &grads, opt, config)?;
        report.loss_curve.push((update, loss));
        on_update(update, loss, params, opt);
    }
    Ok(report)
}

/// Mean loss per target token (EOS included) over a corpus slice, for
/// convergence checks independent of batch composition.
pub fn per_token_loss(
    params: &ModelParams,
    corpus: &[EncodedPair],
    tgt_token_bytes: &[usize],
) -> Result<f64, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for pair in corpus {
        let mut tape = Tape::new();
        let lp = sequence_logprob(
            params,
            &mut tape,
            &pair.source,
            &pair.target,
            Some(pair.desired),
            tgt_token_bytes,
        )?;
        total_nll -= tape.value(lp)[0];
        total_tokens += pair.target.len();
    }
    Ok(total_nll / total_tokens as f64)
}

// ---------------------------------------------------------------------------
// Optimizer sidecar
// ---------------------------------------------------------------------------

/// `<checkpoint>.opt`
pub fn opt_sidecar_path(ckpt: &Path) -> PathBuf {
    PathBuf::from(format!("{}.opt", ckpt.display()))
}

/// Writes Adam state next to a checkpoint: magic `LENOPT1\n`, a `step=N`
/// header line, then `m.<param>` and `v.<param>` records (u32 LE name
/// length, name, u64 LE value count, f64 LE values).
pub fn save_opt_sidecar(ckpt: &Path, state: &AdamState) -> Result<(), TrainError> {
    let path = opt_sidecar_path(ckpt);
    let err = |reason: String| TrainError::OptSidecar {
        path: path.display().to_string(),
        reason,
    };
    let mut out = Vec::new();
    out.extend_from_slice(OPT_MAGIC);
    out.extend_from_slice(format!("step={}\n", state.step).as_bytes());
    for (prefix, map) in [("m", &state.m), ("v", &state.v)] {
        for (name, values) in map {
            let full = format!("{prefix}.{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(&path).map_err(|e| err(e.to_string()))?;
    f.write_all(&out).map_err(|e| err(e.to_string()))?;
    Ok(())
}

pub fn load_opt_sidecar(ckpt: &Path) -> Result<AdamState, TrainError> {
    let path = opt_sidecar_path(ckpt);
    let err = |reason: &str| TrainError::OptSidecar {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut f = fs::File::open(&path).map_err(|e| err(&e.to_string()))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| err(&e.to_string()))?;
    if bytes.len() < OPT_MAGIC.len() || &bytes[..OPT_MAGIC.len()] != OPT_MAGIC {
        return Err(err("bad magic"));
    }
    let rest = &bytes[OPT_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err("truncated header"))?;
    let header = std::str::from_utf8(&rest[..nl]).map_err(|_| err("header not UTF-8"))?;
    let step: u64 = header
        .strip_prefix("step=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err("malformed step header"))?;
    let mut state = AdamState {
        step,
        ..AdamState::default()
    };
    let mut cursor = &rest[nl + 1..];
    while !cursor.is_empty() {
        if cursor.len() < 4 {
            return Err(err("truncated record"));
        }
        let name_len = u32::from_le_bytes(cursor[..4].try_into().unwrap()) as usize;
        cursor = &cursor[4..];
        if cursor.len() < name_len + 8 {
            return Err(err("truncated record"));
        }
        let full = std::str::from_utf8(&cursor[..name_len])
            .map_err(|_| err("record name not UTF-8"))?
            .to_string();
        cursor = &cursor[name_len..];
        let count = u64::from_le_bytes(cursor[..8].try_into().unwrap()) as usize;
        cursor = &cursor[8..];
        if cursor.len() < count * 8 {
            return Err(err("truncated record"));
        }
        let values: Vec<f64> = cursor[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor = &cursor[count * 8..];
        let (prefix, name) = full
            .split_once('.')
            .ok_or_else(|| err("record name missing prefix"))?;
        match prefix {
            "m" => state.m.insert(name.to_string(), values),
            "v" => state.v.insert(name.to_string(), values),
            _ => return Err(err("unknown record prefix")),
        };
    }
    Ok(state)
}
