use std::fs;

use anyhow::{bail, Context};
use lencon_core::data::{build_vocab, load_corpus};
use lencon_core::model::{
    load_checkpoint, load_vocab_sidecar, save_checkpoint, save_vocab_sidecar, Hyper, ModelParams,
    Variant,
};
use lencon_core::training::{
    encode_corpus, load_opt_sidecar, save_opt_sidecar, train, AdamState, TrainConfig,
};

use crate::args::TrainArgs;
use crate::manifest::{path_with_suffix, write_manifest};

pub fn run(mut args: TrainArgs) -> anyhow::Result<()> {
    let variant = Variant::from_tag(&args.variant).with_context(|| {
        format!(
            "unknown variant {:?} (expected plain, lenemb, or leninit)",
            args.variant
        )
    })?;

    let loaded = load_corpus(&args.corpus)?;
    let (src_vocab, tgt_vocab) = build_vocab(&loaded.pairs, args.src_vocab, args.tgt_vocab)?;
    let corpus = encode_corpus(&loaded.pairs, &src_vocab, &tgt_vocab);
    let tgt_bytes = tgt_vocab.token_byte_lens();

    let hyper = Hyper {
        variant,
        e: args.embed_dim,
        h: args.hidden_dim,
        d_len: args.len_embed_dim,
        l_types: args.len_types,
        v_src: src_vocab.len(),
        v_tgt: tgt_vocab.len(),
    };

    let (mut params, mut opt) = match &args.resume {
        Some(ckpt) => {
            let params = load_checkpoint(ckpt)
                .with_context(|| format!("resuming from {}", ckpt.display()))?;
            if params.hyper != hyper {
                bail!(
                    "checkpoint configuration {:?} does not match the requested \
                     configuration {:?}",
                    params.hyper,
                    hyper
                );
            }
            let (ckpt_src, ckpt_tgt) = load_vocab_sidecar(ckpt)?;
            if ckpt_src != src_vocab || ckpt_tgt != tgt_vocab {
                bail!("checkpoint vocabulary does not match the corpus vocabulary");
            }
            let opt = load_opt_sidecar(ckpt)?;
            (params, opt)
        }
        None => (ModelParams::new_random(hyper, args.seed), AdamState::new()),
    };

    let config = TrainConfig {
        batch_size: args.batch_size,
        alpha: args.alpha,
        beta1: args.beta1,
        beta2: args.beta2,
        eps: args.eps,
        sample_pool: args.sample_pool,
        regroup_every: args.regroup_every,
        max_updates: args.updates,
        clip_norm: args.clip,
        seed: args.seed,
    };

    let loss_csv_path = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| path_with_suffix(&args.out, ".loss.csv"));
    args.loss_csv = Some(loss_csv_path.clone());

    // Loss rows carry the global update counter so resumed runs continue the
    // numbering where the previous invocation stopped.
    let start_step = opt.step;
    let mut csv = String::from("update,loss\n");
    let mut checkpoint_err: Option<anyhow::Error> = None;
    train(
        &mut params,
        &corpus,
        &tgt_bytes,
        &config,
        &mut opt,
        |update, loss, p, o| {
            let global = start_step + update;
            csv.push_str(&format!("{global},{loss}\n"));
            if args.log_every > 0 && update % args.log_every as u64 == 0 {
                eprintln!("update {global}: batch loss {loss:.4}");
            }
            if args.checkpoint_every > 0
                && update as usize % args.checkpoint_every == 0
                && checkpoint_err.is_none()
            {
                checkpoint_err = save_snapshot(&args.out, p, &src_vocab, &tgt_vocab, o).err();
            }
        },
    )?;
    if let Some(err) = checkpoint_err {
        return Err(err.context("writing periodic checkpoint"));
    }

    save_snapshot(&args.out, &params, &src_vocab, &tgt_vocab, &opt)?;
    fs::write(&loss_csv_path, csv)
        .with_context(|| format!("writing {}", loss_csv_path.display()))?;
    write_manifest(&path_with_suffix(&args.out, ".manifest.json"), "train", &args)?;

    println!("{}", args.out.display());
    Ok(())
}

fn save_snapshot(
    out: &std::path::Path,
    params: &ModelParams,
    src_vocab: &lencon_core::data::Vocabulary,
    tgt_vocab: &lencon_core::data::Vocabulary,
    opt: &AdamState,
) -> anyhow::Result<()> {
    save_checkpoint(params, out).with_context(|| format!("writing {}", out.display()))?;
    save_vocab_sidecar(out, src_vocab, tgt_vocab)?;
    save_opt_sidecar(out, opt)?;
    Ok(())
}
