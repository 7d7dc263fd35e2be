use std::fs;

use anyhow::{bail, Context};
use lencon_core::data::{byte_length, load_corpus, Vocabulary, UNK_TOKEN};
use lencon_core::decoding::{
    beam_search, decode_learned, DecodeConstraint, DecodeResult, DEFAULT_BEAM, FIXRNG_BEAM,
};
use lencon_core::model::{load_checkpoint, load_vocab_sidecar};
use lencon_core::numerics::Tape;
use rayon::prelude::*;

use crate::args::DecodeArgs;
use crate::manifest::{path_with_suffix, write_manifest};

enum Plan {
    Constraint(DecodeConstraint),
    Learned { desired: usize, hard: bool },
}

pub fn run(mut args: DecodeArgs) -> anyhow::Result<()> {
    let params = load_checkpoint(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let (src_vocab, tgt_vocab) = load_vocab_sidecar(&args.ckpt)?;
    let tgt_bytes = tgt_vocab.token_byte_lens();
    let loaded = load_corpus(&args.input)?;
    let sources: Vec<Vec<usize>> = loaded
        .pairs
        .iter()
        .map(|p| src_vocab.encode_all(&p.source))
        .collect();

    let beam = args.beam.unwrap_or(match (args.method.as_str(), args.hard) {
        ("fixrng", _) | ("learned", true) => FIXRNG_BEAM,
        _ => DEFAULT_BEAM,
    });
    args.beam = Some(beam);

    let plan = match args.method.as_str() {
        "free" => {
            let mut c = DecodeConstraint::free(beam);
            if let Some(l) = args.length {
                c = c.with_desired(l);
            }
            Plan::Constraint(c)
        }
        "fixlen" => {
            let desired = args.length.context("--method fixlen requires --length")?;
            Plan::Constraint(DecodeConstraint::fix_len(desired, beam))
        }
        "fixrng" => {
            let mut c = DecodeConstraint::fix_rng(args.min.unwrap_or(0), args.max, beam);
            if let Some(l) = args.length {
                c = c.with_desired(l);
            }
            Plan::Constraint(c)
        }
        "learned" => {
            let desired = args.length.context("--method learned requires --length")?;
            if args.max_steps.is_some() {
                bail!("--max-steps is not supported with --method learned");
            }
            Plan::Learned {
                desired,
                hard: args.hard,
            }
        }
        other => bail!("unknown method {other:?} (expected free, fixlen, fixrng, or learned)"),
    };
    let plan = match plan {
        Plan::Constraint(mut c) => {
            if let Some(steps) = args.max_steps {
                c = c.with_max_steps(steps);
            }
            c.validate()?;
            Plan::Constraint(c)
        }
        learned => learned,
    };

    // The desired-length column: the byte target when one exists (fixlen and
    // learned use --length, fixrng reports its upper bound), else "free".
    let desired_col = match &plan {
        Plan::Learned { desired, .. } => desired.to_string(),
        Plan::Constraint(c) => c
            .desired
            .or(c.max_bytes)
            .map(|v| v.to_string())
            .unwrap_or_else(|| "free".to_string()),
    };

    let decode_one = |(index, source): (usize, &Vec<usize>)| -> anyhow::Result<String> {
        let mut tape = Tape::new();
        let result: DecodeResult = match &plan {
            Plan::Constraint(c) => beam_search(&params, &mut tape, source, c, &tgt_bytes),
            Plan::Learned { desired, hard } => decode_learned(
                &params,
                &mut tape,
                source,
                *desired,
                *hard,
                beam,
                &tgt_bytes,
            ),
        }
        .with_context(|| format!("decoding input line {}", index + 1))?;
        Ok(render_line(&desired_col, result.best(), &tgt_vocab))
    };

    let lines: Vec<String> = if args.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.workers)
            .build()
            .context("building worker pool")?;
        pool.install(|| {
            sources
                .par_iter()
                .enumerate()
                .map(decode_one)
                .collect::<anyhow::Result<_>>()
        })?
    } else {
        sources
            .iter()
            .enumerate()
            .map(decode_one)
            .collect::<anyhow::Result<_>>()?
    };

    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    write_manifest(
        &path_with_suffix(&args.out, ".manifest.json"),
        "decode",
        &args,
    )?;

    println!("{}", args.out.display());
    Ok(())
}

fn render_line(
    desired_col: &str,
    best: &lencon_core::decoding::BeamHypothesis,
    tgt_vocab: &Vocabulary,
) -> String {
    let words: Vec<&str> = best
        .tokens
        .iter()
        .map(|&id| tgt_vocab.decode(id).unwrap_or(UNK_TOKEN))
        .collect();
    format!(
        "{desired_col}\t{}\t{:.4}\t{}",
        byte_length(&words),
        best.logprob,
        words.join(" ")
    )
}
