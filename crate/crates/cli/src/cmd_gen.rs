use std::fs;

use anyhow::{bail, Context};
use lencon_core::data::{gen_toy_corpus, length_stats, save_corpus, ToyCorpusConfig};

use crate::args::GenCorpusArgs;
use crate::manifest::write_manifest;

pub fn run(mut args: GenCorpusArgs) -> anyhow::Result<()> {
    if args.size == 0 {
        bail!("--size must be positive");
    }
    let valid_size = args.valid_size.unwrap_or_else(|| (args.size / 10).max(1));
    let test_size = args.test_size.unwrap_or_else(|| (args.size / 10).max(1));
    args.valid_size = Some(valid_size);
    args.test_size = Some(test_size);

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;

    let gen_split = |name: &str, size: usize, seed: u64| -> anyhow::Result<Vec<usize>> {
        let config = ToyCorpusConfig {
            vocab_size: args.vocab_size,
            source_len_range: (args.source_min, args.source_max),
            budget_range: (args.budget_min, args.budget_max),
            size,
            seed,
        };
        let (pairs, _) = gen_toy_corpus(&config).with_context(|| format!("generating {name}"))?;
        let path = args.out.join(format!("{name}.tsv"));
        save_corpus(&pairs, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(pairs.iter().map(|p| p.target_bytes).collect())
    };

    // Distinct derived seeds keep the splits disjoint in content while the
    // whole corpus stays a function of the one --seed flag.
    let train_lengths = gen_split("train", args.size, args.seed)?;
    gen_split("valid", valid_size, args.seed.wrapping_add(1))?;
    gen_split("test", test_size, args.seed.wrapping_add(2))?;

    let stats = length_stats(&train_lengths, args.bin_width)?;
    fs::write(args.out.join("stats.csv"), stats.to_csv()).context("writing stats.csv")?;
    write_manifest(&args.out.join("manifest.json"), "gen-corpus", &args)?;

    println!("{}", args.out.display());
    Ok(())
}
