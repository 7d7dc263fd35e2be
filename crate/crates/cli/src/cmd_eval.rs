use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lencon_core::data::{byte_length, load_corpus};
use lencon_core::evaluation::{
    evaluate, length_report, limit_report_from_scores, score_document, tests_per_limit,
    EvalReport, LengthGroup, SystemOutput,
};
use rayon::prelude::*;

use crate::args::EvaluateArgs;
use crate::manifest::write_manifest;

/// One parsed decode-output line: the desired-length column (`"free"` maps
/// to `None`) and the summary tokens.
struct ParsedOutput {
    desired: Option<usize>,
    tokens: Vec<String>,
}

fn parse_outputs_file(path: &Path) -> anyhow::Result<Vec<ParsedOutput>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading outputs {}", path.display()))?;
    let mut outputs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            bail!(
                "{}:{}: expected 4 tab-separated fields (desired, bytes, logprob, summary), got {}",
                path.display(),
                lineno + 1,
                fields.len()
            );
        }
        let desired = match fields[0] {
            "free" => None,
            other => Some(other.parse::<usize>().with_context(|| {
                format!(
                    "{}:{}: desired column is neither a byte count nor \"free\"",
                    path.display(),
                    lineno + 1
                )
            })?),
        };
        outputs.push(ParsedOutput {
            desired,
            tokens: fields[3].split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(outputs)
}

fn parse_system_spec(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) => (name.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(spec);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (name, path)
        }
    }
}

pub fn run(args: EvaluateArgs) -> anyhow::Result<()> {
    let limits: Vec<usize> = args
        .limits
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing --limits {:?}", args.limits))?;

    let mut systems_parsed: Vec<(String, Vec<ParsedOutput>)> = Vec::new();
    for spec in &args.outputs {
        let (name, path) = parse_system_spec(spec);
        systems_parsed.push((name, parse_outputs_file(&path)?));
    }

    // Each reference file contributes one reference per document.
    let mut reference_sets: Vec<Vec<Vec<String>>> = Vec::new();
    for path in &args.references {
        let loaded = load_corpus(path)?;
        reference_sets.push(loaded.pairs.into_iter().map(|p| p.target).collect());
    }
    let n_docs = reference_sets[0].len();
    for (path, set) in args.references.iter().zip(&reference_sets) {
        if set.len() != n_docs {
            bail!(
                "reference file {} has {} documents, expected {}",
                path.display(),
                set.len(),
                n_docs
            );
        }
    }
    for (name, outputs) in &systems_parsed {
        if outputs.len() != n_docs {
            bail!(
                "system {name:?} has {} outputs, expected {} (one per reference document)",
                outputs.len(),
                n_docs
            );
        }
    }
    let references: Vec<Vec<Vec<String>>> = (0..n_docs)
        .map(|i| reference_sets.iter().map(|set| set[i].clone()).collect())
        .collect();

    let systems: Vec<SystemOutput> = systems_parsed
        .iter()
        .map(|(name, outputs)| SystemOutput {
            name: name.clone(),
            documents: outputs.iter().map(|o| o.tokens.clone()).collect(),
        })
        .collect();

    let mut report = if args.workers > 1 {
        evaluate_parallel(
            &systems,
            &references,
            &limits,
            args.iterations,
            args.seed,
            args.workers,
        )?
    } else {
        evaluate(&systems, &references, &limits, args.iterations, args.seed)?
    };

    // Length behavior grouped per system and desired length.
    let mut groups: Vec<LengthGroup> = Vec::new();
    for (name, outputs) in &systems_parsed {
        let mut by_desired: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
        for output in outputs {
            by_desired
                .entry(output.desired)
                .or_default()
                .push(byte_length(&output.tokens));
        }
        for (desired, byte_lengths) in by_desired {
            groups.push(LengthGroup {
                label: Some(name.clone()),
                desired,
                byte_lengths,
            });
        }
    }
    report.length_groups = length_report(&groups, args.bin_width)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let report_path = args.out.join("report.json");
    fs::write(&report_path, report.to_json()? + "\n")
        .with_context(|| format!("writing {}", report_path.display()))?;
    for group in &report.length_groups {
        let label = group.label.as_deref().unwrap_or("all");
        let tag = group
            .desired
            .map(|d| d.to_string())
            .unwrap_or_else(|| "free".to_string());
        let path = args.out.join(format!("lengths_{label}_{tag}.csv"));
        fs::write(&path, group.histogram.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    write_manifest(&args.out.join("manifest.json"), "evaluate", &args)?;

    println!("{}", report_path.display());
    Ok(())
}

/// Same report as [`evaluate`], with per-document scoring fanned out across
/// a worker pool. Scores land in per-document slots and aggregation is the
/// shared deterministic reduction, so the worker count never changes the
/// result.
fn evaluate_parallel(
    systems: &[SystemOutput],
    references: &[Vec<Vec<String>>],
    limits: &[usize],
    iterations: u64,
    seed: u64,
    workers: usize,
) -> anyhow::Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;
    let names: Vec<String> = systems.iter().map(|s| s.name.clone()).collect();
    let mut limit_reports = Vec::with_capacity(limits.len());
    let mut test_index = 0u64;
    for &limit in limits {
        let per_doc: Vec<Vec<[f64; 3]>> = pool.install(|| {
            systems
                .iter()
                .map(|system| {
                    system
                        .documents
                        .par_iter()
                        .zip(references.par_iter())
                        .map(|(candidate, refs)| score_document(candidate, refs, limit))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<_, _>>()
        })?;
        limit_reports.push(limit_report_from_scores(
            limit,
            &names,
            &per_doc,
            iterations,
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
