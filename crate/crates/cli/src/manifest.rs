//! Run manifests: every command writes a JSON echo of its fully resolved
//! flags next to its primary outputs, so any run can be reproduced by
//! replaying the recorded configuration. Manifests carry no timestamps or
//! host details; identical flags produce identical manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    flags: &'a T,
}

pub fn write_manifest<T: Serialize>(path: &Path, command: &str, flags: &T) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(&Manifest { command, flags })
        .context("serializing manifest")?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `<path><suffix>`, e.g. `ckpt` + `.loss.csv` → `ckpt.loss.csv`.
pub fn path_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}
