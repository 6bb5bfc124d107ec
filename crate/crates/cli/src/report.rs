//! Run summaries, acceptance checks and CSV helpers.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: String,
}

pub fn check(name: &str, passed: bool, measured: f64, threshold: impl Into<String>) -> Check {
    Check { name: name.into(), passed, measured, threshold: threshold.into() }
}

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub experiment: String,
    pub seed: u64,
    pub version: String,
    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub config_hash: String,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub provenance: Provenance,
    pub checks: Vec<Check>,
    pub all_passed: bool,
    /// Artifact files, relative to the output directory.
    pub files: Vec<String>,
    pub metrics: serde_json::Value,
}

pub fn provenance(experiment: &str, seed: u64, config: &impl Serialize) -> Result<Provenance> {
    let canonical = serde_json::to_string(config)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(Provenance {
        experiment: experiment.into(),
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Writes `summary.json` into `dir` and returns whether every check passed.
pub fn finish(dir: &Path, provenance: Provenance, checks: Vec<Check>, files: Vec<String>, metrics: serde_json::Value) -> Result<bool> {
    for f in &files {
        anyhow::ensure!(dir.join(f).exists(), "artifact {f} was not written");
    }
    let all_passed = checks.iter().all(|c| c.passed);
    for c in &checks {
        eprintln!("{} {}: measured {} (threshold {})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.measured, c.threshold);
    }
    let summary = Summary { provenance, checks, all_passed, files, metrics };
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(all_passed)
}

/// Writes serializable rows (with a header from the first row's field names) to `dir/name`.
pub fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: impl IntoIterator<Item = T>) -> Result<String> {
    let path: PathBuf = dir.join(name);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(name.into())
}

pub fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<String> {
    std::fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    Ok(name.into())
}
