//! Run directories, manifests and hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_text, write_text, CliError, CliResult};

/// Environment variable naming the directory that relative run names
/// resolve against. Defaults to `runs`.
pub const RUN_ROOT_ENV: &str = "TRAJLABEL_RUN_ROOT";

pub const MANIFEST: &str = "manifest.json";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Absolute paths are used as given, anything else lands under the run root.
pub fn resolve_run(name: &str) -> PathBuf {
    run_root().join(name)
}

/// Resolves and checks an existing run directory.
pub fn existing_run(name: &str) -> CliResult<PathBuf> {
    let dir = resolve_run(name);
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "run directory {} not found",
            dir.display()
        )));
    }
    Ok(dir)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Written once into every training run and every evaluation directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the resolved configuration as TOML.
    pub config_hash: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,
    pub started: String,
    pub finished: String,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        write_text(&dir.join(MANIFEST), &serde_json::to_string_pretty(self)?)
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        Ok(serde_json::from_str(&read_text(&dir.join(MANIFEST))?)?)
    }
}

/// `header` then one serialized record per row.
pub fn csv_text<S: Serialize>(
    header: &[&str],
    rows: impl IntoIterator<Item = S>,
) -> CliResult<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io {
        path: "<csv buffer>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<S: Serialize>(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = S>,
) -> CliResult<()> {
    write_text(path, &csv_text(header, rows)?)
}
