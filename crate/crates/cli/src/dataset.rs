//! Prepared window cache layout shared by the subcommands.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use trajlabel::data::Window;

use crate::error::{read_text, CliError, CliResult};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const LABELS: &str = "labels.json";
pub const CACHE: &str = "cache.json";

pub fn split_file(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.json"))
}

pub fn check_split(split: &str) -> CliResult<()> {
    if SPLITS.contains(&split) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "unknown split `{split}`, expected train, val or test"
        )))
    }
}

pub fn load_windows(dir: &Path, split: &str) -> CliResult<Vec<Window>> {
    check_split(split)?;
    if !dir.join(CACHE).exists() {
        return Err(CliError::Usage(format!(
            "{} is not a prepared data directory",
            dir.display()
        )));
    }
    Ok(serde_json::from_str(&read_text(&split_file(dir, split))?)?)
}

/// Generator labels for one split, if the data is synthetic.
pub fn load_labels(dir: &Path, split: &str) -> CliResult<Option<HashMap<String, usize>>> {
    let path = dir.join(LABELS);
    if !path.exists() {
        return Ok(None);
    }
    let mut all: HashMap<String, HashMap<String, usize>> =
        serde_json::from_str(&read_text(&path)?)?;
    Ok(all.remove(split))
}
