//! Named-array archive used for every checkpoint.
//!
//! On disk the archive is a JSON document:
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "meta": { "<key>": "<value>", ... },
//!   "manifest": [ { "name": "...", "shape": [rows, cols], "dtype": "f64" }, ... ],
//!   "data": { "<name>": [row-major values], ... }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is
//! bit-exact.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

#[derive(Serialize, Deserialize)]
struct RawArchive {
    format_version: u32,
    meta: IndexMap<String, String>,
    manifest: Vec<ManifestEntry>,
    data: IndexMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: IndexMap<String, String>,
    arrays: IndexMap<String, Mat>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.arrays.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| Error::State(format!("archive has no array `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    /// Stores every parameter as `prefix/name`.
    pub fn put_params(&mut self, prefix: &str, params: &ParamStore) {
        for (k, v) in params.iter() {
            self.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    /// Collects every array stored under `prefix/`.
    pub fn params(&self, prefix: &str) -> ParamStore {
        let lead = format!("{prefix}/");
        let mut out = ParamStore::new();
        for (k, v) in &self.arrays {
            if let Some(name) = k.strip_prefix(&lead) {
                out.insert(name, v.clone());
            }
        }
        out
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.arrays
            .iter()
            .map(|(k, v)| ManifestEntry {
                name: k.clone(),
                shape: [v.nrows(), v.ncols()],
                dtype: "f64".into(),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RawArchive {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            manifest: self.manifest(),
            data: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().copied().collect()))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawArchive = serde_json::from_str(text)?;
        if raw.format_version != FORMAT_VERSION {
            return Err(Error::State(format!(
                "unsupported archive format version {}",
                raw.format_version
            )));
        }
        let mut arrays = IndexMap::new();
        for entry in raw.manifest {
            if entry.dtype != "f64" {
                return Err(Error::State(format!("unsupported dtype {}", entry.dtype)));
            }
            let data = raw
                .data
                .get(&entry.name)
                .ok_or_else(|| Error::State(format!("missing data for `{}`", entry.name)))?;
            let m = Mat::from_shape_vec((entry.shape[0], entry.shape[1]), data.clone())
                .map_err(|e| Error::State(format!("bad shape for `{}`: {e}", entry.name)))?;
            arrays.insert(entry.name, m);
        }
        Ok(Self {
            meta: raw.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = Archive::new();
        a.meta.insert("kind".into(), "test".into());
        a.insert("x", array![[0.1, 1.0 / 3.0], [-2e-300, f64::MAX]]);
        let b = Archive::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn params_prefixing() {
        let mut p = ParamStore::new();
        p.insert("enc.w", array![[1.0]]);
        let mut a = Archive::new();
        a.put_params("vrnn", &p);
        a.insert("other/x", array![[2.0]]);
        assert_eq!(a.params("vrnn"), p);
        assert_eq!(a.manifest()[0].name, "vrnn/enc.w");
    }

    #[test]
    fn rejects_unknown_version() {
        let text = r#"{"format_version": 99, "meta": {}, "manifest": [], "data": {}}"#;
        assert!(Archive::from_json(text).is_err());
    }
}
