//! `prepare`: load scenes, cut windows, write the cache.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use trajlabel::data::{
    gen_synthetic, label_map, load_scene, make_windows, BehaviorModeSpec, DatasetFormat,
    SplitManifest, Window,
};

use crate::dataset::{CACHE, LABELS, SPLITS};
use crate::error::{io_err, read_text, write_text, CliError, CliResult};
use crate::run::sha256_hex;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Ethucy,
    Sdd,
}

impl From<Format> for DatasetFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Ethucy => DatasetFormat::Ethucy,
            Format::Sdd => DatasetFormat::Sdd,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Output directory for the window cache.
    #[arg(long)]
    pub out: PathBuf,
    /// Generate the synthetic multi-behavior dataset instead of loading files.
    #[arg(long, conflicts_with_all = ["split", "input"])]
    pub synthetic: bool,
    #[arg(long, default_value_t = 100)]
    pub agents_per_mode: usize,
    #[arg(long, default_value_t = 40)]
    pub test_agents_per_mode: usize,
    /// Synthetic validation agents per mode; 0 disables the split.
    #[arg(long, default_value_t = 0)]
    pub val_agents_per_mode: usize,
    /// Generator seed. Test and validation scenes use seed + 1000 and + 2000.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split manifest (TOML with `format`, `train`, `val`, `test` file lists).
    #[arg(long, conflicts_with = "input")]
    pub split: Option<PathBuf>,
    /// Scene files or directories for a leave-one-out split.
    #[arg(long, num_args = 1.., requires = "held_out")]
    pub input: Vec<PathBuf>,
    /// Scene (file stem) to hold out as the test split.
    #[arg(long)]
    pub held_out: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Ethucy)]
    pub format: Format,
    #[arg(long, default_value_t = 8)]
    pub t_obs: usize,
    #[arg(long, default_value_t = 12)]
    pub t_fut: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Keep only frames whose index is a multiple of this.
    #[arg(long, default_value_t = 1)]
    pub subsample: i64,
}

#[derive(Debug, Serialize, serde::Deserialize, PartialEq)]
struct CacheInfo {
    input_hash: String,
    outputs: BTreeMap<String, String>,
}

struct Prepared {
    /// Description of every input, hashed to decide whether the cache is stale.
    fingerprint: String,
    splits: Vec<Vec<Window>>,
    labels: Option<BTreeMap<String, BTreeMap<String, usize>>>,
    source: (String, String),
}

pub fn run(args: &PrepareArgs) -> CliResult<()> {
    if args.t_obs < 2 || args.t_fut < 1 || args.stride < 1 || args.subsample < 1 {
        return Err(CliError::Usage(
            "need t_obs >= 2, t_fut >= 1, stride >= 1 and subsample >= 1".into(),
        ));
    }
    let prepared = if args.synthetic {
        synthetic(args)?
    } else {
        let manifest = if let Some(path) = &args.split {
            split_from_file(path)?
        } else if !args.input.is_empty() {
            let files = expand_inputs(&args.input)?;
            SplitManifest::leave_one_out(
                &files,
                args.held_out.as_deref().unwrap_or_default(),
                args.format.into(),
            )?
        } else {
            return Err(CliError::Usage(
                "give --synthetic, --split or --input with --held-out".into(),
            ));
        };
        from_files(&manifest, args)?
    };
    let input_hash = sha256_hex(prepared.fingerprint.as_bytes());

    let mut files: Vec<(String, String)> = SPLITS
        .iter()
        .zip(&prepared.splits)
        .map(|(name, w)| Ok((format!("{name}.json"), serde_json::to_string(w)?)))
        .collect::<CliResult<_>>()?;
    if let Some(l) = &prepared.labels {
        files.push((LABELS.to_string(), serde_json::to_string(l)?));
    }
    files.push(prepared.source.clone());
    let info = CacheInfo {
        input_hash: input_hash.clone(),
        outputs: files
            .iter()
            .map(|(n, t)| (n.clone(), sha256_hex(t.as_bytes())))
            .collect(),
    };

    if is_current(&args.out, &info) {
        println!("cache up to date {input_hash}");
        return Ok(());
    }
    for (name, text) in &files {
        write_text(&args.out.join(name), text)?;
    }
    write_text(&args.out.join(CACHE), &serde_json::to_string_pretty(&info)?)?;
    let counts: Vec<String> = SPLITS
        .iter()
        .zip(&prepared.splits)
        .map(|(n, w)| format!("{n}={}", w.len()))
        .collect();
    println!(
        "wrote {} windows ({}) hash {input_hash}",
        args.out.display(),
        counts.join(" ")
    );
    Ok(())
}

fn is_current(dir: &Path, info: &CacheInfo) -> bool {
    let Ok(text) = std::fs::read_to_string(dir.join(CACHE)) else {
        return false;
    };
    let Ok(old) = serde_json::from_str::<CacheInfo>(&text) else {
        return false;
    };
    old == *info
        && info.outputs.iter().all(|(name, hash)| {
            std::fs::read(dir.join(name)).is_ok_and(|b| sha256_hex(&b) == *hash)
        })
}

fn window_params(args: &PrepareArgs) -> String {
    format!(
        "t_obs={} t_fut={} stride={} subsample={}\n",
        args.t_obs, args.t_fut, args.stride, args.subsample
    )
}

fn synthetic(args: &PrepareArgs) -> CliResult<Prepared> {
    let modes = BehaviorModeSpec::default_modes();
    let plan = [
        (args.agents_per_mode, args.seed),
        (args.val_agents_per_mode, args.seed + 2000),
        (args.test_agents_per_mode, args.seed + 1000),
    ];
    let mut splits = Vec::new();
    let mut labels = BTreeMap::new();
    for (name, &(n, seed)) in SPLITS.iter().zip(&plan) {
        if n == 0 {
            splits.push(Vec::new());
            continue;
        }
        let (scene, truth) = gen_synthetic(&modes, n, seed)?;
        let scene = scene.subsample(args.subsample);
        splits.push(make_windows(&scene, args.t_obs, args.t_fut, args.stride)?);
        let map: HashMap<String, usize> = label_map(&scene, &truth);
        labels.insert(name.to_string(), map.into_iter().collect());
    }
    let description = serde_json::to_string_pretty(&serde_json::json!({
        "modes": modes,
        "agents_per_mode": { "train": plan[0].0, "val": plan[1].0, "test": plan[2].0 },
        "seeds": { "train": plan[0].1, "val": plan[1].1, "test": plan[2].1 },
    }))?;
    Ok(Prepared {
        fingerprint: format!("synthetic\n{}{description}", window_params(args)),
        splits,
        labels: Some(labels),
        source: ("synthetic.json".into(), description),
    })
}

fn split_from_file(path: &Path) -> CliResult<SplitManifest> {
    let mut m = SplitManifest::from_toml(&read_text(path)?)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for list in [&mut m.train, &mut m.val, &mut m.test] {
        for p in list.iter_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(m)
}

/// Directories expand to the regular files inside them, sorted by name.
fn expand_inputs(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            inner.sort();
            out.extend(inner);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::Usage(format!("{} does not exist", p.display())));
        }
    }
    Ok(out)
}

fn from_files(manifest: &SplitManifest, args: &PrepareArgs) -> CliResult<Prepared> {
    let mut fingerprint = format!("files {:?}\n{}", manifest.format, window_params(args));
    let mut splits = Vec::new();
    for (name, list) in SPLITS
        .iter()
        .zip([&manifest.train, &manifest.val, &manifest.test])
    {
        let mut windows = Vec::new();
        for path in list {
            let bytes = read_text(path)?;
            fingerprint.push_str(&format!(
                "{name} {} {}\n",
                file_name(path),
                sha256_hex(bytes.as_bytes())
            ));
            let scene = load_scene(path, manifest.format)?.subsample(args.subsample);
            windows.extend(make_windows(&scene, args.t_obs, args.t_fut, args.stride)?);
        }
        splits.push(windows);
    }
    if splits[0].is_empty() {
        return Err(CliError::Usage(
            "the training split produced no windows".into(),
        ));
    }
    Ok(Prepared {
        fingerprint,
        splits,
        labels: None,
        source: ("split.toml".into(), manifest.to_toml()?),
    })
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(
        || p.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}
