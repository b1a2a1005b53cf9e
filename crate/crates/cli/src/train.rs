//! `train`: staged training into a run directory.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use trajlabel::pipeline::{train_with_checkpoints, Ablation, EpochLog, Stages, TrainConfig};
use trajlabel::Error;

use crate::dataset::load_windows;
use crate::error::{io_err, read_text, write_text, CliResult};
use crate::run::{now, resolve_run, sha256_hex, write_csv, RunManifest};

pub const CONFIG: &str = "config.toml";
pub const MODEL: &str = "model.json";
pub const METRICS: &str = "metrics.csv";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared data directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run name, resolved under the run root.
    #[arg(long)]
    pub run: String,
    /// TOML training configuration; unset keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stages to run, any of `a` (pretraining), `b` (clustering), `c` (fine-tuning).
    #[arg(long, default_value = "abc")]
    pub stages: String,
    /// none, no-deep-clustering, no-gumbel or no-end-to-end.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of pseudo-labels.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    stage: &'a str,
    epoch: usize,
    loss: f64,
    pred_loss: Option<f64>,
    cluster_loss: Option<f64>,
    ade: Option<f64>,
    fde: Option<f64>,
}

/// Configuration file plus command-line overrides, validated.
pub fn resolve_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(a) = &args.ablation {
        cfg.ablation = a.parse::<Ablation>()?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(args: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let started = now();
    let cfg = resolve_config(args)?;
    let stages = Stages::parse(&args.stages)?;
    let train = load_windows(&args.data, "train")?;
    let val = load_windows(&args.data, "val")?;
    let dir = resolve_run(&args.run);
    let cfg_text = cfg.to_toml()?;
    write_text(&dir.join(CONFIG), &cfg_text)?;

    let mut rows = Vec::new();
    let mut log = |l: &EpochLog| {
        log::info!(
            "{} epoch {} loss {:.5}{}",
            l.stage,
            l.epoch,
            l.loss,
            l.ade.map(|a| format!(" ade {a:.4}")).unwrap_or_default()
        );
        rows.push(l.clone());
    };
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let mut checkpoint = |name: &str, a: &trajlabel::checkpoint::Archive| {
        a.save(&ckpt_dir.join(format!("{name}.json")))
    };
    let result = train_with_checkpoints(&train, &val, &cfg, stages, &mut log, &mut checkpoint);
    write_metrics(&dir.join(METRICS), &rows)?;
    let bundle = match result {
        Ok(b) => b,
        Err(Error::Diverged {
            stage,
            epoch,
            last_good,
        }) => {
            last_good.save(&ckpt_dir.join("last_good.json"))?;
            return Err(Error::Diverged {
                stage,
                epoch,
                last_good,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    bundle.to_archive()?.save(&dir.join(MODEL))?;
    RunManifest {
        command: argv.to_vec(),
        config_path: args.config.clone(),
        config_hash: sha256_hex(cfg_text.as_bytes()),
        seed: cfg.seed,
        output_dir: dir.clone(),
        data_dir: args.data.clone(),
        started,
        finished: now(),
    }
    .save(&dir)?;
    println!("trained {} ({} log rows)", dir.display(), rows.len());
    Ok(())
}

fn write_metrics(path: &Path, rows: &[EpochLog]) -> CliResult<()> {
    let header = [
        "stage",
        "epoch",
        "loss",
        "pred_loss",
        "cluster_loss",
        "ade",
        "fde",
    ];
    write_csv(
        path,
        &header,
        rows.iter().map(|l| MetricsRow {
            stage: l.stage,
            epoch: l.epoch,
            loss: l.loss,
            pred_loss: l.pred_loss,
            cluster_loss: l.cluster_loss,
            ade: l.ade,
            fde: l.fde,
        }),
    )
}
