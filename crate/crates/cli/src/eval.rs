//! `eval`: best-of-N ADE/FDE, optionally repeated over sampling seeds.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use trajlabel::autodiff::Mat;
use trajlabel::checkpoint::Archive;
use trajlabel::eval::{adjusted_rand_index, evaluate, mean_std, silhouette};
use trajlabel::pipeline::{prepare_windows, window_labels, Bundle, PreparedWindow};
use trajlabel::pseudolabel::hard_labels;

use crate::dataset::{load_labels, load_windows};
use crate::error::{CliError, CliResult};
use crate::run::{existing_run, now, write_csv, RunManifest};
use crate::train::{CONFIG, MODEL};

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: String,
    /// Prepared data directory; defaults to the one the run trained on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Samples per agent for best-of-N.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    /// Independent repeats with seeds `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Sampling seed; defaults to the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// A trained run with the windows of one split.
pub struct OpenRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub bundle: Bundle,
    pub data: PathBuf,
    pub windows: Vec<PreparedWindow>,
}

pub fn open_run(run: &str, data: Option<&PathBuf>, split: &str) -> CliResult<OpenRun> {
    let dir = existing_run(run)?;
    let model = dir.join(MODEL);
    if !model.exists() {
        return Err(CliError::Usage(format!(
            "{} has no trained model",
            dir.display()
        )));
    }
    let manifest = RunManifest::load(&dir)?;
    let bundle = Bundle::from_archive(&Archive::load(&model)?)?;
    let data = data.cloned().unwrap_or_else(|| manifest.data_dir.clone());
    let raw = load_windows(&data, split)?;
    let windows = prepare_windows(&raw, &bundle.cfg)?;
    Ok(OpenRun {
        dir,
        manifest,
        bundle,
        data,
        windows,
    })
}

/// Latents and hard pseudo-labels of every agent, window by window.
pub fn latents_and_labels(
    bundle: &Bundle,
    windows: &[PreparedWindow],
) -> CliResult<(Mat, Vec<usize>)> {
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let dim = bundle.clusters.centers.ncols();
    for w in windows {
        let z = bundle.vrnn.latents_from_steps(&bundle.steps(w)?)?;
        labels.extend(hard_labels(&bundle.assign(w)?));
        rows.extend(z.iter());
    }
    let n = labels.len();
    Ok((
        Mat::from_shape_vec((n, dim), rows).expect("one latent row per agent"),
        labels,
    ))
}

#[derive(Serialize)]
struct RepeatRow {
    repeat: usize,
    seed: u64,
    ade: f64,
    fde: f64,
}

#[derive(Serialize)]
struct WindowRow<'a> {
    scene: &'a str,
    start_frame: i64,
    n_agents: usize,
    ade: f64,
    fde: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    metric: &'static str,
    mean: f64,
    std: f64,
}

pub fn run(args: &EvalArgs, argv: &[String]) -> CliResult<()> {
    let started = now();
    if args.samples == 0 || args.repeats == 0 {
        return Err(CliError::Usage(
            "--samples and --repeats must be at least 1".into(),
        ));
    }
    let open = open_run(&args.run, args.data.as_ref(), &args.split)?;
    if open.windows.is_empty() {
        return Err(CliError::Usage(format!(
            "split `{}` has no windows",
            args.split
        )));
    }
    let seed = args.seed.unwrap_or(open.bundle.cfg.seed);
    let mut reports = Vec::with_capacity(args.repeats);
    for r in 0..args.repeats {
        reports.push(evaluate(
            &open.bundle,
            &open.windows,
            args.samples,
            seed + r as u64,
        )?);
    }
    let out = open.dir.join("eval");

    write_csv(
        &out.join("metrics.csv"),
        &["repeat", "seed", "ade", "fde"],
        reports.iter().enumerate().map(|(r, m)| RepeatRow {
            repeat: r,
            seed: seed + r as u64,
            ade: m.ade,
            fde: m.fde,
        }),
    )?;
    write_csv(
        &out.join("windows.csv"),
        &["scene", "start_frame", "n_agents", "ade", "fde"],
        reports[0].per_window.iter().map(|w| WindowRow {
            scene: &w.scene,
            start_frame: w.start_frame,
            n_agents: w.n_agents,
            ade: w.ade,
            fde: w.fde,
        }),
    )?;

    let ades: Vec<f64> = reports.iter().map(|m| m.ade).collect();
    let fdes: Vec<f64> = reports.iter().map(|m| m.fde).collect();
    let (ade_m, ade_s) = mean_std(&ades);
    let (fde_m, fde_s) = mean_std(&fdes);
    let mut summary = vec![
        SummaryRow {
            metric: "ade",
            mean: ade_m,
            std: ade_s,
        },
        SummaryRow {
            metric: "fde",
            mean: fde_m,
            std: fde_s,
        },
    ];
    let (z, labels) = latents_and_labels(&open.bundle, &open.windows)?;
    if let Some(s) = silhouette(&z, &labels)? {
        summary.push(SummaryRow {
            metric: "silhouette",
            mean: s,
            std: 0.0,
        });
    }
    if let Some(truth) = load_labels(&open.data, &args.split)? {
        let raw: Vec<_> = open.windows.iter().map(|w| w.window.clone()).collect();
        let truth = window_labels(&raw, &truth)?;
        let ari = adjusted_rand_index(&labels, &truth)?;
        summary.push(SummaryRow {
            metric: "ari",
            mean: ari,
            std: 0.0,
        });
    }
    write_csv(
        &out.join("summary.csv"),
        &["metric", "mean", "std"],
        summary.iter(),
    )?;

    RunManifest {
        command: argv.to_vec(),
        config_path: Some(open.dir.join(CONFIG)),
        config_hash: open.manifest.config_hash.clone(),
        seed,
        output_dir: out.clone(),
        data_dir: open.data.clone(),
        started,
        finished: now(),
    }
    .save(&out)?;

    for s in &summary {
        if args.repeats > 1 && (s.metric == "ade" || s.metric == "fde") {
            println!("{} {:.4} ± {:.4}", s.metric, s.mean, s.std);
        } else {
            println!("{} {:.4}", s.metric, s.mean);
        }
    }
    Ok(())
}
