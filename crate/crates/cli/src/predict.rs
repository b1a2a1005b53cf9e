//! `predict`: dump sampled futures as a columnar CSV.
//!
//! The first line is `#trajlabel-predictions,1` (format name and version),
//! followed by a header and one row per (window, agent, sample, step).
//! Positions are in scene units; the Gaussian columns are the model's
//! goal-relative step displacement parameters in scaled units.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use crate::error::{write_text, CliError, CliResult};
use crate::eval::open_run;
use crate::run::csv_text;

pub const FORMAT_LINE: &str = "#trajlabel-predictions,1";

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub run: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; defaults to `predictions.csv` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Row<'a> {
    window: usize,
    scene: &'a str,
    start_frame: i64,
    agent_id: &'a str,
    label: usize,
    sample: usize,
    step: usize,
    x: f64,
    y: f64,
    goal_x: f64,
    goal_y: f64,
    mu_x: f64,
    mu_y: f64,
    sigma_x: f64,
    sigma_y: f64,
    rho: f64,
}

pub const HEADER: [&str; 16] = [
    "window",
    "scene",
    "start_frame",
    "agent_id",
    "label",
    "sample",
    "step",
    "x",
    "y",
    "goal_x",
    "goal_y",
    "mu_x",
    "mu_y",
    "sigma_x",
    "sigma_y",
    "rho",
];

pub fn run(args: &PredictArgs) -> CliResult<()> {
    if args.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let open = open_run(&args.run, args.data.as_ref(), &args.split)?;
    let seed = args.seed.unwrap_or(open.bundle.cfg.seed);
    let unscale = 1.0 / open.bundle.cfg.scale;
    let mut preds = Vec::with_capacity(open.windows.len());
    for (i, w) in open.windows.iter().enumerate() {
        preds.push(open.bundle.predict(w, args.samples, seed, i as u64)?);
    }
    let mut rows = Vec::new();
    for (i, (w, p)) in open.windows.iter().zip(&preds).enumerate() {
        for (a, id) in w.window.agent_ids.iter().enumerate() {
            for s in 0..args.samples {
                let tr = &p.tracks[s][a];
                let goal = p.endpoints[s][a];
                for (t, pos) in p.samples[s][a].iter().enumerate() {
                    rows.push(Row {
                        window: i,
                        scene: &w.window.scene,
                        start_frame: w.window.start_frame,
                        agent_id: id,
                        label: p.labels[a],
                        sample: s,
                        step: t,
                        x: pos[0] * unscale,
                        y: pos[1] * unscale,
                        goal_x: goal[0] * unscale,
                        goal_y: goal[1] * unscale,
                        mu_x: tr.mu[t][0],
                        mu_y: tr.mu[t][1],
                        sigma_x: tr.sigma[t][0],
                        sigma_y: tr.sigma[t][1],
                        rho: tr.rho[t],
                    });
                }
            }
        }
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| open.dir.join("predictions.csv"));
    write_text(
        &out,
        &format!("{FORMAT_LINE}\n{}", csv_text(&HEADER, rows.iter())?),
    )?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
