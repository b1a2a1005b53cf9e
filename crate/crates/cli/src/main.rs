//! `trajlabel` command-line tool.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (including
//! missing files and run directories), 3 when training or evaluation fails.

mod dataset;
mod error;
mod eval;
mod plot;
mod predict;
mod prepare;
mod run;
mod train;

use clap::{Parser, Subcommand};

use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "trajlabel",
    version,
    about = "Trajectory prediction with learned behavior pseudo-labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load scenes (or generate synthetic ones) and cache windows.
    Prepare(prepare::PrepareArgs),
    /// Train into a run directory.
    Train(train::TrainArgs),
    /// Best-of-N ADE/FDE on a split.
    Eval(eval::EvalArgs),
    /// Write sampled futures to CSV.
    Predict(predict::PredictArgs),
    /// Render trajectory and latent plots.
    Plot(plot::PlotArgs),
}

fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<()> {
    match &cli.command {
        Command::Prepare(a) => prepare::run(a),
        Command::Train(a) => train::run(a, argv),
        Command::Eval(a) => eval::run(a, argv),
        Command::Predict(a) => predict::run(a),
        Command::Plot(a) => plot::run(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli, &argv) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
