//! `plot`: SVG trajectory overlay and latent scatter.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use trajlabel::data::Point;
use trajlabel::eval::pca_2d;

use crate::error::{write_text, CliError, CliResult};
use crate::eval::{latents_and_labels, open_run};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];
const SIZE: f64 = 600.0;
const MARGIN: f64 = 30.0;

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub run: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Window drawn in the trajectory overlay.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `plots` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

/// Maps data coordinates onto the canvas with equal axis scales, y up.
struct Frame {
    min: Point,
    scale: f64,
}

impl Frame {
    fn fit<'a>(points: impl IntoIterator<Item = &'a Point>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if !lo[0].is_finite() {
            return Self {
                min: [0.0, 0.0],
                scale: 1.0,
            };
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        Self {
            min: lo,
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    fn map(&self, p: Point) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.min[0]) * self.scale,
            SIZE - MARGIN - (p[1] - self.min[1]) * self.scale,
        )
    }

    fn path(&self, pts: &[Point]) -> String {
        pts.iter()
            .map(|&p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn svg(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n{body}</svg>\n"
    )
}

pub fn run(args: &PlotArgs) -> CliResult<()> {
    let open = open_run(&args.run, args.data.as_ref(), &args.split)?;
    let Some(w) = open.windows.get(args.window) else {
        return Err(CliError::Usage(format!(
            "window {} out of range, split has {}",
            args.window,
            open.windows.len()
        )));
    };
    if args.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let out = args.out.clone().unwrap_or_else(|| open.dir.join("plots"));
    let seed = args.seed.unwrap_or(open.bundle.cfg.seed);
    let pred = open
        .bundle
        .predict(w, args.samples, seed, args.window as u64)?;

    let all = w
        .window
        .observed
        .iter()
        .chain(&w.window.future)
        .chain(pred.samples.iter().flatten())
        .flatten();
    let frame = Frame::fit(all);
    let mut body = String::new();
    for sample in &pred.samples {
        for (a, track) in sample.iter().enumerate() {
            let mut pts = vec![w.window.observed[a][w.window.observed[a].len() - 1]];
            pts.extend(track);
            let _ = writeln!(
                body,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1\" stroke-opacity=\"0.3\"/>",
                frame.path(&pts),
                color(pred.labels[a])
            );
        }
    }
    for (a, obs) in w.window.observed.iter().enumerate() {
        let mut fut = vec![obs[obs.len() - 1]];
        fut.extend(&w.window.future[a]);
        let _ = writeln!(
            body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>",
            frame.path(obs)
        );
        let _ = writeln!(
            body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"2\" stroke-dasharray=\"5,4\"/>",
            frame.path(&fut)
        );
    }
    let title = format!(
        "{} frame {}: observed, ground truth (dashed), samples by label",
        w.window.scene, w.window.start_frame
    );
    write_text(&out.join("trajectories.svg"), &svg(&title, &body))?;

    let (z, labels) = latents_and_labels(&open.bundle, &open.windows)?;
    let proj = pca_2d(&z);
    let pts: Vec<Point> = proj.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let frame = Frame::fit(&pts);
    let mut body = String::new();
    for (p, &l) in pts.iter().zip(&labels) {
        let (x, y) = frame.map(*p);
        let _ = writeln!(
            body,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
            color(l)
        );
    }
    write_text(
        &out.join("latents.svg"),
        &svg("behavior latents, first two principal axes", &body),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}
