//! Sparse spatial-temporal graph attention predictor with a bivariate
//! Gaussian head, its NLL, sampling and goal retrieval.
//!
//! The model works on goal-relative per-step displacements. Predicted means
//! are deviations from the constant-velocity path to the goal, so sampling
//! adds the goal velocity back and integrates from the last observation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Mat, Tape, Var};
use crate::checkpoint::Archive;
use crate::data::Point;
use crate::error::{invalid, Error, Result};
use crate::geometry::rotate;
use crate::graphs::{agent_major_index, spatial_nodes_var, step_major_index};
use crate::params::{glorot, Bound, ParamStore};

pub const N_GAUSS: usize = 5;
pub const LOG_SIGMA_MAX: f64 = 6.0;
/// `|ρ|` never reaches 1.
pub const RHO_SCALE: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorConfig {
    pub t_obs: usize,
    pub t_fut: usize,
    /// Label width `k`; node features are `2 + k` wide.
    pub k: usize,
    pub channels: usize,
}

impl PredictorConfig {
    pub fn new(t_obs: usize, k: usize) -> Self {
        Self {
            t_obs,
            t_fut: 12,
            k,
            channels: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    pub params: ParamStore,
}

/// Gaussian parameters for one agent's future steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTrack {
    pub mu: Vec<Point>,
    pub sigma: Vec<Point>,
    pub rho: Vec<f64>,
}

/// Keeps attention entries of at least `threshold` plus the diagonal, then
/// renormalizes rows. The mask carries no gradient.
pub fn sparse_attention<'t>(attn: Var<'t>, threshold: f64) -> Var<'t> {
    let a = attn.value();
    let mask = Mat::from_shape_fn(a.dim(), |(i, j)| {
        if i == j || a[[i, j]] >= threshold {
            1.0
        } else {
            0.0
        }
    });
    let kept = attn.mul_const(mask);
    kept.div_col(kept.row_sum())
}

fn attention_block<'t>(b: &Bound<'t>, prefix: &str, x: Var<'t>, channels: usize) -> Var<'t> {
    let rows = x.shape().0;
    let q = b.linear(&format!("{prefix}.q"), x);
    let k = b.linear(&format!("{prefix}.k"), x);
    let scores = q.matmul_t(k).scale(1.0 / (channels as f64).sqrt());
    let adj = sparse_attention(scores.softmax_rows(), 1.0 / (2.0 * rows as f64));
    adj.matmul(b.linear(&format!("{prefix}.w"), x)).tanh()
}

impl Predictor {
    pub fn new(cfg: PredictorConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = 2 + cfg.k;
        let c = cfg.channels;
        let mut p = ParamStore::new();
        for block in ["sp", "tp"] {
            for part in ["q", "k", "w"] {
                p.init_linear(&format!("{block}.{part}"), d, c, rng);
            }
        }
        p.insert("head.time.w", glorot(cfg.t_fut, cfg.t_obs, rng));
        p.insert("head.time.b", Mat::zeros((cfg.t_fut, 1)));
        p.init_linear("head.out", c, N_GAUSS, rng);
        Self { cfg, params: p }
    }

    pub fn to_archive(&self, archive: &mut Archive) {
        archive.put_params("predictor", &self.params);
        for (k, v) in [
            ("t_obs", self.cfg.t_obs),
            ("t_fut", self.cfg.t_fut),
            ("k", self.cfg.k),
            ("channels", self.cfg.channels),
        ] {
            archive.meta.insert(format!("predictor.{k}"), v.to_string());
        }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            archive
                .meta
                .get(&format!("predictor.{k}"))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::State(format!("archive missing predictor `{k}`")))
        };
        let cfg = PredictorConfig {
            t_obs: get("t_obs")?,
            t_fut: get("t_fut")?,
            k: get("k")?,
            channels: get("channels")?,
        };
        let params = archive.params("predictor");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (name, m) in Self::new(cfg, &mut rng).params.iter() {
            match params.get(name) {
                Some(p) if p.dim() == m.dim() => {}
                _ => {
                    return Err(Error::State(format!(
                        "predictor parameter `{name}` missing or misshapen"
                    )))
                }
            }
        }
        Ok(Self { cfg, params })
    }

    /// Raw head output, `N·t_fut × 5`, agent-major. `vel` holds the
    /// step-major goal-relative velocities and `labels` the `N × k` labels.
    pub fn forward<'t>(&self, b: &Bound<'t>, vel: &Mat, labels: Var<'t>) -> Result<Var<'t>> {
        let (n, k) = labels.shape();
        let t = self.cfg.t_obs;
        if k != self.cfg.k {
            return Err(invalid(format!(
                "labels are {k} wide, model expects {}",
                self.cfg.k
            )));
        }
        if vel.nrows() != t * n || vel.ncols() != 2 {
            return Err(invalid(format!(
                "velocity block is {:?}, expected ({}, 2)",
                vel.dim(),
                t * n
            )));
        }
        let tape = labels.tape();
        let c = self.cfg.channels;
        let x = spatial_nodes_var(vel, labels, t);

        let spatial: Vec<Var> = (0..t)
            .map(|s| attention_block(b, "sp", x.slice_rows(s * n, (s + 1) * n), c))
            .collect();
        let spatial = tape.concat_rows(&spatial);
        let xa = x.gather_rows(&agent_major_index(t, n));
        let temporal: Vec<Var> = (0..n)
            .map(|i| attention_block(b, "tp", xa.slice_rows(i * t, (i + 1) * t), c))
            .collect();
        let temporal = tape
            .concat_rows(&temporal)
            .gather_rows(&step_major_index(t, n));
        let fused = (spatial + temporal).gather_rows(&agent_major_index(t, n));

        let time_w = b.get("head.time.w");
        let time_b = b
            .get("head.time.b")
            .matmul(tape.constant(Mat::ones((1, c))));
        let heads: Vec<Var> = (0..n)
            .map(|i| {
                let h = (time_w.matmul(fused.slice_rows(i * t, (i + 1) * t)) + time_b).tanh();
                b.linear("head.out", h)
            })
            .collect();
        let out = tape.concat_rows(&heads);
        if out.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite predictor output".into()));
        }
        Ok(out)
    }

    /// Plain-array forward returning one track per agent.
    pub fn predict(&self, vel: &Mat, labels: &Mat) -> Result<Vec<GaussianTrack>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        let raw = self.forward(&b, vel, tape.constant(labels.clone()))?;
        Ok(tracks_from_raw(&raw.value(), self.cfg.t_fut))
    }
}

/// `(μ, σ, ρ)` from raw head output.
pub fn gaussian_params<'t>(raw: Var<'t>) -> (Var<'t>, Var<'t>, Var<'t>) {
    let mu = raw.slice_cols(0, 2);
    let sigma = raw
        .slice_cols(2, 4)
        .clamp(-LOG_SIGMA_MAX, LOG_SIGMA_MAX)
        .exp();
    let rho = raw.slice_cols(4, 5).tanh().scale(RHO_SCALE);
    (mu, sigma, rho)
}

pub fn tracks_from_raw(raw: &Mat, t_fut: usize) -> Vec<GaussianTrack> {
    raw.rows()
        .into_iter()
        .collect::<Vec<_>>()
        .chunks(t_fut)
        .map(|rows| GaussianTrack {
            mu: rows.iter().map(|r| [r[0], r[1]]).collect(),
            sigma: rows
                .iter()
                .map(|r| {
                    [
                        r[2].clamp(-LOG_SIGMA_MAX, LOG_SIGMA_MAX).exp(),
                        r[3].clamp(-LOG_SIGMA_MAX, LOG_SIGMA_MAX).exp(),
                    ]
                })
                .collect(),
            rho: rows.iter().map(|r| r[4].tanh() * RHO_SCALE).collect(),
        })
        .collect()
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Summed negative bivariate-Gaussian log density of `target` rows.
pub fn nll_loss_var<'t>(raw: Var<'t>, target: &Mat) -> Var<'t> {
    let (mu, sigma, rho) = gaussian_params(raw);
    let tape = raw.tape();
    let d = (tape.constant(target.clone()) - mu) / sigma;
    let (dx, dy) = (d.slice_cols(0, 1), d.slice_cols(1, 2));
    let one_minus = rho.square().scale(-1.0).add_scalar(1.0);
    let z = dx.square() + dy.square() - (rho * dx * dy).scale(2.0);
    let per_step = sigma.ln().row_sum() + one_minus.ln().scale(0.5) + (z / one_minus).scale(0.5);
    per_step.sum().add_scalar(LN_2PI * target.nrows() as f64)
}

/// Plain version of [`nll_loss_var`] over tracks.
pub fn nll_loss(tracks: &[GaussianTrack], target: &[Vec<Point>]) -> f64 {
    let mut total = 0.0;
    for (tr, tg) in tracks.iter().zip(target) {
        for s in 0..tr.mu.len() {
            let (sx, sy, r) = (tr.sigma[s][0], tr.sigma[s][1], tr.rho[s]);
            let dx = (tg[s][0] - tr.mu[s][0]) / sx;
            let dy = (tg[s][1] - tr.mu[s][1]) / sy;
            let om = 1.0 - r * r;
            total += LN_2PI
                + sx.ln()
                + sy.ln()
                + 0.5 * om.ln()
                + (dx * dx + dy * dy - 2.0 * r * dx * dy) / (2.0 * om);
        }
    }
    total
}

/// Goal-relative per-step displacements of the future, `N·t_fut × 2`
/// agent-major.
pub fn relative_targets(last_observed: &[Point], future: &[Vec<Point>], goals: &[Point]) -> Mat {
    let t = future.first().map_or(0, Vec::len);
    let mut out = Mat::zeros((future.len() * t, 2));
    for (i, f) in future.iter().enumerate() {
        let mut prev = last_observed[i];
        for (s, p) in f.iter().enumerate() {
            out[[i * t + s, 0]] = p[0] - prev[0] - goals[i][0];
            out[[i * t + s, 1]] = p[1] - prev[1] - goals[i][1];
            prev = *p;
        }
    }
    out
}

/// One draw from a bivariate Gaussian.
pub fn sample_step(mu: Point, sigma: Point, rho: f64, rng: &mut impl Rng) -> Point {
    let e1: f64 = StandardNormal.sample(rng);
    let e2: f64 = StandardNormal.sample(rng);
    [
        mu[0] + sigma[0] * e1,
        mu[1] + sigma[1] * (rho * e1 + (1.0 - rho * rho).sqrt() * e2),
    ]
}

/// Absolute sampled futures for one agent: each goal-relative displacement
/// gets the goal velocity added back and is accumulated from `last`.
pub fn sample_trajectories(
    track: &GaussianTrack,
    goal: Point,
    last: Point,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<Point>>> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    Ok((0..n_samples)
        .map(|_| sample_one(track, goal, last, rng))
        .collect())
}

pub fn sample_one(
    track: &GaussianTrack,
    goal: Point,
    last: Point,
    rng: &mut impl Rng,
) -> Vec<Point> {
    let mut pos = last;
    track
        .mu
        .iter()
        .zip(&track.sigma)
        .zip(&track.rho)
        .map(|((&m, &s), &r)| {
            let d = sample_step(m, s, r, rng);
            pos = [pos[0] + d[0] + goal[0], pos[1] + d[1] + goal[1]];
            pos
        })
        .collect()
}

/// The mean future, integrated the same way as [`sample_one`].
pub fn mean_trajectory(track: &GaussianTrack, goal: Point, last: Point) -> Vec<Point> {
    let mut pos = last;
    track
        .mu
        .iter()
        .map(|m| {
            pos = [pos[0] + m[0] + goal[0], pos[1] + m[1] + goal[1]];
            pos
        })
        .collect()
}

/// Endpoint bank for inference-time goal retrieval.
///
/// An observation's descriptor is its velocity sequence rotated so the
/// overall observed heading points along `+x`. The stored value is the
/// endpoint offset from the last observation in that same frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GoalRepository {
    descriptors: Vec<Vec<f64>>,
    deltas: Vec<Point>,
}

fn heading(observed: &[Point]) -> f64 {
    let (a, b) = (observed[0], observed[observed.len() - 1]);
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    if dx.hypot(dy) < crate::geometry::STATIONARY_EPS {
        0.0
    } else {
        dy.atan2(dx)
    }
}

pub fn descriptor(observed: &[Point]) -> (Vec<f64>, f64) {
    let angle = heading(observed);
    let d = observed
        .windows(2)
        .flat_map(|w| rotate([w[1][0] - w[0][0], w[1][1] - w[0][1]], -angle))
        .collect();
    (d, angle)
}

impl GoalRepository {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn add(&mut self, observed: &[Point], endpoint: Point) {
        let (d, angle) = descriptor(observed);
        let last = observed[observed.len() - 1];
        self.descriptors.push(d);
        self.deltas.push(rotate(
            [endpoint[0] - last[0], endpoint[1] - last[1]],
            -angle,
        ));
    }

    /// Up to `k` endpoint candidates, nearest descriptor first.
    pub fn retrieve_goal(&self, observed: &[Point], k: usize) -> Result<Vec<Point>> {
        if self.is_empty() {
            return Err(Error::State("goal repository is empty".into()));
        }
        if k == 0 {
            return Err(invalid("need at least one goal candidate"));
        }
        let (q, angle) = descriptor(observed);
        let mut dist: Vec<(f64, usize)> = self
            .descriptors
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let s = if d.len() == q.len() {
                    d.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum()
                } else {
                    f64::INFINITY
                };
                (s, i)
            })
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let last = observed[observed.len() - 1];
        Ok(dist
            .iter()
            .take(k)
            .map(|&(_, i)| {
                let d = rotate(self.deltas[i], angle);
                [last[0] + d[0], last[1] + d[1]]
            })
            .collect())
    }

    pub fn to_archive(&self, archive: &mut Archive) {
        let width = self.descriptors.first().map_or(0, Vec::len);
        let desc = Mat::from_shape_fn((self.len(), width), |(i, j)| self.descriptors[i][j]);
        let deltas = Mat::from_shape_fn((self.len(), 2), |(i, j)| self.deltas[i][j]);
        archive.insert("goals/descriptors", desc);
        archive.insert("goals/deltas", deltas);
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let desc = archive.require("goals/descriptors")?;
        let deltas = archive.require("goals/deltas")?;
        Ok(Self {
            descriptors: desc.rows().into_iter().map(|r| r.to_vec()).collect(),
            deltas: deltas.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
        })
    }
}
