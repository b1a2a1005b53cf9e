//! Trajectory ingestion, windowing, split manifests and synthetic scenes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Meters,
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: String,
    /// `(frame_index, position)`, strictly increasing in frame.
    pub frames: Vec<(i64, Point)>,
    /// Annotated class, kept as metadata only.
    pub class: Option<String>,
}

impl AgentTrack {
    pub fn new(agent_id: impl Into<String>, frames: Vec<(i64, Point)>) -> Result<Self> {
        let agent_id = agent_id.into();
        if frames.len() < 2 {
            return Err(invalid(format!(
                "track `{agent_id}` has {} frame(s), need at least 2",
                frames.len()
            )));
        }
        if frames.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(invalid(format!(
                "track `{agent_id}` frames are not strictly increasing"
            )));
        }
        Ok(Self {
            agent_id,
            frames,
            class: None,
        })
    }

    fn position_at(&self, frame: i64) -> Option<usize> {
        self.frames.binary_search_by_key(&frame, |f| f.0).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub tracks: Vec<AgentTrack>,
    pub frame_rate: f64,
    pub unit: Unit,
}

impl Scene {
    /// Spacing between consecutive annotated frames: the gcd of every frame
    /// offset from the earliest frame.
    pub fn frame_step(&self) -> i64 {
        let Some(min) = self.min_frame() else {
            return 1;
        };
        let g = self
            .tracks
            .iter()
            .flat_map(|t| t.frames.iter().map(move |f| f.0 - min))
            .fold(0i64, gcd);
        g.max(1)
    }

    fn min_frame(&self) -> Option<i64> {
        self.tracks
            .iter()
            .filter_map(|t| t.frames.first())
            .map(|f| f.0)
            .min()
    }

    fn max_frame(&self) -> Option<i64> {
        self.tracks
            .iter()
            .filter_map(|t| t.frames.last())
            .map(|f| f.0)
            .max()
    }

    /// Multiplies every position by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        for t in &mut self.tracks {
            for f in &mut t.frames {
                f.1 = [f.1[0] * factor, f.1[1] * factor];
            }
        }
        self
    }

    /// Keeps only frames whose index is a multiple of `every`; tracks left
    /// with fewer than two frames are dropped.
    pub fn subsample(mut self, every: i64) -> Self {
        if every > 1 {
            for t in &mut self.tracks {
                t.frames.retain(|f| f.0 % every == 0);
            }
            self.tracks.retain(|t| t.frames.len() >= 2);
        }
        self
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// `t_obs` observed and `t_fut` future positions for every agent present at
/// all `t_obs + t_fut` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub scene: String,
    pub start_frame: i64,
    pub agent_ids: Vec<String>,
    pub observed: Vec<Vec<Point>>,
    pub future: Vec<Vec<Point>>,
}

impl Window {
    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn t_obs(&self) -> usize {
        self.observed.first().map_or(0, Vec::len)
    }

    pub fn t_fut(&self) -> usize {
        self.future.first().map_or(0, Vec::len)
    }

    /// Keeps the agents at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Window {
        Window {
            scene: self.scene.clone(),
            start_frame: self.start_frame,
            agent_ids: idx.iter().map(|&i| self.agent_ids[i].clone()).collect(),
            observed: idx.iter().map(|&i| self.observed[i].clone()).collect(),
            future: idx.iter().map(|&i| self.future[i].clone()).collect(),
        }
    }
}

fn parse_num(tok: &str, line: usize, what: &str) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what} `{tok}`"),
    })
}

fn parse_frame(tok: &str, line: usize) -> Result<i64> {
    let f = parse_num(tok, line, "frame")?;
    if f.fract() != 0.0 || !f.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("frame `{tok}` is not an integer"),
        });
    }
    Ok(f as i64)
}

/// Agent ids like `1.0` and `1` name the same agent.
fn normalize_id(tok: &str) -> String {
    match tok.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.is_finite() => format!("{}", v as i64),
        _ => tok.to_string(),
    }
}

struct RawRow {
    line: usize,
    frame: i64,
    agent: String,
    pos: Point,
    class: Option<String>,
}

fn group_rows(name: &str, rows: Vec<RawRow>, frame_rate: f64, unit: Unit) -> Result<Scene> {
    if rows.is_empty() {
        return Err(Error::EmptyScene(name.to_string()));
    }
    let mut grouped: IndexMap<String, Vec<RawRow>> = IndexMap::new();
    for r in rows {
        grouped.entry(r.agent.clone()).or_default().push(r);
    }
    let mut tracks = Vec::new();
    for (agent, mut rows) in grouped {
        rows.sort_by_key(|r| r.frame);
        if let Some(w) = rows.windows(2).find(|w| w[0].frame == w[1].frame) {
            return Err(Error::Parse {
                line: w[1].line,
                msg: format!("duplicate frame {} for agent `{agent}`", w[1].frame),
            });
        }
        if rows.len() < 2 {
            log::debug!("{name}: dropping agent `{agent}` with a single frame");
            continue;
        }
        let class = rows.iter().find_map(|r| r.class.clone());
        let mut track = AgentTrack::new(agent, rows.iter().map(|r| (r.frame, r.pos)).collect())?;
        track.class = class;
        tracks.push(track);
    }
    Ok(Scene {
        name: name.to_string(),
        tracks,
        frame_rate,
        unit,
    })
}

/// Parses whitespace-separated `frame_id agent_id x y` rows.
pub fn parse_ethucy(name: &str, text: &str) -> Result<Scene> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 columns, found {}", toks.len()),
            });
        }
        rows.push(RawRow {
            line,
            frame: parse_frame(toks[0], line)?,
            agent: normalize_id(toks[1]),
            pos: [
                parse_num(toks[2], line, "x")?,
                parse_num(toks[3], line, "y")?,
            ],
            class: None,
        });
    }
    group_rows(name, rows, 2.5, Unit::Meters)
}

pub fn load_ethucy(path: &Path) -> Result<Scene> {
    parse_ethucy(&scene_name(path), &fs::read_to_string(path)?)
}

/// Writes a scene back in `frame agent x y` form with six decimals.
pub fn write_ethucy(scene: &Scene) -> String {
    let mut rows: Vec<(i64, usize, &str, Point)> = scene
        .tracks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| {
            t.frames
                .iter()
                .map(move |f| (f.0, ti, t.agent_id.as_str(), f.1))
        })
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut out = String::new();
    for (frame, _, agent, p) in rows {
        let _ = writeln!(out, "{frame}\t{agent}\t{:.6}\t{:.6}", p[0], p[1]);
    }
    out
}

/// Parses Stanford-Drone style annotations:
/// `track xmin ymin xmax ymax frame lost occluded generated "label"`.
/// Positions are box centres; rows flagged lost are dropped.
pub fn parse_sdd(name: &str, text: &str) -> Result<Scene> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 10 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 10 columns, found {}", toks.len()),
            });
        }
        let xmin = parse_num(toks[1], line, "xmin")?;
        let ymin = parse_num(toks[2], line, "ymin")?;
        let xmax = parse_num(toks[3], line, "xmax")?;
        let ymax = parse_num(toks[4], line, "ymax")?;
        let frame = parse_frame(toks[5], line)?;
        let lost = parse_num(toks[6], line, "lost flag")?;
        // occluded / generated flags are validated but unused
        parse_num(toks[7], line, "occluded flag")?;
        parse_num(toks[8], line, "generated flag")?;
        if lost != 0.0 {
            continue;
        }
        let label = toks[9..].join(" ").trim_matches('"').to_string();
        rows.push(RawRow {
            line,
            frame,
            agent: normalize_id(toks[0]),
            pos: [(xmin + xmax) / 2.0, (ymin + ymax) / 2.0],
            class: Some(label),
        });
    }
    group_rows(name, rows, 30.0, Unit::Pixels)
}

pub fn load_sdd(path: &Path) -> Result<Scene> {
    parse_sdd(&scene_name(path), &fs::read_to_string(path)?)
}

fn scene_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Sliding windows of `t_obs + t_fut` consecutive steps, advancing `stride`
/// steps at a time. Agents missing any step are left out of that window and
/// windows with no agents are dropped.
pub fn make_windows(
    scene: &Scene,
    t_obs: usize,
    t_fut: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if t_obs < 2 || t_fut < 1 || stride < 1 {
        return Err(invalid(format!(
            "need t_obs >= 2, t_fut >= 1, stride >= 1 (got {t_obs}, {t_fut}, {stride})"
        )));
    }
    let (Some(min), Some(max)) = (scene.min_frame(), scene.max_frame()) else {
        return Ok(Vec::new());
    };
    let step = scene.frame_step();
    let len = t_obs + t_fut;
    let last_index = (max - min) / step;
    let mut out = Vec::new();
    let mut start = 0i64;
    while start + len as i64 - 1 <= last_index {
        let f0 = min + start * step;
        let mut w = Window {
            scene: scene.name.clone(),
            start_frame: f0,
            agent_ids: Vec::new(),
            observed: Vec::new(),
            future: Vec::new(),
        };
        for t in &scene.tracks {
            let Some(i0) = t.position_at(f0) else {
                continue;
            };
            if i0 + len > t.frames.len() {
                continue;
            }
            let span = &t.frames[i0..i0 + len];
            if span
                .iter()
                .enumerate()
                .any(|(j, f)| f.0 != f0 + j as i64 * step)
            {
                continue;
            }
            w.agent_ids.push(t.agent_id.clone());
            w.observed.push(span[..t_obs].iter().map(|f| f.1).collect());
            w.future.push(span[t_obs..].iter().map(|f| f.1).collect());
        }
        if !w.agent_ids.is_empty() {
            out.push(w);
        }
        start += stride as i64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Ethucy,
    Sdd,
}

pub fn load_scene(path: &Path, format: DatasetFormat) -> Result<Scene> {
    match format {
        DatasetFormat::Ethucy => load_ethucy(path),
        DatasetFormat::Sdd => load_sdd(path),
    }
}

/// Train/val/test scene files, stored as a flat TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SplitManifest {
    #[serde(default)]
    pub format: DatasetFormat,
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub val: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
}

impl SplitManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every file except the one whose stem is `held_out` trains; the
    /// held-out file is the test split.
    pub fn leave_one_out(files: &[PathBuf], held_out: &str, format: DatasetFormat) -> Result<Self> {
        let (test, train): (Vec<_>, Vec<_>) = files
            .iter()
            .cloned()
            .partition(|p| scene_name(p) == held_out);
        if test.is_empty() {
            return Err(invalid(format!("no scene named `{held_out}` to hold out")));
        }
        Ok(Self {
            format,
            train,
            val: Vec::new(),
            test,
        })
    }
}

/// One behavior family for [`gen_synthetic`]. Speeds are in scene units per
/// step, turn rates in radians per step, noise is the standard deviation of
/// isotropic position jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorModeSpec {
    pub name: String,
    pub speed: (f64, f64),
    pub turn_rate: (f64, f64),
    pub noise: f64,
}

impl BehaviorModeSpec {
    pub fn new(name: &str, speed: (f64, f64), turn_rate: (f64, f64), noise: f64) -> Self {
        Self {
            name: name.into(),
            speed,
            turn_rate,
            noise,
        }
    }

    /// slow-walker, fast-linear and curved-rider.
    pub fn default_modes() -> Vec<Self> {
        vec![
            Self::new("slow-walker", (0.2, 0.4), (0.0, 0.0), 0.04),
            Self::new("fast-linear", (1.2, 1.6), (0.0, 0.0), 0.01),
            Self::new("curved-rider", (0.8, 1.2), (0.3, 0.4), 0.01),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Frames per track; one window of this length covers a group exactly.
    pub track_len: usize,
    /// Agents sharing a time slot (and hence a window).
    pub group_size: usize,
    /// Side of the square that group origins are drawn from.
    pub arena: f64,
    /// Side of the square agents are scattered in around their group origin.
    pub spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            track_len: 20,
            group_size: 5,
            arena: 50.0,
            spread: 10.0,
        }
    }
}

/// Synthetic multi-behavior scene with `n_agents` agents per mode, using
/// [`SyntheticConfig::default`]. Returns the generator's mode index for
/// every track, in track order.
pub fn gen_synthetic(
    modes: &[BehaviorModeSpec],
    n_agents: usize,
    seed: u64,
) -> Result<(Scene, Vec<usize>)> {
    gen_synthetic_with(modes, n_agents, seed, &SyntheticConfig::default())
}

pub fn gen_synthetic_with(
    modes: &[BehaviorModeSpec],
    n_agents: usize,
    seed: u64,
    cfg: &SyntheticConfig,
) -> Result<(Scene, Vec<usize>)> {
    if n_agents < 1 {
        return Err(invalid("n_agents must be at least 1"));
    }
    if modes.is_empty() {
        return Err(invalid("need at least one behavior mode"));
    }
    if cfg.track_len < 2 || cfg.group_size < 1 {
        return Err(invalid("track_len must be >= 2 and group_size >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..modes.len() * n_agents)
        .map(|i| i % modes.len())
        .collect();
    labels.shuffle(&mut rng);

    let mut tracks = Vec::with_capacity(labels.len());
    let mut origin = [0.0, 0.0];
    for (i, &mode) in labels.iter().enumerate() {
        let group = i / cfg.group_size;
        if i % cfg.group_size == 0 {
            origin = [
                rng.random_range(0.0..cfg.arena),
                rng.random_range(0.0..cfg.arena),
            ];
        }
        let spec = &modes[mode];
        let f0 = (group * cfg.track_len) as i64;
        let frames = simulate(spec, origin, cfg, f0, &mut rng);
        tracks.push(AgentTrack::new(i.to_string(), frames)?);
    }
    let scene = Scene {
        name: format!("synthetic-{seed}"),
        tracks,
        frame_rate: 2.5,
        unit: Unit::Meters,
    };
    Ok((scene, labels))
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn simulate(
    spec: &BehaviorModeSpec,
    origin: Point,
    cfg: &SyntheticConfig,
    f0: i64,
    rng: &mut ChaCha8Rng,
) -> Vec<(i64, Point)> {
    let half = cfg.spread / 2.0;
    let mut pos = [
        origin[0] + rng.random_range(-half..=half),
        origin[1] + rng.random_range(-half..=half),
    ];
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = uniform(rng, spec.speed);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let turn = sign * uniform(rng, spec.turn_rate);
    let jitter = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut out = Vec::with_capacity(cfg.track_len);
    for j in 0..cfg.track_len {
        let (dx, dy) = if spec.noise > 0.0 {
            (jitter.sample(rng), jitter.sample(rng))
        } else {
            (0.0, 0.0)
        };
        out.push((f0 + j as i64, [pos[0] + dx, pos[1] + dy]));
        pos = [
            pos[0] + speed * heading.cos(),
            pos[1] + speed * heading.sin(),
        ];
        heading += turn;
    }
    out
}

/// Generator labels keyed by agent id.
pub fn label_map(scene: &Scene, labels: &[usize]) -> HashMap<String, usize> {
    scene
        .tracks
        .iter()
        .zip(labels)
        .map(|(t, &l)| (t.agent_id.clone(), l))
        .collect()
}
