//! Cascaded training: behavior pretraining, deep clustering, then joint
//! fine-tuning of clustering and prediction. Also holds the run
//! configuration and the trained model bundle.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::checkpoint::Archive;
use crate::clustering::{
    cluster_loss_var, dec_train, kmeans_init, select_rows, soft_assign, soft_assign_var,
    target_distribution, ClusterModel, DecConfig, Distance,
};
use crate::data::{Point, Window};
use crate::error::{invalid, Error, Result};
use crate::geometry::{geometric_sequence, GeometricSequence};
use crate::graphs::{goal_velocity, relative_velocities};
use crate::params::{grads_finite, Adam, ParamStore};
use crate::predictor::{
    nll_loss_var, relative_targets, sample_one, GaussianTrack, GoalRepository, Predictor,
    PredictorConfig,
};
use crate::pseudolabel::{gumbel_noise, gumbel_softmax_st, hard_labels, onehot_rows};
use crate::softdtw::{vrnn_softdtw_loss_var, SoftDtwConfig};
use crate::vrnn::{batch_steps, elbo_loss, Noise, Vrnn, VrnnConfig};

/// Which component is removed for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// k-means centers straight into fine-tuning, no clustering refinement.
    NoDeepClustering,
    /// Soft assignments are fed to the predictor instead of sampled one-hots.
    NoGumbel,
    /// Labels are a plain argmax and only the predictor is fine-tuned.
    NoEndToEnd,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "no-deep-clustering" => Ok(Self::NoDeepClustering),
            "no-gumbel" => Ok(Self::NoGumbel),
            "no-end-to-end" => Ok(Self::NoEndToEnd),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub gamma: f64,
    pub tau: f64,
    /// Weight of the prediction loss against the clustering loss.
    pub lambda: f64,
    pub lr_pretrain: f64,
    pub lr_cluster: f64,
    pub lr_finetune: f64,
    pub epochs_pretrain: usize,
    pub epochs_cluster: usize,
    pub epochs_finetune: usize,
    pub seed: u64,
    /// Multiplier applied to raw coordinates.
    pub scale: f64,
    pub t_obs: usize,
    pub t_fut: usize,
    pub hidden: usize,
    pub latent: usize,
    pub embed: usize,
    pub channels: usize,
    pub goal_candidates: usize,
    pub patience: usize,
    pub distance: Distance,
    pub ablation: Ablation,
    /// Agents per step in the first two stages.
    pub batch: usize,
    /// Windows per step in fine-tuning.
    pub window_batch: usize,
    /// Epochs between clustering target refreshes.
    pub refresh_interval: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            gamma: 0.1,
            tau: 1.0,
            lambda: 0.5,
            lr_pretrain: 1e-3,
            lr_cluster: 1e-3,
            lr_finetune: 1e-4,
            epochs_pretrain: 100,
            epochs_cluster: 20,
            epochs_finetune: 30,
            seed: 0,
            scale: 1.0,
            t_obs: 8,
            t_fut: 12,
            hidden: 64,
            latent: 32,
            embed: 32,
            channels: 16,
            goal_candidates: 20,
            patience: 10,
            distance: Distance::Squared,
            ablation: Ablation::None,
            batch: 64,
            window_batch: 4,
            refresh_interval: 1,
            eval_samples: 20,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("tau", self.tau),
            ("lr_pretrain", self.lr_pretrain),
            ("lr_cluster", self.lr_cluster),
            ("lr_finetune", self.lr_finetune),
            ("scale", self.scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.t_obs < 3 {
            return bad("t_obs must be at least 3");
        }
        for (name, v) in [
            ("t_fut", self.t_fut),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("embed", self.embed),
            ("channels", self.channels),
            ("goal_candidates", self.goal_candidates),
            ("batch", self.batch),
            ("window_batch", self.window_batch),
            ("refresh_interval", self.refresh_interval),
            ("eval_samples", self.eval_samples),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn vrnn(&self) -> VrnnConfig {
        VrnnConfig {
            hidden: self.hidden,
            latent: self.latent,
            embed: self.embed,
        }
    }

    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            t_obs: self.t_obs,
            t_fut: self.t_fut,
            k: self.k,
            channels: self.channels,
        }
    }

    pub fn softdtw(&self) -> Result<SoftDtwConfig> {
        SoftDtwConfig::new(self.gamma)
    }
}

/// Independent random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_FINETUNE: u64 = 3;

/// Per-dimension standardization of behavior features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScaler {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for FeatureScaler {
    fn default() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }
}

impl FeatureScaler {
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a GeometricSequence>) -> Self {
        let mut n = 0.0;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for s in seqs {
            for st in &s.steps {
                n += 1.0;
                for k in 0..2 {
                    sum[k] += st[k];
                    sq[k] += st[k] * st[k];
                }
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mean = [sum[0] / n, sum[1] / n];
        let std = [0, 1].map(|k| (sq[k] / n - mean[k] * mean[k]).max(0.0).sqrt().max(1e-6));
        Self { mean, std }
    }

    pub fn apply(&self, s: &GeometricSequence) -> GeometricSequence {
        GeometricSequence {
            steps: s
                .steps
                .iter()
                .map(|st| {
                    [
                        (st[0] - self.mean[0]) / self.std[0],
                        (st[1] - self.mean[1]) / self.std[1],
                    ]
                })
                .collect(),
        }
    }

    fn to_archive(self, archive: &mut Archive) {
        archive.insert(
            "scaler",
            ndarray::array![[self.mean[0], self.mean[1]], [self.std[0], self.std[1]]],
        );
    }

    fn from_archive(archive: &Archive) -> Result<Self> {
        let m = archive.require("scaler")?;
        if m.dim() != (2, 2) {
            return Err(Error::State("scaler must be 2 × 2".into()));
        }
        Ok(Self {
            mean: [m[[0, 0]], m[[0, 1]]],
            std: [m[[1, 0]], m[[1, 1]]],
        })
    }
}

/// A window plus its per-agent behavior features.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWindow {
    pub window: Window,
    pub geo: Vec<GeometricSequence>,
}

impl PreparedWindow {
    pub fn n_agents(&self) -> usize {
        self.window.n_agents()
    }

    pub fn last_observed(&self) -> Vec<Point> {
        self.window
            .observed
            .iter()
            .map(|o| o[o.len() - 1])
            .collect()
    }

    /// Goal velocities from the true endpoints.
    pub fn true_goals(&self) -> Vec<Point> {
        self.window
            .observed
            .iter()
            .zip(&self.window.future)
            .map(|(o, f)| goal_velocity(o[o.len() - 1], f[f.len() - 1], f.len()))
            .collect()
    }
}

/// Scales coordinates and computes behavior features over observations.
pub fn prepare_windows(windows: &[Window], cfg: &TrainConfig) -> Result<Vec<PreparedWindow>> {
    windows
        .iter()
        .map(|w| {
            if w.t_obs() != cfg.t_obs || w.t_fut() != cfg.t_fut {
                return Err(invalid(format!(
                    "window at frame {} has {}+{} steps, config expects {}+{}",
                    w.start_frame,
                    w.t_obs(),
                    w.t_fut(),
                    cfg.t_obs,
                    cfg.t_fut
                )));
            }
            let s = cfg.scale;
            let scale = |v: &Vec<Vec<Point>>| -> Vec<Vec<Point>> {
                v.iter()
                    .map(|t| t.iter().map(|p| [p[0] * s, p[1] * s]).collect())
                    .collect()
            };
            let window = Window {
                observed: scale(&w.observed),
                future: scale(&w.future),
                ..w.clone()
            };
            let geo = window
                .observed
                .iter()
                .map(|o| geometric_sequence(o))
                .collect::<Result<_>>()?;
            Ok(PreparedWindow { window, geo })
        })
        .collect()
}

/// Everything needed for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub cfg: TrainConfig,
    pub scaler: FeatureScaler,
    pub vrnn: Vrnn,
    pub clusters: ClusterModel,
    pub predictor: Predictor,
    pub goals: GoalRepository,
}

/// Samples and labels produced for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub q: Mat,
    pub labels: Vec<usize>,
    /// `[sample][agent][step]` absolute positions.
    pub samples: Vec<Vec<Vec<Point>>>,
    /// `[sample][agent]` Gaussian parameters behind each sample.
    pub tracks: Vec<Vec<GaussianTrack>>,
    /// `[sample][agent]` endpoint used for each sample.
    pub endpoints: Vec<Vec<Point>>,
}

/// Seed for one `(window, sample)` pair, independent of how many samples
/// are drawn in total.
pub fn sample_seed(seed: u64, window: u64, sample: u64) -> u64 {
    let mut x = seed
        ^ window.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ sample.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Bundle {
    pub fn steps(&self, pw: &PreparedWindow) -> Result<Vec<Mat>> {
        batch_steps(
            &pw.geo
                .iter()
                .map(|g| self.scaler.apply(g))
                .collect::<Vec<_>>(),
        )
    }

    /// Deterministic soft assignments for the agents of a window.
    pub fn assign(&self, pw: &PreparedWindow) -> Result<Mat> {
        soft_assign(
            &self.vrnn.latents_from_steps(&self.steps(pw)?)?,
            &self.clusters,
        )
    }

    /// Label block fed to the predictor at inference.
    pub fn label_block(&self, q: &Mat) -> Mat {
        match self.cfg.ablation {
            Ablation::NoGumbel => q.clone(),
            _ => onehot_rows(q),
        }
    }

    /// `n_samples` futures per agent; sample `s` uses retrieved goal
    /// candidate `s mod K`.
    pub fn predict(
        &self,
        pw: &PreparedWindow,
        n_samples: usize,
        seed: u64,
        window_index: u64,
    ) -> Result<WindowPrediction> {
        if n_samples == 0 {
            return Err(invalid("n_samples must be at least 1"));
        }
        let q = self.assign(pw)?;
        let labels = hard_labels(&q);
        let block = self.label_block(&q);
        let last = pw.last_observed();
        let candidates = pw
            .window
            .observed
            .iter()
            .map(|o| self.goals.retrieve_goal(o, self.cfg.goal_candidates))
            .collect::<Result<Vec<_>>>()?;
        let t_fut = self.cfg.t_fut;
        let mut out = WindowPrediction {
            q,
            labels,
            samples: Vec::with_capacity(n_samples),
            tracks: Vec::with_capacity(n_samples),
            endpoints: Vec::with_capacity(n_samples),
        };
        let mut cache: Vec<Option<Vec<GaussianTrack>>> = vec![None; self.cfg.goal_candidates];
        for s in 0..n_samples {
            let ends: Vec<Point> = candidates.iter().map(|c| c[s % c.len()]).collect();
            let goals: Vec<Point> = last
                .iter()
                .zip(&ends)
                .map(|(&l, &e)| goal_velocity(l, e, t_fut))
                .collect();
            let slot = s % self.cfg.goal_candidates;
            if cache[slot].is_none()
                || candidates
                    .iter()
                    .any(|c| c.len() < self.cfg.goal_candidates)
            {
                let vel = relative_velocities(&pw.window.observed, &goals)?;
                cache[slot] = Some(self.predictor.predict(&vel, &block)?);
            }
            let tracks = cache[slot].clone().expect("filled above");
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, window_index, s as u64));
            let sample = tracks
                .iter()
                .zip(&goals)
                .zip(&last)
                .map(|((tr, &g), &l)| sample_one(tr, g, l, &mut rng))
                .collect();
            out.samples.push(sample);
            out.tracks.push(tracks);
            out.endpoints.push(ends);
        }
        Ok(out)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.meta.insert("config".into(), self.cfg.to_toml()?);
        self.scaler.to_archive(&mut a);
        self.vrnn.to_archive(&mut a);
        self.clusters.to_archive(&mut a);
        self.predictor.to_archive(&mut a);
        self.goals.to_archive(&mut a);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let cfg = TrainConfig::from_toml(
            a.meta
                .get("config")
                .ok_or_else(|| Error::State("archive has no config".into()))?,
        )?;
        Ok(Self {
            cfg,
            scaler: FeatureScaler::from_archive(a)?,
            vrnn: Vrnn::from_archive(a)?,
            clusters: ClusterModel::from_archive(a)?,
            predictor: Predictor::from_archive(a)?,
            goals: GoalRepository::from_archive(a)?,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: &'static str,
    pub epoch: usize,
    pub loss: f64,
    pub pred_loss: Option<f64>,
    pub cluster_loss: Option<f64>,
    pub ade: Option<f64>,
    pub fde: Option<f64>,
}

impl EpochLog {
    fn new(stage: &'static str, epoch: usize, loss: f64) -> Self {
        Self {
            stage,
            epoch,
            loss,
            pred_loss: None,
            cluster_loss: None,
            ade: None,
            fde: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub pretrain: bool,
    pub cluster: bool,
    pub finetune: bool,
}

impl Stages {
    pub const ALL: Self = Self {
        pretrain: true,
        cluster: true,
        finetune: true,
    };

    /// Parses a subset of `a`, `b`, `c`, e.g. `"ab"` or `"a,c"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Self {
            pretrain: false,
            cluster: false,
            finetune: false,
        };
        for ch in s.chars().filter(|c| *c != ',') {
            match ch.to_ascii_lowercase() {
                'a' => out.pretrain = true,
                'b' => out.cluster = true,
                'c' => out.finetune = true,
                other => return Err(Error::Config(format!("unknown stage `{other}`"))),
            }
        }
        Ok(out)
    }
}

fn diverged(stage: &str, epoch: usize, last_good: Archive) -> Error {
    Error::Diverged {
        stage: stage.into(),
        epoch,
        last_good: Box::new(last_good),
    }
}

fn vrnn_archive(v: &Vrnn) -> Archive {
    let mut a = Archive::new();
    v.to_archive(&mut a);
    a
}

/// Behavior pretraining on soft-DTW reconstruction plus the negative ELBO.
/// `steps` is step-major input for every training agent.
pub fn stage_a_pretrain(
    vrnn: &mut Vrnn,
    steps: &[Mat],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<f64>> {
    let n = steps.first().map_or(0, Mat::nrows);
    if n == 0 {
        return Err(invalid("no training agents"));
    }
    let sdtw = cfg.softdtw()?;
    let t = steps.len();
    let mut rng = stream_rng(cfg.seed, STREAM_PRETRAIN);
    let mut opt = Adam::new(cfg.lr_pretrain);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs_pretrain);
    for epoch in 0..cfg.epochs_pretrain {
        let last_good = vrnn_archive(vrnn);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let part = select_rows(steps, chunk);
            let targets: Vec<Mat> = (0..chunk.len())
                .map(|i| Mat::from_shape_fn((t, 2), |(s, k)| part[s][[i, k]]))
                .collect();
            let tape = Tape::new();
            let b = vrnn.params.bind(&tape);
            let trace = vrnn.forward(&tape, &b, &part, Noise::Sampled(&mut rng))?;
            let decoded = trace.decoded_per_agent(&tape);
            let loss = vrnn_softdtw_loss_var(&tape, &decoded, &targets, t, sdtw)?
                + elbo_loss(&trace, &part);
            let value = loss.item();
            let grads = b.grads(&tape.backward(loss));
            if !value.is_finite() || !grads_finite(&grads) {
                return Err(diverged("pretrain", epoch, last_good));
            }
            total += value * chunk.len() as f64;
            opt.step(&mut vrnn.params, &grads);
        }
        let mean = total / n as f64;
        history.push(mean);
        log(&EpochLog::new("pretrain", epoch, mean));
    }
    Ok(history)
}

/// k-means initialization followed (unless ablated) by deep clustering.
pub fn stage_b_cluster(
    vrnn: &mut Vrnn,
    steps: &[Mat],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<ClusterModel> {
    let z = vrnn.latents_from_steps(steps)?;
    let mut model = kmeans_init(&z, cfg.k, cfg.seed)?;
    model.distance = cfg.distance;
    if cfg.ablation == Ablation::NoDeepClustering {
        return Ok(model);
    }
    let dc = DecConfig {
        epochs: cfg.epochs_cluster,
        lr: cfg.lr_cluster,
        refresh_interval: cfg.refresh_interval,
        batch: cfg.batch,
        seed: cfg.seed,
    };
    let report = dec_train(vrnn, steps, &mut model, &dc)?;
    for (epoch, &loss) in report.losses.iter().enumerate() {
        log(&EpochLog::new("cluster", epoch, loss));
    }
    Ok(model)
}

/// Step-major behavior input of every agent across `windows`, with each
/// window's first row.
pub fn agent_steps(
    windows: &[PreparedWindow],
    scaler: &FeatureScaler,
) -> Result<(Vec<Mat>, Vec<usize>)> {
    let mut offsets = Vec::with_capacity(windows.len());
    let mut seqs = Vec::new();
    for w in windows {
        offsets.push(seqs.len());
        seqs.extend(w.geo.iter().map(|g| scaler.apply(g)));
    }
    Ok((batch_steps(&seqs)?, offsets))
}

/// Joint fine-tuning of encoder, centers and predictor on
/// `2·(λ·L_pred + (1 − λ)·L_cluster)`, so `λ = 0.5` gives the plain sum.
/// Early-stops on validation ADE when `val` is nonempty.
pub fn stage_c_finetune(
    bundle: &mut Bundle,
    train: &[PreparedWindow],
    val: &[PreparedWindow],
    log: &mut dyn FnMut(&EpochLog),
) -> Result<()> {
    let cfg = bundle.cfg.clone();
    let (all_steps, offsets) = agent_steps(train, &bundle.scaler)?;
    let window_steps = train
        .iter()
        .map(|w| bundle.steps(w))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Mat> = train
        .iter()
        .map(|w| relative_targets(&w.last_observed(), &w.window.future, &w.true_goals()))
        .collect();
    let mut rng = stream_rng(cfg.seed, STREAM_FINETUNE);
    let mut opt_pred = Adam::new(cfg.lr_finetune);
    let mut opt_vrnn = Adam::new(cfg.lr_finetune);
    let mut opt_centers = Adam::new(cfg.lr_finetune);
    let mut centers = ParamStore::new();
    centers.insert("centers", bundle.clusters.centers.clone());
    let end_to_end = cfg.ablation != Ablation::NoEndToEnd;
    let train_centers = end_to_end && cfg.lambda < 1.0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Bundle)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs_finetune {
        let last_good = bundle.to_archive()?;
        let q_all = soft_assign(
            &bundle.vrnn.latents_from_steps(&all_steps)?,
            &bundle.clusters,
        )?;
        let target = target_distribution(&q_all).p;
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_pred, mut sum_clu, mut agents) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.window_batch) {
            let tape = Tape::new();
            let bv = bundle.vrnn.params.bind(&tape);
            let bp = bundle.predictor.params.bind(&tape);
            let bc = centers.bind(&tape);
            let mut terms = Vec::with_capacity(chunk.len());
            for &w in chunk {
                let pw = &train[w];
                let n = pw.n_agents();
                let z = bundle
                    .vrnn
                    .forward(&tape, &bv, &window_steps[w], Noise::Mean)?
                    .latent();
                let q = soft_assign_var(
                    z,
                    bc.get("centers"),
                    bundle.clusters.alpha,
                    bundle.clusters.distance,
                );
                let labels = match cfg.ablation {
                    Ablation::NoGumbel => q,
                    Ablation::NoEndToEnd => tape.constant(onehot_rows(&q.value())),
                    _ => gumbel_softmax_st(q.ln(), &gumbel_noise(&mut rng, n, cfg.k), cfg.tau)?.0,
                };
                let vel = relative_velocities(&pw.window.observed, &pw.true_goals())?;
                let raw = bundle.predictor.forward(&bp, &vel, labels)?;
                let lp = nll_loss_var(raw, &targets[w]).scale(1.0 / n as f64);
                let p = target
                    .slice(ndarray::s![offsets[w]..offsets[w] + n, ..])
                    .to_owned();
                let lc = cluster_loss_var(q, &p).scale(1.0 / n as f64);
                sum_pred += lp.item() * n as f64;
                sum_clu += lc.item() * n as f64;
                agents += n;
                terms.push(if end_to_end {
                    (lp.scale(cfg.lambda) + lc.scale(1.0 - cfg.lambda)).scale(2.0)
                } else {
                    lp
                });
            }
            let loss = tape.concat_cols(&terms).mean();
            let value = loss.item();
            let grads = tape.backward(loss);
            let (gp, gv, gc) = (bp.grads(&grads), bv.grads(&grads), bc.grads(&grads));
            if !value.is_finite() || !grads_finite(&gp) || !grads_finite(&gv) || !grads_finite(&gc)
            {
                return Err(diverged("finetune", epoch, last_good));
            }
            sum_loss += value * chunk.len() as f64;
            opt_pred.step(&mut bundle.predictor.params, &gp);
            if end_to_end {
                opt_vrnn.step(&mut bundle.vrnn.params, &gv);
            }
            if train_centers {
                opt_centers.step(&mut centers, &gc);
                bundle
                    .clusters
                    .centers
                    .assign(centers.get("centers").expect("inserted above"));
            }
        }
        let mut entry = EpochLog::new("finetune", epoch, sum_loss / train.len() as f64);
        entry.pred_loss = Some(sum_pred / agents as f64);
        entry.cluster_loss = Some(sum_clu / agents as f64);
        let mut stop = false;
        if !val.is_empty() {
            let report = crate::eval::evaluate(bundle, val, cfg.eval_samples, cfg.seed)?;
            entry.ade = Some(report.ade);
            entry.fde = Some(report.fde);
            if best.as_ref().is_none_or(|(b, _)| report.ade < *b) {
                best = Some((report.ade, bundle.clone()));
                stale = 0;
            } else {
                stale += 1;
                stop = stale >= cfg.patience;
            }
        }
        log(&entry);
        if stop {
            break;
        }
    }
    if let Some((_, b)) = best {
        *bundle = b;
    }
    Ok(())
}

/// Runs the selected stages in order. Skipped stages keep their
/// initialization (k-means centers still get fitted when clustering is
/// skipped, since fine-tuning and inference need them).
pub fn train(
    train: &[Window],
    val: &[Window],
    cfg: &TrainConfig,
    stages: Stages,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Bundle> {
    train_with_checkpoints(train, val, cfg, stages, log, &mut |_, _| Ok(()))
}

/// [`train`], handing an archive to `checkpoint` after every stage that
/// ran: `stage_a` holds the behavior model, `stage_b` adds the cluster
/// centers and `stage_c` is the full bundle.
pub fn train_with_checkpoints(
    train: &[Window],
    val: &[Window],
    cfg: &TrainConfig,
    stages: Stages,
    log: &mut dyn FnMut(&EpochLog),
    checkpoint: &mut dyn FnMut(&str, &Archive) -> Result<()>,
) -> Result<Bundle> {
    cfg.validate()?;
    let train = prepare_windows(train, cfg)?;
    let val = prepare_windows(val, cfg)?;
    if train.is_empty() {
        return Err(invalid("no training windows"));
    }
    let scaler = FeatureScaler::fit(train.iter().flat_map(|w| &w.geo));
    let (steps, _) = agent_steps(&train, &scaler)?;
    let mut init = stream_rng(cfg.seed, STREAM_INIT);
    let mut vrnn = Vrnn::new(cfg.vrnn(), &mut init);
    let predictor = Predictor::new(cfg.predictor(), &mut init);
    if stages.pretrain {
        stage_a_pretrain(&mut vrnn, &steps, cfg, log)?;
        checkpoint("stage_a", &vrnn_archive(&vrnn))?;
    }
    let clusters = if stages.cluster {
        let m = stage_b_cluster(&mut vrnn, &steps, cfg, log)?;
        let mut a = vrnn_archive(&vrnn);
        m.to_archive(&mut a);
        checkpoint("stage_b", &a)?;
        m
    } else {
        let mut m = kmeans_init(&vrnn.latents_from_steps(&steps)?, cfg.k, cfg.seed)?;
        m.distance = cfg.distance;
        m
    };
    let mut goals = GoalRepository::new();
    for w in &train {
        for (o, f) in w.window.observed.iter().zip(&w.window.future) {
            goals.add(o, f[f.len() - 1]);
        }
    }
    let mut bundle = Bundle {
        cfg: cfg.clone(),
        scaler,
        vrnn,
        clusters,
        predictor,
        goals,
    };
    if stages.finetune {
        stage_c_finetune(&mut bundle, &train, &val, log)?;
        checkpoint("stage_c", &bundle.to_archive()?)?;
    }
    Ok(bundle)
}

/// Generator labels of every agent in `windows`, in window then agent order.
pub fn window_labels(
    windows: &[Window],
    labels: &std::collections::HashMap<String, usize>,
) -> Result<Vec<usize>> {
    windows
        .iter()
        .flat_map(|w| &w.agent_ids)
        .map(|id| {
            labels
                .get(id)
                .copied()
                .ok_or_else(|| invalid(format!("no label for agent `{id}`")))
        })
        .collect()
}
