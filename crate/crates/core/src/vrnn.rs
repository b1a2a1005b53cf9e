//! Variational recurrent behavior encoder.
//!
//! Every map is a single affine layer followed by a nonlinearity. Standard
//! deviations go through softplus. Rows of every batched tensor are agents,
//! and no op mixes rows, so an agent's outputs never depend on the rest of
//! the batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Mat, Tape, Var};
use crate::checkpoint::Archive;
use crate::error::{invalid, Error, Result};
use crate::geometry::GeometricSequence;
use crate::params::{Bound, ParamStore};

pub const FEATURE_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VrnnConfig {
    pub hidden: usize,
    pub latent: usize,
    /// Width of the feature and latent embeddings.
    pub embed: usize,
}

impl Default for VrnnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 32,
            embed: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vrnn {
    pub cfg: VrnnConfig,
    pub params: ParamStore,
}

/// Posterior, prior and reconstruction parameters at one step.
#[derive(Clone, Copy)]
pub struct StepDists<'t> {
    pub mu_z: Var<'t>,
    pub sigma_z: Var<'t>,
    pub mu_0: Var<'t>,
    pub sigma_0: Var<'t>,
    pub mu_g: Var<'t>,
    pub sigma_g: Var<'t>,
}

/// Tape-level result of [`Vrnn::forward`].
pub struct Trace<'t> {
    pub steps: Vec<StepDists<'t>>,
    pub z: Vec<Var<'t>>,
    pub hidden: Vec<Var<'t>>,
}

impl<'t> Trace<'t> {
    /// Final-step posterior mean, the clustering latent (`N × Z`).
    pub fn latent(&self) -> Var<'t> {
        self.steps.last().expect("nonempty trace").mu_z
    }

    /// Decoded means regrouped per agent, each `T × 2`.
    pub fn decoded_per_agent(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        let n = self.steps[0].mu_g.shape().0;
        let t = self.steps.len();
        let stacked = tape.concat_rows(&self.steps.iter().map(|s| s.mu_g).collect::<Vec<_>>());
        (0..n)
            .map(|i| {
                let idx: Vec<usize> = (0..t).map(|s| s * n + i).collect();
                stacked.gather_rows(&idx)
            })
            .collect()
    }
}

/// Where the reparameterization noise comes from.
pub enum Noise<'a> {
    /// `z_t = μ_z,t`; fully deterministic.
    Mean,
    Sampled(&'a mut ChaCha8Rng),
    /// One `N × Z` standard-normal draw per step.
    Fixed(&'a [Mat]),
}

/// Plain-array view of one step's distribution parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams {
    pub mu_z: Mat,
    pub sigma_z: Mat,
    pub mu_0: Mat,
    pub sigma_0: Mat,
    pub mu_g: Mat,
    pub sigma_g: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSummary {
    /// `N × Z` final-step posterior means.
    pub z: Mat,
    /// Sampled latents per step.
    pub step_latents: Vec<Mat>,
    pub hiddens: Vec<Mat>,
}

/// Step-major batch: entry `t` is the `N × 2` matrix of every agent's `g_t`.
pub fn batch_steps(seqs: &[GeometricSequence]) -> Result<Vec<Mat>> {
    let Some(first) = seqs.first() else {
        return Err(invalid("empty batch"));
    };
    let t = first.len();
    if t == 0 {
        return Err(invalid("empty geometric sequence"));
    }
    if seqs.iter().any(|s| s.len() != t) {
        return Err(invalid("sequences in a batch must share one length"));
    }
    let mut out = Vec::with_capacity(t);
    for step in 0..t {
        let m = Mat::from_shape_fn((seqs.len(), FEATURE_DIM), |(i, k)| seqs[i].steps[step][k]);
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature at step {step}")));
        }
        out.push(m);
    }
    Ok(out)
}

impl Vrnn {
    pub fn new(cfg: VrnnConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, z, e) = (cfg.hidden, cfg.latent, cfg.embed);
        let mut p = ParamStore::new();
        p.init_linear("phi_g", FEATURE_DIM, e, rng);
        p.init_linear("phi_z", z, e, rng);
        p.init_linear("enc", e + h, h, rng);
        p.init_linear("enc_mu", h, z, rng);
        p.init_linear("enc_sigma", h, z, rng);
        p.init_linear("prior", h, h, rng);
        p.init_linear("prior_mu", h, z, rng);
        p.init_linear("prior_sigma", h, z, rng);
        p.init_linear("dec", e + h, h, rng);
        p.init_linear("dec_mu", h, FEATURE_DIM, rng);
        p.init_linear("dec_sigma", h, FEATURE_DIM, rng);
        for gate in ["r", "u", "n"] {
            p.init_linear(&format!("gru.x{gate}"), 2 * e, h, rng);
            p.init_linear(&format!("gru.h{gate}"), h, h, rng);
        }
        Self { cfg, params: p }
    }

    /// Same shapes as [`Vrnn::new`] with every entry set to zero.
    pub fn zeroed(cfg: VrnnConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut v = Self::new(cfg, &mut rng);
        for (_, m) in v.params.iter_mut() {
            m.fill(0.0);
        }
        v
    }

    pub fn to_archive(&self, archive: &mut Archive) {
        archive.put_params("vrnn", &self.params);
        archive
            .meta
            .insert("vrnn.hidden".into(), self.cfg.hidden.to_string());
        archive
            .meta
            .insert("vrnn.latent".into(), self.cfg.latent.to_string());
        archive
            .meta
            .insert("vrnn.embed".into(), self.cfg.embed.to_string());
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            archive
                .meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::State(format!("archive missing `{k}`")))
        };
        let cfg = VrnnConfig {
            hidden: get("vrnn.hidden")?,
            latent: get("vrnn.latent")?,
            embed: get("vrnn.embed")?,
        };
        let params = archive.params("vrnn");
        let expected = Self::zeroed(cfg);
        for (name, m) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.dim() == m.dim() => {}
                _ => {
                    return Err(Error::State(format!(
                        "vrnn parameter `{name}` missing or misshapen"
                    )))
                }
            }
        }
        Ok(Self { cfg, params })
    }

    /// Runs the recurrence on a fresh tape and copies the results out.
    pub fn run_sequence(
        &self,
        seqs: &[GeometricSequence],
        noise_seed: u64,
    ) -> Result<(LatentSummary, Vec<StepParams>)> {
        let steps = batch_steps(seqs)?;
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let trace = self.forward(&tape, &b, &steps, Noise::Sampled(&mut rng))?;
        let summary = LatentSummary {
            z: trace.latent().value(),
            step_latents: trace.z.iter().map(Var::value).collect(),
            hiddens: trace.hidden.iter().map(Var::value).collect(),
        };
        let params = trace
            .steps
            .iter()
            .map(|s| StepParams {
                mu_z: s.mu_z.value(),
                sigma_z: s.sigma_z.value(),
                mu_0: s.mu_0.value(),
                sigma_0: s.sigma_0.value(),
                mu_g: s.mu_g.value(),
                sigma_g: s.sigma_g.value(),
            })
            .collect();
        Ok((summary, params))
    }

    /// Deterministic clustering latents (`N × Z`), driving the recurrence
    /// with posterior means.
    pub fn latents(&self, seqs: &[GeometricSequence]) -> Result<Mat> {
        self.latents_from_steps(&batch_steps(seqs)?)
    }

    /// [`Vrnn::latents`] over step-major input.
    pub fn latents_from_steps(&self, steps: &[Mat]) -> Result<Mat> {
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        Ok(self
            .forward(&tape, &b, steps, Noise::Mean)?
            .latent()
            .value())
    }

    /// Full recurrence from `h_0 = 0` over step-major input.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        steps: &[Mat],
        mut noise: Noise<'_>,
    ) -> Result<Trace<'t>> {
        let Some(first) = steps.first() else {
            return Err(invalid("empty sequence"));
        };
        let n = first.nrows();
        let mut h = tape.constant(Mat::zeros((n, self.cfg.hidden)));
        let mut trace = Trace {
            steps: Vec::with_capacity(steps.len()),
            z: Vec::with_capacity(steps.len()),
            hidden: Vec::with_capacity(steps.len()),
        };
        for (t, g) in steps.iter().enumerate() {
            let g = tape.constant(g.clone());
            let eg = embed_g(b, g);
            let (mu_z, sigma_z) = encode_embedded(b, eg, h);
            let (mu_0, sigma_0) = prior_step(b, h);
            let z = match &mut noise {
                Noise::Mean => mu_z,
                Noise::Sampled(rng) => {
                    let eps =
                        Mat::from_shape_fn(mu_z.shape(), |_| StandardNormal.sample(&mut **rng));
                    reparameterize(mu_z, sigma_z, eps)
                }
                Noise::Fixed(draws) => {
                    let eps = draws
                        .get(t)
                        .ok_or_else(|| invalid(format!("no fixed noise for step {t}")))?;
                    reparameterize(mu_z, sigma_z, eps.clone())
                }
            };
            let ez = embed_z(b, z);
            let (mu_g, sigma_g) = decode_embedded(b, ez, h);
            h = recur_embedded(b, eg, ez, h);
            trace.steps.push(StepDists {
                mu_z,
                sigma_z,
                mu_0,
                sigma_0,
                mu_g,
                sigma_g,
            });
            trace.z.push(z);
            trace.hidden.push(h);
        }
        Ok(trace)
    }
}

fn embed_g<'t>(b: &Bound<'t>, g: Var<'t>) -> Var<'t> {
    b.linear("phi_g", g).tanh()
}

fn embed_z<'t>(b: &Bound<'t>, z: Var<'t>) -> Var<'t> {
    b.linear("phi_z", z).tanh()
}

fn gaussian_head<'t>(b: &Bound<'t>, prefix: &str, hidden: Var<'t>) -> (Var<'t>, Var<'t>) {
    let mu = b.linear(&format!("{prefix}_mu"), hidden);
    let sigma = b.linear(&format!("{prefix}_sigma"), hidden).softplus();
    (mu, sigma)
}

fn encode_embedded<'t>(b: &Bound<'t>, eg: Var<'t>, h_prev: Var<'t>) -> (Var<'t>, Var<'t>) {
    let x = eg.tape().concat_cols(&[eg, h_prev]);
    gaussian_head(b, "enc", b.linear("enc", x).tanh())
}

fn decode_embedded<'t>(b: &Bound<'t>, ez: Var<'t>, h_prev: Var<'t>) -> (Var<'t>, Var<'t>) {
    let x = ez.tape().concat_cols(&[ez, h_prev]);
    gaussian_head(b, "dec", b.linear("dec", x).tanh())
}

fn recur_embedded<'t>(b: &Bound<'t>, eg: Var<'t>, ez: Var<'t>, h_prev: Var<'t>) -> Var<'t> {
    let tape = eg.tape();
    let x = tape.concat_cols(&[eg, ez]);
    let r = (b.linear("gru.xr", x) + b.linear("gru.hr", h_prev)).sigmoid();
    let u = (b.linear("gru.xu", x) + b.linear("gru.hu", h_prev)).sigmoid();
    let n = (b.linear("gru.xn", x) + r * b.linear("gru.hn", h_prev)).tanh();
    let keep = u.scale(-1.0).add_scalar(1.0);
    keep * h_prev + u * n
}

fn check_finite(v: Var<'_>, what: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// Posterior `(μ_z, σ_z)` from the current feature and previous hidden state.
pub fn encode_step<'t>(b: &Bound<'t>, g_t: Var<'t>, h_prev: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    check_finite(g_t, "feature")?;
    check_finite(h_prev, "hidden state")?;
    Ok(encode_embedded(b, embed_g(b, g_t), h_prev))
}

/// `z = μ + σ ⊙ ε`
pub fn reparameterize<'t>(mu: Var<'t>, sigma: Var<'t>, noise: Mat) -> Var<'t> {
    mu + sigma.mul_const(noise)
}

/// Reconstruction `(μ_g, σ_g)` from a latent sample and previous hidden state.
pub fn decode_step<'t>(b: &Bound<'t>, z_t: Var<'t>, h_prev: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    check_finite(z_t, "latent")?;
    check_finite(h_prev, "hidden state")?;
    Ok(decode_embedded(b, embed_z(b, z_t), h_prev))
}

/// Learned prior `(μ_0, σ_0)` conditioned on the previous hidden state.
pub fn prior_step<'t>(b: &Bound<'t>, h_prev: Var<'t>) -> (Var<'t>, Var<'t>) {
    gaussian_head(b, "prior", b.linear("prior", h_prev).tanh())
}

/// GRU update over the embedded feature and latent.
pub fn recur<'t>(b: &Bound<'t>, g_t: Var<'t>, z_t: Var<'t>, h_prev: Var<'t>) -> Var<'t> {
    recur_embedded(b, embed_g(b, g_t), embed_z(b, z_t), h_prev)
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Elementwise `−log N(x | μ, σ²)`.
pub fn gaussian_nll<'t>(x: Var<'t>, mu: Var<'t>, sigma: Var<'t>) -> Var<'t> {
    let z = (x - mu) / sigma;
    sigma.ln() + z.square().scale(0.5).add_scalar(HALF_LN_2PI)
}

/// Elementwise closed-form `KL(N(μq, σq²) ‖ N(μp, σp²))`.
pub fn gaussian_kl<'t>(
    mu_q: Var<'t>,
    sigma_q: Var<'t>,
    mu_p: Var<'t>,
    sigma_p: Var<'t>,
) -> Var<'t> {
    let var_p = sigma_p.square();
    let num = sigma_q.square() + (mu_q - mu_p).square();
    (sigma_p.ln() - sigma_q.ln()) + (num / var_p).scale(0.5).add_scalar(-0.5)
}

/// Negative ELBO, summed over steps and feature dims, averaged over agents.
pub fn elbo_loss<'t>(trace: &Trace<'t>, steps: &[Mat]) -> Var<'t> {
    let tape = trace.steps[0].mu_g.tape();
    let n = steps[0].nrows() as f64;
    let mut terms = Vec::with_capacity(2 * steps.len());
    for (d, g) in trace.steps.iter().zip(steps) {
        let g = tape.constant(g.clone());
        terms.push(gaussian_nll(g, d.mu_g, d.sigma_g).sum());
        terms.push(gaussian_kl(d.mu_z, d.sigma_z, d.mu_0, d.sigma_0).sum());
    }
    tape.concat_cols(&terms).sum().scale(1.0 / n)
}

/// Reconstruction and KL parts of the negative ELBO from plain arrays,
/// summed over steps and dims, averaged over agents.
pub fn elbo_parts(params: &[StepParams], steps: &[Mat]) -> (f64, f64) {
    let n = steps[0].nrows() as f64;
    let mut rec = 0.0;
    let mut kl = 0.0;
    for (p, g) in params.iter().zip(steps) {
        for ((x, m), s) in g.iter().zip(&p.mu_g).zip(&p.sigma_g) {
            rec += s.ln() + 0.5 * ((x - m) / s).powi(2) + HALF_LN_2PI;
        }
        for (((mq, sq), mp), sp) in p.mu_z.iter().zip(&p.sigma_z).zip(&p.mu_0).zip(&p.sigma_0) {
            kl += (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5;
        }
    }
    (rec / n, kl / n)
}
