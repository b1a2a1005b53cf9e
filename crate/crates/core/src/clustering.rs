//! Deep embedded clustering over behavior latents.
//!
//! Soft assignments use a Student's-t kernel against the cluster centers. The
//! sharpened target reweights squared assignments by soft cluster frequency,
//! and training minimizes `KL(P ‖ Q)` jointly over centers and encoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Mat, Tape, Var};
use crate::checkpoint::Archive;
use crate::error::{invalid, Error, Result};
use crate::params::{Adam, ParamStore};
use crate::vrnn::{Noise, Vrnn};

/// How center distance enters the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Squared,
    Euclidean,
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Self::Squared),
            "euclidean" => Ok(Self::Euclidean),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Squared => "squared",
            Self::Euclidean => "euclidean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `k × Z`
    pub centers: Mat,
    pub alpha: f64,
    pub distance: Distance,
}

impl ClusterModel {
    pub fn new(centers: Mat) -> Self {
        Self {
            centers,
            alpha: 1.0,
            distance: Distance::Squared,
        }
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn to_archive(&self, archive: &mut Archive) {
        archive.insert("clusters/centers", self.centers.clone());
        archive
            .meta
            .insert("clusters.alpha".into(), format!("{:?}", self.alpha));
        archive
            .meta
            .insert("clusters.distance".into(), self.distance.to_string());
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let centers = archive.require("clusters/centers")?.clone();
        let alpha = archive
            .meta
            .get("clusters.alpha")
            .and_then(|a| a.parse().ok())
            .ok_or_else(|| Error::State("archive missing cluster alpha".into()))?;
        let distance = archive
            .meta
            .get("clusters.distance")
            .ok_or_else(|| Error::State("archive missing cluster distance".into()))?
            .parse()?;
        Ok(Self {
            centers,
            alpha,
            distance,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub p: Mat,
    /// Soft cluster frequencies `f_j = Σ_i q_ij`.
    pub f: Vec<f64>,
}

/// `d_ij = ‖a_i − b_j‖²`
pub fn pairwise_sq_dist(a: &Mat, b: &Mat) -> Mat {
    Mat::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    })
}

/// Row-normalized Student's-t kernel over a matrix of distances.
pub fn kernel_from_distances(d: &Mat, alpha: f64) -> Mat {
    let power = -(alpha + 1.0) / 2.0;
    let mut q = d.mapv(|x| (1.0 + x / alpha).powf(power));
    for mut row in q.rows_mut() {
        let s: f64 = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    q
}

fn kernel_distances(latents: &Mat, model: &ClusterModel) -> Mat {
    let d = pairwise_sq_dist(latents, &model.centers);
    match model.distance {
        Distance::Squared => d,
        Distance::Euclidean => d.mapv(f64::sqrt),
    }
}

/// `N × k` soft assignment of every latent row to every center.
pub fn soft_assign(latents: &Mat, model: &ClusterModel) -> Result<Mat> {
    if latents.ncols() != model.centers.ncols() {
        return Err(invalid(format!(
            "latent width {} but centers have width {}",
            latents.ncols(),
            model.centers.ncols()
        )));
    }
    Ok(kernel_from_distances(
        &kernel_distances(latents, model),
        model.alpha,
    ))
}

pub fn target_distribution(q: &Mat) -> TargetDistribution {
    let f: Vec<f64> = q.columns().into_iter().map(|c| c.sum()).collect();
    let mut p = Mat::from_shape_fn(q.dim(), |(i, j)| q[[i, j]] * q[[i, j]] / f[j]);
    for mut row in p.rows_mut() {
        let s: f64 = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    TargetDistribution { p, f }
}

/// `KL(P ‖ Q)` summed over all rows, with `0 · log 0 = 0`.
pub fn cluster_loss(q: &Mat, p: &Mat) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&q, &p)| if p > 0.0 { p * (p / q).ln() } else { 0.0 })
        .sum()
}

pub fn hard_assign(q: &Mat) -> Vec<usize> {
    crate::pseudolabel::hard_labels(q)
}

struct PairwiseSqDist;

impl CustomOp for PairwiseSqDist {
    fn backward(&self, parents: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let (a, b) = (parents[0], parents[1]);
        // ∂/∂a_i = 2 Σ_j g_ij (a_i − b_j), ∂/∂b_j = −2 Σ_i g_ij (a_i − b_j)
        let row_g = grad
            .sum_axis(ndarray::Axis(1))
            .insert_axis(ndarray::Axis(1));
        let col_g = grad
            .sum_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(1));
        let ga = (a * &row_g - grad.dot(b)) * 2.0;
        let gb = (b * &col_g - grad.t().dot(a)) * 2.0;
        vec![Some(ga), Some(gb)]
    }
}

/// Tape version of [`pairwise_sq_dist`].
pub fn pairwise_sq_dist_var<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let value = pairwise_sq_dist(&a.value(), &b.value());
    a.tape().custom(&[a, b], value, Box::new(PairwiseSqDist))
}

/// Tape version of [`soft_assign`].
pub fn soft_assign_var<'t>(
    latents: Var<'t>,
    centers: Var<'t>,
    alpha: f64,
    distance: Distance,
) -> Var<'t> {
    let mut d = pairwise_sq_dist_var(latents, centers);
    if distance == Distance::Euclidean {
        // keeps the gradient finite when a latent sits on a center
        d = d.add_scalar(1e-12).sqrt();
    }
    let u = d
        .scale(1.0 / alpha)
        .add_scalar(1.0)
        .powf(-(alpha + 1.0) / 2.0);
    u.div_col(u.row_sum())
}

/// Tape version of [`cluster_loss`] with `p` held fixed.
pub fn cluster_loss_var<'t>(q: Var<'t>, p: &Mat) -> Var<'t> {
    let entropy: f64 = p
        .iter()
        .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
        .sum();
    q.ln()
        .mul_const(p.clone())
        .sum()
        .scale(-1.0)
        .add_scalar(entropy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Mat,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 100;

/// Lloyd's algorithm from k-means++ seeding.
pub fn kmeans(latents: &Mat, k: usize, seed: u64) -> Result<KMeans> {
    let n = latents.nrows();
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if n < k {
        return Err(invalid(format!("{n} points cannot fill {k} clusters")));
    }
    if latents.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite latent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest = pairwise_sq_dist(latents, &latents.select(ndarray::Axis(0), &chosen))
        .column(0)
        .to_owned();
    while chosen.len() < k {
        let total: f64 = nearest.sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        let d = pairwise_sq_dist(latents, &latents.select(ndarray::Axis(0), &[next]));
        for (cur, &new) in nearest.iter_mut().zip(d.column(0)) {
            *cur = cur.min(new);
        }
    }
    let mut centers = latents.select(ndarray::Axis(0), &chosen);
    let mut labels = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITER {
        iterations += 1;
        let d = pairwise_sq_dist(latents, &centers);
        let new_labels: Vec<usize> = d
            .rows()
            .into_iter()
            .map(|r| argmin(r.iter().copied()))
            .collect();
        let changed = new_labels != labels;
        labels = new_labels;
        let mut sums = Mat::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l)
                .zip_mut_with(&latents.row(i), |s, x| *s += x);
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                // re-seed at the point farthest from its own center
                let far = (0..n)
                    .max_by(|&a, &b| d[[a, labels[a]]].total_cmp(&d[[b, labels[b]]]))
                    .expect("n >= 1");
                centers.row_mut(j).assign(&latents.row(far));
                labels[far] = j;
            } else {
                centers
                    .row_mut(j)
                    .assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    let d = pairwise_sq_dist(latents, &centers);
    let inertia = labels.iter().enumerate().map(|(i, &l)| d[[i, l]]).sum();
    Ok(KMeans {
        centers,
        labels,
        inertia,
        iterations,
    })
}

fn argmin(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, x) in it.enumerate() {
        if x < best.1 {
            best = (i, x);
        }
    }
    best.0
}

pub fn kmeans_init(latents: &Mat, k: usize, seed: u64) -> Result<ClusterModel> {
    Ok(ClusterModel::new(kmeans(latents, k, seed)?.centers))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs between target refreshes.
    pub refresh_interval: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DecConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            refresh_interval: 1,
            batch: 64,
            seed: 0,
        }
    }
}

/// Mean clustering loss per agent, one entry per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecReport {
    pub losses: Vec<f64>,
}

fn cluster_archive(vrnn: &Vrnn, model: &ClusterModel) -> Archive {
    let mut a = Archive::new();
    vrnn.to_archive(&mut a);
    model.to_archive(&mut a);
    a
}

/// Rows `idx` of every step-major matrix.
pub fn select_rows(steps: &[Mat], idx: &[usize]) -> Vec<Mat> {
    steps
        .iter()
        .map(|m| m.select(ndarray::Axis(0), idx))
        .collect()
}

/// Jointly refines encoder parameters and centers by gradient descent on the
/// clustering loss. `steps` is step-major behavior input for all agents.
pub fn dec_train(
    vrnn: &mut Vrnn,
    steps: &[Mat],
    model: &mut ClusterModel,
    cfg: &DecConfig,
) -> Result<DecReport> {
    let n = steps.first().map_or(0, Mat::nrows);
    if n == 0 {
        return Err(invalid("no agents to cluster"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut center_opt = Adam::new(cfg.lr);
    let mut centers = ParamStore::new();
    centers.insert("centers", model.centers.clone());
    let mut report = DecReport::default();
    let mut target = Mat::zeros((n, model.k()));
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        if epoch % cfg.refresh_interval.max(1) == 0 {
            let q = soft_assign(&vrnn.latents_from_steps(steps)?, model)?;
            target = target_distribution(&q).p;
        }
        let last_good = cluster_archive(vrnn, model);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let part = select_rows(steps, chunk);
            let p = target.select(ndarray::Axis(0), chunk);
            let tape = Tape::new();
            let b = vrnn.params.bind(&tape);
            let c = centers.bind(&tape);
            let z = vrnn.forward(&tape, &b, &part, Noise::Mean)?.latent();
            let q = soft_assign_var(z, c.get("centers"), model.alpha, model.distance);
            let loss = cluster_loss_var(q, &p);
            let value = loss.item();
            let grads = tape.backward(loss.scale(1.0 / chunk.len() as f64));
            let (gv, gc) = (b.grads(&grads), c.grads(&grads));
            if !value.is_finite()
                || !crate::params::grads_finite(&gv)
                || !crate::params::grads_finite(&gc)
            {
                return Err(Error::Diverged {
                    stage: "cluster".into(),
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            total += value;
            opt.step(&mut vrnn.params, &gv);
            center_opt.step(&mut centers, &gc);
            model
                .centers
                .assign(centers.get("centers").expect("inserted above"));
        }
        report.losses.push(total / n as f64);
        log::debug!("cluster epoch {epoch}: loss {:.6}", total / n as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, relative_error};
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn kernel_worked_example() {
        let q = kernel_from_distances(&array![[0.0, 3.0]], 1.0);
        assert!((q[[0, 0]] - 0.8).abs() < 1e-15 && (q[[0, 1]] - 0.2).abs() < 1e-15);
        // the same example through both distance modes
        let mut m = ClusterModel::new(array![[0.0, 0.0], [3f64.sqrt(), 0.0]]);
        let q = soft_assign(&array![[0.0, 0.0]], &m).unwrap();
        assert!((q[[0, 0]] - 0.8).abs() < 1e-12);
        m.distance = Distance::Euclidean;
        m.centers = array![[0.0, 0.0], [3.0, 0.0]];
        let q = soft_assign(&array![[0.0, 0.0]], &m).unwrap();
        assert!((q[[0, 0]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn equidistant_is_even() {
        let m = ClusterModel::new(array![[1.0, 0.0], [-1.0, 0.0]]);
        let q = soft_assign(&array![[0.0, 5.0]], &m).unwrap();
        assert!((q[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn target_worked_examples() {
        let t = target_distribution(&array![[0.8, 0.2]]);
        assert!((t.p[[0, 0]] - 0.8).abs() < 1e-12);
        let t = target_distribution(&array![[0.8, 0.2], [0.6, 0.4]]);
        assert!((t.f[0] - 1.4).abs() < 1e-12 && (t.f[1] - 0.6).abs() < 1e-12);
        // unnormalized (0.64/1.4, 0.04/0.6)
        let (a, b) = (0.64 / 1.4, 0.04 / 0.6);
        assert!((t.p[[0, 0]] - a / (a + b)).abs() < 1e-12);
        assert!((t.p[[0, 0]] - 0.8727).abs() < 1e-4 && (t.p[[0, 1]] - 0.1273).abs() < 1e-4);
        let t = target_distribution(&Mat::from_elem((4, 3), 1.0 / 3.0));
        assert!(t.p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn loss_examples() {
        let q = array![[0.3, 0.7]];
        assert_eq!(cluster_loss(&q, &q), 0.0);
        let kl = cluster_loss(&array![[0.5, 0.5]], &array![[1.0, 0.0]]);
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        let tape = Tape::new();
        let v = cluster_loss_var(tape.leaf(array![[0.5, 0.5]]), &array![[1.0, 0.0]]);
        assert!((v.item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kmeans_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Mat::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0));
        let one = kmeans(&pts, 1, 0).unwrap();
        let mean = pts.mean_axis(ndarray::Axis(0)).unwrap();
        assert!(one
            .centers
            .row(0)
            .iter()
            .zip(&mean)
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let all = kmeans(&pts, 20, 0).unwrap();
        assert!(all.inertia.abs() < 1e-24);
        assert!(kmeans(&pts, 21, 0).is_err());
        let a = kmeans(&pts, 4, 9).unwrap();
        assert_eq!(a, kmeans(&pts, 4, 9).unwrap());
    }

    #[test]
    fn kmeans_separates_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Mat::from_shape_fn((40, 2), |(i, _)| {
            let off = if i < 20 { -10.0 } else { 10.0 };
            off + rng.random_range(-1.0..1.0)
        });
        for seed in 0..5 {
            let km = kmeans(&pts, 2, seed).unwrap();
            let mut xs: Vec<f64> = km.centers.column(0).to_vec();
            xs.sort_by(f64::total_cmp);
            assert!((-11.0..=-9.0).contains(&xs[0]) && (9.0..=11.0).contains(&xs[1]));
        }
    }

    #[test]
    fn kmeans_reseeds_empty_cluster() {
        // duplicates force k-means++ to pick a repeated point
        let pts = array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [5.0, 5.0]];
        let km = kmeans(&pts, 3, 1).unwrap();
        assert!(km.centers.iter().all(|x| x.is_finite()));
        assert_eq!(km.labels.len(), 4);
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn cluster_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z0 = rand_mat(&mut rng, 5, 3);
        let c0 = rand_mat(&mut rng, 2, 3);
        for distance in [Distance::Squared, Distance::Euclidean] {
            let p = target_distribution(
                &soft_assign(
                    &z0,
                    &ClusterModel {
                        centers: c0.clone(),
                        alpha: 1.0,
                        distance,
                    },
                )
                .unwrap(),
            )
            .p;
            let eval = |z: &Mat, c: &Mat| {
                let m = ClusterModel {
                    centers: c.clone(),
                    alpha: 1.0,
                    distance,
                };
                cluster_loss(&soft_assign(z, &m).unwrap(), &p)
            };
            let tape = Tape::new();
            let (z, c) = (tape.leaf(z0.clone()), tape.leaf(c0.clone()));
            let loss = cluster_loss_var(soft_assign_var(z, c, 1.0, distance), &p);
            assert!((loss.item() - eval(&z0, &c0)).abs() < 1e-12);
            let g = tape.backward(loss);
            let fz = finite_diff(&z0, 1e-5, |z| eval(z, &c0));
            let fc = finite_diff(&c0, 1e-5, |c| eval(&z0, c));
            assert!(relative_error(&g.wrt(z), &fz) < 1e-6, "{distance}");
            assert!(relative_error(&g.wrt(c), &fc) < 1e-6, "{distance}");
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = crate::vrnn::VrnnConfig {
            hidden: 4,
            latent: 2,
            embed: 4,
        };
        let mut v = Vrnn::new(cfg, &mut rng);
        let before = v.clone();
        let steps: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 6, 2)).collect();
        let mut m = kmeans_init(&v.latents_from_steps(&steps).unwrap(), 2, 0).unwrap();
        let m0 = m.clone();
        let dc = DecConfig {
            epochs: 0,
            ..DecConfig::default()
        };
        dec_train(&mut v, &steps, &mut m, &dc).unwrap();
        assert_eq!(v, before);
        assert_eq!(m, m0);
    }

    #[test]
    fn archive_round_trip() {
        let mut m = ClusterModel::new(array![[0.1, 0.2], [0.3, 0.4]]);
        m.distance = Distance::Euclidean;
        let mut a = Archive::new();
        m.to_archive(&mut a);
        assert_eq!(ClusterModel::from_archive(&a).unwrap(), m);
    }

    fn prob_rows(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
        prop::collection::vec(0.01f64..1.0, rows * cols).prop_map(move |v| {
            let mut m = Mat::from_shape_vec((rows, cols), v).unwrap();
            for mut r in m.rows_mut() {
                let s = r.sum();
                r.mapv_inplace(|x| x / s);
            }
            m
        })
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(z in prop::collection::vec(-5.0f64..5.0, 12), c in prop::collection::vec(-5.0f64..5.0, 9)) {
            let z = Mat::from_shape_vec((4, 3), z).unwrap();
            let m = ClusterModel::new(Mat::from_shape_vec((3, 3), c).unwrap());
            let q = soft_assign(&z, &m).unwrap();
            let p = target_distribution(&q).p;
            for r in q.rows().into_iter().chain(p.rows()) {
                prop_assert!((r.sum() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn kl_nonnegative(q in prob_rows(3, 4), p in prob_rows(3, 4)) {
            prop_assert!(cluster_loss(&q, &p) >= -1e-12);
        }

        #[test]
        fn column_permutation_is_symmetric(q in prob_rows(4, 3)) {
            let perm = [2, 0, 1];
            let qp = q.select(ndarray::Axis(1), &perm);
            let a = target_distribution(&q).p.select(ndarray::Axis(1), &perm);
            let b = target_distribution(&qp).p;
            prop_assert!(relative_error(&a, &b) < 1e-12);
        }

        #[test]
        fn uniform_frequency_keeps_argmax(q in prob_rows(1, 3)) {
            // rows that are cyclic shifts of one another give uniform f
            let mut m = Mat::zeros((3, 3));
            for s in 0..3 {
                for j in 0..3 {
                    m[[s, (j + s) % 3]] = q[[0, j]];
                }
            }
            let p = target_distribution(&m).p;
            prop_assert_eq!(hard_assign(&p), hard_assign(&m));
        }
    }
}
