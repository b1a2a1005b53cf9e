//! Displacement metrics, best-of-N evaluation and clustering scores.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::clustering::pairwise_sq_dist;
use crate::data::Point;
use crate::error::{invalid, Error, Result};
use crate::pipeline::{Bundle, PreparedWindow};

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_shape(pred: &[Vec<Point>], truth: &[Vec<Point>]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(invalid(format!(
            "{} predicted vs {} true tracks",
            pred.len(),
            truth.len()
        )));
    }
    if pred
        .iter()
        .zip(truth)
        .any(|(p, t)| p.len() != t.len() || p.is_empty())
    {
        return Err(invalid("track lengths differ"));
    }
    Ok(())
}

/// Mean displacement over all agents and steps, and mean final displacement.
pub fn ade_fde(pred: &[Vec<Point>], truth: &[Vec<Point>]) -> Result<(f64, f64)> {
    check_shape(pred, truth)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut fde = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t) {
            sum += dist(*a, *b);
            count += 1;
        }
        fde += dist(p[p.len() - 1], t[t.len() - 1]);
    }
    Ok((sum / count as f64, fde / pred.len() as f64))
}

/// Minimum scene-level ADE and, separately, minimum scene-level FDE over
/// samples (`[sample][agent][step]`).
pub fn best_of(samples: &[Vec<Vec<Point>>], truth: &[Vec<Point>]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for s in samples {
        let (a, f) = ade_fde(s, truth)?;
        best = (best.0.min(a), best.1.min(f));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub scene: String,
    pub start_frame: i64,
    pub n_agents: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ade: f64,
    pub fde: f64,
    pub n_samples: usize,
    pub per_window: Vec<WindowMetrics>,
    pub ari: Option<f64>,
    pub silhouette: Option<f64>,
}

/// Best-of-`n_samples` over every window. Window errors are weighted by
/// their agent count.
pub fn evaluate(
    bundle: &Bundle,
    windows: &[PreparedWindow],
    n_samples: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::State("empty test set".into()));
    }
    let mut per_window = Vec::with_capacity(windows.len());
    let (mut ade, mut fde, mut agents) = (0.0, 0.0, 0usize);
    for (i, w) in windows.iter().enumerate() {
        let pred = bundle.predict(w, n_samples, seed, i as u64)?;
        let (a, f) = best_of(&pred.samples, &w.window.future)?;
        let n = w.n_agents();
        ade += a * n as f64;
        fde += f * n as f64;
        agents += n;
        per_window.push(WindowMetrics {
            scene: w.window.scene.clone(),
            start_frame: w.window.start_frame,
            n_agents: n,
            ade: a,
            fde: f,
        });
    }
    Ok(MetricsReport {
        ade: ade / agents as f64,
        fde: fde / agents as f64,
        n_samples,
        per_window,
        ari: None,
        silhouette: None,
    })
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("label sequences differ in length"));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Mean silhouette over all points; `None` with fewer than two clusters.
pub fn silhouette(latents: &Mat, labels: &[usize]) -> Result<Option<f64>> {
    if latents.nrows() != labels.len() {
        return Err(invalid("latents and labels differ in length"));
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Ok(None);
    }
    let d = pairwise_sq_dist(latents, latents).mapv(f64::sqrt);
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: HashMap<usize, (f64, usize)> = HashMap::new();
        for j in 0..n {
            if j != i {
                let e = sums.entry(labels[j]).or_default();
                e.0 += d[[i, j]];
                e.1 += 1;
            }
        }
        let own = sums.get(&labels[i]).copied().unwrap_or((0.0, 0));
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = ids
            .iter()
            .filter(|&&c| c != labels[i])
            .filter_map(|c| sums.get(c).map(|&(s, k)| s / k as f64))
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(Some(total / n as f64))
}

pub fn clustering_scores(
    latents: &Mat,
    labels: &[usize],
    true_labels: &[usize],
) -> Result<(f64, Option<f64>)> {
    Ok((
        adjusted_rand_index(labels, true_labels)?,
        silhouette(latents, labels)?,
    ))
}

/// Projection onto the two leading principal axes.
pub fn pca_2d(latents: &Mat) -> Mat {
    let n = latents.nrows();
    let dim = latents.ncols();
    if n == 0 || dim == 0 {
        return Mat::zeros((n, 2));
    }
    let mean = latents.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = latents - &mean;
    let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let eig =
        nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(dim, dim, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut out = Mat::zeros((n, 2));
    for (c, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        // fix the sign so the largest loading is positive
        let (mut big, mut sign) = (0.0, 1.0);
        for x in v.iter() {
            if x.abs() > big {
                big = x.abs();
                sign = x.signum();
            }
        }
        for i in 0..n {
            out[[i, c]] = sign * (0..dim).map(|j| centered[[i, j]] * v[j]).sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn track(off: Point) -> Vec<Point> {
        (0..12).map(|t| [t as f64 + off[0], off[1]]).collect()
    }

    #[test]
    fn ade_examples() {
        let truth = vec![track([0.0, 0.0])];
        assert_eq!(ade_fde(&truth, &truth).unwrap(), (0.0, 0.0));
        assert_eq!(ade_fde(&[track([1.0, 0.0])], &truth).unwrap(), (1.0, 1.0));
        let s = vec![vec![track([0.0, 3.0])], truth.clone()];
        assert_eq!(best_of(&s, &truth).unwrap(), (0.0, 0.0));
        assert!(ade_fde(&[], &truth).is_err());
        assert!(ade_fde(&[vec![[0.0, 0.0]]], &truth).is_err());
    }

    #[test]
    fn ari_examples() {
        let a = [0, 0, 1, 1, 2, 2];
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        let relabeled = [2, 2, 0, 0, 1, 1];
        assert!((adjusted_rand_index(&a, &relabeled).unwrap() - 1.0).abs() < 1e-12);
        // sklearn reference value for this pair
        let b = [0, 0, 1, 2, 2, 2];
        assert!((adjusted_rand_index(&a, &b).unwrap() - 0.444_444_444_444_444_4).abs() < 1e-12);
    }

    #[test]
    fn ari_near_zero_for_random_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let mut shuffled = truth.clone();
        shuffled.shuffle(&mut rng);
        assert!(adjusted_rand_index(&shuffled, &truth).unwrap().abs() < 0.05);
    }

    #[test]
    fn silhouette_cases() {
        let z = ndarray::array![[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]];
        let s = silhouette(&z, &[0, 0, 1, 1]).unwrap().unwrap();
        assert!(s > 0.98);
        assert_eq!(silhouette(&z, &[0, 0, 0, 0]).unwrap(), None);
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Mat::from_shape_fn((200, 3), |(_, j)| {
            rng.random_range(-1.0..1.0) * [10.0, 1.0, 0.1][j]
        });
        let p = pca_2d(&z);
        let var0 = p.column(0).mapv(|x| x * x).sum();
        let var1 = p.column(1).mapv(|x| x * x).sum();
        assert!(var0 > 10.0 * var1);
    }
}
