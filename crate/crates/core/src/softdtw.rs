//! Soft dynamic time warping with squared-Euclidean local cost.
//!
//! The forward table follows
//! `r(i,j) = cost(i,j) + softmin_γ(r(i−1,j), r(i,j−1), r(i−1,j−1))`
//! with `r(0,0) = cost(0,0)` and the first row and column accumulating
//! along the border. The gradient comes from the backward recursion over
//! expected alignment weights.

use ndarray::Array2;

use crate::autodiff::{CustomOp, Mat, Tape, Var};
use crate::error::{invalid, Result};
use crate::geometry::GeometricSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftDtwConfig {
    gamma: f64,
}

impl SoftDtwConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma.is_finite() && gamma > 0.0 {
            Ok(Self { gamma })
        } else {
            Err(invalid(format!(
                "soft-DTW gamma must be positive, got {gamma}"
            )))
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for SoftDtwConfig {
    fn default() -> Self {
        Self { gamma: 0.1 }
    }
}

fn check_pair(a: &Mat, b: &Mat) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(invalid("soft-DTW needs nonempty sequences"));
    }
    if a.ncols() != b.ncols() {
        return Err(invalid(format!(
            "soft-DTW feature dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

fn sq_cost(a: &Mat, b: &Mat) -> Mat {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    })
}

fn softmin3(x: f64, y: f64, z: f64, gamma: f64) -> f64 {
    let m = x.min(y).min(z);
    if m == f64::INFINITY {
        return m;
    }
    let s = (-(x - m) / gamma).exp() + (-(y - m) / gamma).exp() + (-(z - m) / gamma).exp();
    m - gamma * s.ln()
}

/// Padded `(n+2) × (m+2)` table; `r[i][j]` for `1 ≤ i ≤ n, 1 ≤ j ≤ m`.
fn forward_table(cost: &Mat, gamma: f64) -> Mat {
    let (n, m) = cost.dim();
    let mut r = Mat::from_elem((n + 2, m + 2), f64::INFINITY);
    r[[0, 0]] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            r[[i, j]] = cost[[i - 1, j - 1]]
                + softmin3(r[[i - 1, j]], r[[i, j - 1]], r[[i - 1, j - 1]], gamma);
        }
    }
    r
}

/// Expected alignment matrix `∂ value / ∂ cost`.
fn alignment(cost: &Mat, r: &Mat, gamma: f64) -> Mat {
    let (n, m) = cost.dim();
    let mut d = Mat::zeros((n + 2, m + 2));
    d.slice_mut(ndarray::s![1..=n, 1..=m]).assign(cost);
    let mut r = r.clone();
    for i in 1..=n {
        r[[i, m + 1]] = f64::NEG_INFINITY;
    }
    for j in 1..=m {
        r[[n + 1, j]] = f64::NEG_INFINITY;
    }
    r[[n + 1, m + 1]] = r[[n, m]];
    let mut e = Mat::zeros((n + 2, m + 2));
    e[[n + 1, m + 1]] = 1.0;
    for j in (1..=m).rev() {
        for i in (1..=n).rev() {
            let a = ((r[[i + 1, j]] - r[[i, j]] - d[[i + 1, j]]) / gamma).exp();
            let b = ((r[[i, j + 1]] - r[[i, j]] - d[[i, j + 1]]) / gamma).exp();
            let c = ((r[[i + 1, j + 1]] - r[[i, j]] - d[[i + 1, j + 1]]) / gamma).exp();
            e[[i, j]] = e[[i + 1, j]] * a + e[[i, j + 1]] * b + e[[i + 1, j + 1]] * c;
        }
    }
    e.slice(ndarray::s![1..=n, 1..=m]).to_owned()
}

/// Soft-DTW discrepancy between `a` (`n × d`) and `b` (`m × d`).
pub fn soft_dtw(a: &Mat, b: &Mat, cfg: SoftDtwConfig) -> Result<f64> {
    check_pair(a, b)?;
    let cost = sq_cost(a, b);
    let r = forward_table(&cost, cfg.gamma);
    Ok(r[[a.nrows(), b.nrows()]])
}

/// Gradient of [`soft_dtw`] with respect to `a`.
pub fn soft_dtw_grad(a: &Mat, b: &Mat, cfg: SoftDtwConfig) -> Result<Mat> {
    check_pair(a, b)?;
    Ok(grad_a(a, b, cfg.gamma))
}

fn grad_a(a: &Mat, b: &Mat, gamma: f64) -> Mat {
    let cost = sq_cost(a, b);
    let r = forward_table(&cost, gamma);
    let e = alignment(&cost, &r, gamma);
    let mut g = Mat::zeros(a.dim());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let w = e[[i, j]];
            if w == 0.0 {
                continue;
            }
            for k in 0..a.ncols() {
                g[[i, k]] += w * 2.0 * (a[[i, k]] - b[[j, k]]);
            }
        }
    }
    g
}

/// Classic DTW with squared-Euclidean cost.
pub fn hard_dtw(a: &Mat, b: &Mat) -> Result<f64> {
    check_pair(a, b)?;
    let cost = sq_cost(a, b);
    let (n, m) = cost.dim();
    let mut r = Mat::from_elem((n + 1, m + 1), f64::INFINITY);
    r[[0, 0]] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            r[[i, j]] =
                cost[[i - 1, j - 1]] + r[[i - 1, j]].min(r[[i, j - 1]]).min(r[[i - 1, j - 1]]);
        }
    }
    Ok(r[[n, m]])
}

struct SoftDtwOp {
    target: Mat,
    gamma: f64,
}

impl CustomOp for SoftDtwOp {
    fn backward(&self, parents: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let g = grad_a(parents[0], &self.target, self.gamma) * grad[[0, 0]];
        vec![Some(g)]
    }
}

/// Soft-DTW between a differentiable sequence and a fixed target, as a
/// `1 × 1` tape node.
pub fn soft_dtw_var<'t>(a: Var<'t>, target: &Mat, cfg: SoftDtwConfig) -> Result<Var<'t>> {
    let av = a.value();
    let v = soft_dtw(&av, target, cfg)?;
    Ok(a.tape().custom(
        &[a],
        Mat::from_elem((1, 1), v),
        Box::new(SoftDtwOp {
            target: target.clone(),
            gamma: cfg.gamma,
        }),
    ))
}

pub fn sequence_matrix(g: &GeometricSequence) -> Mat {
    Mat::from_shape_fn((g.len(), 2), |(t, k)| g.steps[t][k])
}

/// Mean over agents of `soft_dtw(decoded_i, observed_i) / T_obs`.
pub fn vrnn_softdtw_loss(
    decoded: &[Mat],
    observed: &[GeometricSequence],
    t_obs: usize,
    cfg: SoftDtwConfig,
) -> Result<f64> {
    if decoded.len() != observed.len() || decoded.is_empty() {
        return Err(invalid(format!(
            "{} decoded vs {} observed sequences",
            decoded.len(),
            observed.len()
        )));
    }
    let mut total = 0.0;
    for (d, g) in decoded.iter().zip(observed) {
        total += soft_dtw(d, &sequence_matrix(g), cfg)? / t_obs as f64;
    }
    Ok(total / decoded.len() as f64)
}

/// Tape version of [`vrnn_softdtw_loss`].
pub fn vrnn_softdtw_loss_var<'t>(
    tape: &'t Tape,
    decoded: &[Var<'t>],
    observed: &[Mat],
    t_obs: usize,
    cfg: SoftDtwConfig,
) -> Result<Var<'t>> {
    if decoded.len() != observed.len() || decoded.is_empty() {
        return Err(invalid(format!(
            "{} decoded vs {} observed sequences",
            decoded.len(),
            observed.len()
        )));
    }
    let terms = decoded
        .iter()
        .zip(observed)
        .map(|(d, g)| soft_dtw_var(*d, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len() as f64;
    Ok(tape
        .concat_cols(&terms)
        .sum()
        .scale(1.0 / (t_obs as f64 * n)))
}
