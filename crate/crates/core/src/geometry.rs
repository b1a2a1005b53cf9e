//! Velocities, turning/acceleration behavior features and the goal-relative
//! transform.

use serde::{Deserialize, Serialize};

use crate::data::Point;
use crate::error::{invalid, Result};

/// Norm below which a velocity counts as stationary.
pub const STATIONARY_EPS: f64 = 1e-8;

/// Per-step `(cos θ_t, |a_t|)` features of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricSequence {
    pub steps: Vec<[f64; 2]>,
}

impl GeometricSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn norm(v: Point) -> f64 {
    v[0].hypot(v[1])
}

/// `v_t = (p_t − p_{t−1}) / dt`
pub fn velocities(positions: &[Point], dt: f64) -> Result<Vec<Point>> {
    if positions.len() < 2 {
        return Err(invalid("velocities need at least 2 positions"));
    }
    if dt <= 0.0 {
        return Err(invalid("dt must be positive"));
    }
    Ok(positions
        .windows(2)
        .map(|w| [(w[1][0] - w[0][0]) / dt, (w[1][1] - w[0][1]) / dt])
        .collect())
}

/// Cosine of the turn between consecutive velocities. A stationary step
/// (either norm below [`STATIONARY_EPS`]) counts as no turn, `1.0`.
pub fn cos_angles(v: &[Point]) -> Vec<f64> {
    v.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let (na, nb) = (norm(a), norm(b));
            if na < STATIONARY_EPS || nb < STATIONARY_EPS {
                1.0
            } else {
                ((a[0] * b[0] + a[1] * b[1]) / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

/// `|a_t| = |v_t − v_{t−1}| / dt`
pub fn accel_magnitudes(v: &[Point], dt: f64) -> Vec<f64> {
    v.windows(2)
        .map(|w| norm([w[1][0] - w[0][0], w[1][1] - w[0][1]]) / dt)
        .collect()
}

/// Behavior features of one track, `positions.len() − 2` steps long.
pub fn geometric_sequence(positions: &[Point]) -> Result<GeometricSequence> {
    if positions.len() < 3 {
        return Err(invalid("geometric features need at least 3 positions"));
    }
    let v = velocities(positions, 1.0)?;
    let cos = cos_angles(&v);
    let acc = accel_magnitudes(&v, 1.0);
    Ok(GeometricSequence {
        steps: cos.into_iter().zip(acc).map(|(c, a)| [c, a]).collect(),
    })
}

/// Subtracts each agent's endpoint velocity from every step of its sequence.
pub fn goal_relative(sequences: &[Vec<Point>], endpoints: &[Point]) -> Result<Vec<Vec<Point>>> {
    shift(sequences, endpoints, -1.0)
}

/// Inverse of [`goal_relative`].
pub fn goal_absolute(sequences: &[Vec<Point>], endpoints: &[Point]) -> Result<Vec<Vec<Point>>> {
    shift(sequences, endpoints, 1.0)
}

fn shift(sequences: &[Vec<Point>], endpoints: &[Point], sign: f64) -> Result<Vec<Vec<Point>>> {
    if sequences.len() != endpoints.len() {
        return Err(invalid(format!(
            "{} sequences but {} endpoints",
            sequences.len(),
            endpoints.len()
        )));
    }
    Ok(sequences
        .iter()
        .zip(endpoints)
        .map(|(seq, e)| {
            seq.iter()
                .map(|v| [v[0] + sign * e[0], v[1] + sign * e[1]])
                .collect()
        })
        .collect())
}

/// Rotates `p` by `angle` radians counter-clockwise.
pub fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}
