//! Goal-relative spatial and temporal interaction graphs.
//!
//! Node features are the agent's velocity minus its goal velocity, with the
//! pseudo-label one-hot appended. Spatial features are laid out step-major
//! (row `t·N + i`), temporal ones agent-major (row `i·T + t`).

use crate::autodiff::{Mat, Var};
use crate::data::Point;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    pub t_obs: usize,
    pub n_agents: usize,
    /// `T·N × (2 + k)`, step-major.
    pub nodes: Mat,
    /// One dense `N × N` adjacency per step.
    pub adjacency: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraph {
    pub t_obs: usize,
    pub n_agents: usize,
    /// `N·T × (2 + k)`, agent-major.
    pub nodes: Mat,
    /// One dense `T × T` adjacency per agent.
    pub adjacency: Vec<Mat>,
}

/// Average velocity from the last observed position to the endpoint.
pub fn goal_velocity(last_observed: Point, endpoint: Point, t_fut: usize) -> Point {
    let s = t_fut as f64;
    [
        (endpoint[0] - last_observed[0]) / s,
        (endpoint[1] - last_observed[1]) / s,
    ]
}

/// Goal-relative velocities, `T·N × 2` step-major. The first step has no
/// predecessor and is padded with zero velocity.
pub fn relative_velocities(observed: &[Vec<Point>], goals: &[Point]) -> Result<Mat> {
    let n = observed.len();
    if n == 0 {
        return Err(invalid("window has no agents"));
    }
    if goals.len() != n {
        return Err(invalid(format!("{n} agents but {} goals", goals.len())));
    }
    let t = observed[0].len();
    if t < 2 || observed.iter().any(|o| o.len() != t) {
        return Err(invalid("observations must share one length of at least 2"));
    }
    let mut out = Mat::zeros((t * n, 2));
    for (i, (obs, g)) in observed.iter().zip(goals).enumerate() {
        for s in 0..t {
            let v = if s == 0 {
                [0.0, 0.0]
            } else {
                [obs[s][0] - obs[s - 1][0], obs[s][1] - obs[s - 1][1]]
            };
            out[[s * n + i, 0]] = v[0] - g[0];
            out[[s * n + i, 1]] = v[1] - g[1];
        }
    }
    Ok(out)
}

/// Row indices that turn step-major rows into agent-major ones, and back.
pub fn agent_major_index(t: usize, n: usize) -> Vec<usize> {
    (0..n)
        .flat_map(|i| (0..t).map(move |s| s * n + i))
        .collect()
}

pub fn step_major_index(t: usize, n: usize) -> Vec<usize> {
    (0..t)
        .flat_map(|s| (0..n).map(move |i| i * t + s))
        .collect()
}

fn check_labels(labels: &Mat, n: usize) -> Result<()> {
    if labels.nrows() != n {
        return Err(invalid(format!("{n} agents but {} labels", labels.nrows())));
    }
    Ok(())
}

fn with_labels(vel: &Mat, labels: &Mat, row_agent: impl Fn(usize) -> usize) -> Mat {
    let k = labels.ncols();
    Mat::from_shape_fn((vel.nrows(), 2 + k), |(r, c)| {
        if c < 2 {
            vel[[r, c]]
        } else {
            labels[[row_agent(r), c - 2]]
        }
    })
}

pub fn build_spatial(
    observed: &[Vec<Point>],
    labels: &Mat,
    goals: &[Point],
) -> Result<SpatialGraph> {
    let vel = relative_velocities(observed, goals)?;
    let n = observed.len();
    check_labels(labels, n)?;
    let t = observed[0].len();
    Ok(SpatialGraph {
        t_obs: t,
        n_agents: n,
        nodes: with_labels(&vel, labels, |r| r % n),
        adjacency: vec![Mat::ones((n, n)); t],
    })
}

pub fn build_temporal(
    observed: &[Vec<Point>],
    labels: &Mat,
    goals: &[Point],
) -> Result<TemporalGraph> {
    let vel = relative_velocities(observed, goals)?;
    let n = observed.len();
    check_labels(labels, n)?;
    let t = observed[0].len();
    let vel = vel.select(ndarray::Axis(0), &agent_major_index(t, n));
    Ok(TemporalGraph {
        t_obs: t,
        n_agents: n,
        nodes: with_labels(&vel, labels, |r| r / t),
        adjacency: vec![Mat::ones((t, t)); n],
    })
}

/// Tape version of the spatial node features, so label gradients reach the
/// clustering branch.
pub fn spatial_nodes_var<'t>(vel: &Mat, labels: Var<'t>, t: usize) -> Var<'t> {
    let n = labels.shape().0;
    let tape = labels.tape();
    let idx: Vec<usize> = (0..t * n).map(|r| r % n).collect();
    tape.concat_cols(&[tape.constant(vel.clone()), labels.gather_rows(&idx)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::array;

    fn obs() -> Vec<Vec<Point>> {
        vec![
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]],
            vec![[5.0, 5.0], [5.0, 4.0], [5.0, 2.0]],
        ]
    }

    #[test]
    fn single_agent_adjacency() {
        let g = build_spatial(&obs()[..1], &array![[1.0]], &[[0.0, 0.0]]).unwrap();
        assert!(g.adjacency.iter().all(|a| a == &array![[1.0]]));
        assert_eq!(g.nodes.ncols(), 3);
    }

    #[test]
    fn shapes_and_label_block() {
        let labels = array![[1.0, 0.0], [0.0, 1.0]];
        let goals = [[0.5, 0.0], [0.0, -1.0]];
        let s = build_spatial(&obs(), &labels, &goals).unwrap();
        assert_eq!(s.nodes.dim(), (6, 4));
        assert_eq!(s.nodes.row(5).to_vec(), vec![0.0, -1.0, 0.0, 1.0]);
        assert_eq!(s.nodes.row(2).to_vec(), vec![0.5, 0.0, 1.0, 0.0]);
        let t = build_temporal(&obs(), &labels, &goals).unwrap();
        assert_eq!(t.nodes.dim(), (6, 4));
        assert_eq!(t.adjacency.len(), 2);
        assert_eq!(t.adjacency[0].dim(), (3, 3));
        for r in 0..6 {
            assert_eq!(t.nodes.row(r).slice(ndarray::s![2..]), labels.row(r / 3));
        }
        assert!(build_spatial(&obs(), &array![[1.0, 0.0]], &goals).is_err());
        assert!(build_temporal(&obs(), &labels, &goals[..1]).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let labels = array![[1.0, 0.0], [0.0, 1.0]];
        let goals = [[0.5, 0.0], [0.0, -1.0]];
        let a = build_spatial(&obs(), &labels, &goals).unwrap();
        let mut o = obs();
        o.reverse();
        let b = build_spatial(&o, &array![[0.0, 1.0], [1.0, 0.0]], &[goals[1], goals[0]]).unwrap();
        for s in 0..3 {
            assert_eq!(a.nodes.row(s * 2), b.nodes.row(s * 2 + 1));
            assert_eq!(a.nodes.row(s * 2 + 1), b.nodes.row(s * 2));
        }
    }

    #[test]
    fn index_maps_are_inverse() {
        let (t, n) = (4, 3);
        let am = agent_major_index(t, n);
        let sm = step_major_index(t, n);
        for r in 0..t * n {
            assert_eq!(am[sm[r]], r);
        }
    }

    #[test]
    fn tape_nodes_match_builder() {
        let labels = array![[1.0, 0.0], [0.0, 1.0]];
        let goals = [[0.5, 0.0], [0.0, -1.0]];
        let s = build_spatial(&obs(), &labels, &goals).unwrap();
        let tape = Tape::new();
        let vel = relative_velocities(&obs(), &goals).unwrap();
        let v = spatial_nodes_var(&vel, tape.leaf(labels), 3);
        assert_eq!(v.value(), s.nodes);
    }

    #[test]
    fn goal_velocity_example() {
        assert_eq!(goal_velocity([1.0, 1.0], [13.0, -11.0], 12), [1.0, -1.0]);
    }
}
