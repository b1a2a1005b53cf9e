//! Gumbel-Softmax straight-through pseudo-labels.

use rand::Rng;

use crate::autodiff::{softmax_rows, CustomOp, Mat, Var};
use crate::error::{invalid, Result};

/// One agent's label: the hard forward value and the relaxed sample behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub onehot: Vec<f64>,
    pub soft: Vec<f64>,
    pub tau: f64,
}

impl PseudoLabel {
    pub fn index(&self) -> usize {
        self.onehot.iter().position(|&x| x == 1.0).expect("one-hot")
    }
}

/// Standard Gumbel draws, `−log(−log u)`.
pub fn gumbel_noise(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    })
}

/// Row-wise one-hot of the argmax, lowest index on ties.
pub fn onehot_rows(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.dim());
    for (i, j) in hard_labels(m).into_iter().enumerate() {
        out[[i, j]] = 1.0;
    }
    out
}

/// Per-row argmax; ties go to the lowest index.
pub fn hard_labels(q: &Mat) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check(logits: &Mat, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(invalid("logits must be finite"));
    }
    Ok(())
}

/// Relaxed sample `softmax((logits + noise) / τ)` and its one-hot.
pub fn gumbel_softmax(logits: &Mat, noise: &Mat, tau: f64) -> Result<Vec<PseudoLabel>> {
    check(logits, tau)?;
    let soft = softmax_rows(&((logits + noise) / tau));
    let hard = onehot_rows(&soft);
    Ok(soft
        .rows()
        .into_iter()
        .zip(hard.rows())
        .map(|(s, h)| PseudoLabel {
            onehot: h.to_vec(),
            soft: s.to_vec(),
            tau,
        })
        .collect())
}

/// Forward value is the one-hot; the gradient passes to the soft sample
/// unchanged.
struct StraightThrough;

impl CustomOp for StraightThrough {
    fn backward(&self, _parents: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        vec![Some(grad.clone())]
    }
}

/// Tape version: returns `(onehot, soft)` where `onehot` carries the
/// straight-through gradient into `logits`.
pub fn gumbel_softmax_st<'t>(logits: Var<'t>, noise: &Mat, tau: f64) -> Result<(Var<'t>, Var<'t>)> {
    check(&logits.value(), tau)?;
    let soft = (logits + logits.tape().constant(noise.clone()))
        .scale(1.0 / tau)
        .softmax_rows();
    let hard = onehot_rows(&soft.value());
    let st = logits
        .tape()
        .custom(&[soft], hard, Box::new(StraightThrough));
    Ok((st, soft))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, relative_error, Tape};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_takes_argmax() {
        let l = gumbel_softmax(&array![[2.0, 0.0, 0.0]], &Mat::zeros((1, 3)), 1.0).unwrap();
        assert_eq!(l[0].onehot, vec![1.0, 0.0, 0.0]);
        assert_eq!(l[0].index(), 0);
    }

    #[test]
    fn low_temperature_soft_tends_to_onehot() {
        let l = gumbel_softmax(&array![[0.3, 0.1, 0.2]], &Mat::zeros((1, 3)), 1e-3).unwrap();
        assert!(l[0].soft[0] > 1.0 - 1e-12);
    }

    #[test]
    fn gumbel_max_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let logits = array![[0.8f64.ln(), 0.2f64.ln()]];
        let n = 100_000;
        let mut hits = 0;
        for _ in 0..n {
            let l = gumbel_softmax(&logits, &gumbel_noise(&mut rng, 1, 2), 1.0).unwrap();
            hits += usize::from(l[0].index() == 0);
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.8).abs() < 0.01, "{freq}");
    }

    #[test]
    fn hard_label_cases() {
        assert_eq!(
            hard_labels(&array![[0.8, 0.2], [0.5, 0.5], [0.1, 0.9]]),
            vec![0, 0, 1]
        );
        let q = array![[0.2, 0.5, 0.3]];
        assert_eq!(
            hard_labels(&q.select(ndarray::Axis(1), &[1, 2, 0])),
            vec![0]
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(gumbel_softmax(&array![[1.0]], &array![[0.0]], 0.0).is_err());
        assert!(gumbel_softmax(&array![[f64::NAN]], &array![[0.0]], 1.0).is_err());
    }

    #[test]
    fn straight_through_gradient_follows_soft_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l0 = array![[0.3, -0.2, 0.9], [1.1, 0.0, -0.5]];
        let noise = gumbel_noise(&mut rng, 2, 3);
        let w = array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.0]];
        let tape = Tape::new();
        let l = tape.leaf(l0.clone());
        let (hard, _) = gumbel_softmax_st(l, &noise, 0.7).unwrap();
        assert_eq!(hard.value(), onehot_rows(&hard.value()));
        let g = tape.backward(hard.mul_const(w.clone()).sum()).wrt(l);
        let fd = finite_diff(&l0, 1e-5, |x| {
            (softmax_rows(&((x + &noise) / 0.7)) * &w).sum()
        });
        assert!(relative_error(&g, &fd) < 1e-6);
    }

    proptest! {
        #[test]
        fn always_onehot(
            logits in prop::collection::vec(-20.0f64..20.0, 4),
            tau in 0.01f64..10.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = Mat::from_shape_vec((1, 4), logits).unwrap();
            let out = gumbel_softmax(&l, &gumbel_noise(&mut rng, 1, 4), tau).unwrap();
            let h = &out[0].onehot;
            prop_assert_eq!(h.iter().filter(|&&x| x == 1.0).count(), 1);
            prop_assert!(h.iter().all(|&x| x == 0.0 || x == 1.0));
            prop_assert!((out[0].soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn deterministic_under_seed(seed in 0u64..1000) {
            let a = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(seed), 2, 3);
            let b = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(seed), 2, 3);
            prop_assert_eq!(a, b);
        }
    }
}
