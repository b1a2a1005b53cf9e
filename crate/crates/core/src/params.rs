//! Named parameter storage and the Adam optimizer.

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Grads, Mat, Tape, Var};

/// Ordered set of named parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Mat>,
}

pub type ParamGrads = IndexMap<String, Mat>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Glorot-uniform weight `prefix.w` (`fan_in × fan_out`) and zero bias
    /// `prefix.b` (`1 × fan_out`).
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        self.insert(format!("{prefix}.w"), glorot(fan_in, fan_out, rng));
        self.insert(format!("{prefix}.b"), Mat::zeros((1, fan_out)));
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }
}

pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Mat {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Affine map `x · prefix.w + prefix.b`.
    pub fn linear(&self, prefix: &str, x: Var<'t>) -> Var<'t> {
        x.matmul(self.get(&format!("{prefix}.w")))
            .add_row(self.get(&format!("{prefix}.b")))
    }

    pub fn grads(&self, grads: &Grads) -> ParamGrads {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt(*v)))
            .collect()
    }
}

/// Adds `src` into `dst` name by name.
pub fn accumulate(dst: &mut ParamGrads, src: &ParamGrads) {
    for (k, g) in src {
        match dst.get_mut(k) {
            Some(d) => *d += g,
            None => {
                dst.insert(k.clone(), g.clone());
            }
        }
    }
}

pub fn scale_grads(grads: &mut ParamGrads, k: f64) {
    for g in grads.values_mut() {
        g.mapv_inplace(|x| x * k);
    }
}

pub fn grads_finite(grads: &ParamGrads) -> bool {
    grads.values().all(|m| m.iter().all(|x| x.is_finite()))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: IndexMap<String, Mat>,
    v: IndexMap<String, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update of every parameter that has an entry in `grads`;
    /// parameters without one are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}
