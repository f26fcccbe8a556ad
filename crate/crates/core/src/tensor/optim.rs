//! First-order optimizers over tensor leaves.
//!
//! Parameters without gradients or with gradient tracking switched off are
//! skipped, so frozen tensors are never written.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::scalar::Scalar;

pub trait Optimizer<T: Scalar> {
    /// Applies one update to every trainable parameter that carries a gradient.
    fn step(&mut self, params: &[Tensor<T>]);

    fn zero_grad(&self, params: &[Tensor<T>]) {
        params.iter().for_each(Tensor::zero_grad);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

/// Adam with bias correction. Moments are keyed by tensor identity and each
/// parameter keeps its own step count, so tensors that join late start from
/// a properly corrected first step.
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    steps: u64,
    state: HashMap<u64, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            steps: 0,
            state: HashMap::new(),
        }
    }

    /// Number of `step` calls so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Adam update of `param` in place from `grad`.
    pub fn update(&mut self, key: u64, param: &mut [T], grad: &[T]) {
        assert_eq!(param.len(), grad.len(), "parameter/gradient length mismatch");
        let n = param.len();
        let st = self.state.entry(key).or_insert_with(|| Moments {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        });
        st.t += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let c1 = T::one() - b1.powi(st.t as i32);
        let c2 = T::one() - b2.powi(st.t as i32);
        let lr = T::of(self.cfg.lr);
        let eps = T::of(self.cfg.eps);
        for i in 0..n {
            let g = grad[i];
            st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
            st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
            let mh = st.m[i] / c1;
            let vh = st.v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    pub fn forget(&mut self, key: u64) {
        self.state.remove(&key);
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &[Tensor<T>]) {
        self.steps += 1;
        for p in params {
            if !p.requires_grad() || !p.is_leaf() {
                continue;
            }
            let grad = p.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let g = g.clone();
            drop(grad);
            self.update(p.id(), &mut p.data_mut(), &g);
        }
    }
}

/// SGD with optional heavy-ball momentum.
pub struct Sgd<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &[Tensor<T>]) {
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for p in params {
            if !p.requires_grad() || !p.is_leaf() {
                continue;
            }
            let Some(g) = p.grad() else { continue };
            let v = self.velocity.entry(p.id()).or_insert_with(|| vec![T::zero(); g.len()]);
            let mut d = p.data_mut();
            for i in 0..g.len() {
                v[i] = mu * v[i] + g[i];
                d[i] -= lr * v[i];
            }
        }
    }
}
