use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup_steps: 200 }
    }
}

/// Moment estimates aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// AdamW with decoupled weight decay and linear warmup.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub state: AdamWState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let m: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { cfg, state: AdamWState { step: 0, v: m.clone(), m } }
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * (step as f64 / self.cfg.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies one update. `grads[i]` of `None` counts as a zero gradient;
    /// frozen parameters are never touched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        ensure!(grads.len() == params.len(), Shape, "{} grads for {} params", grads.len(), params.len());
        ensure!(self.state.m.len() == params.len(), State, "optimizer state does not match params");
        self.state.step += 1;
        let t = self.state.step;
        let lr = self.learning_rate(t);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::of(1.0 - libm::pow(b1, t as f64));
        let bc2 = T::of(1.0 - libm::pow(b2, t as f64));
        let (b1, b2, eps, lr_t) = (T::of(b1), T::of(b2), T::of(self.cfg.eps), T::of(lr));
        let wd = T::of(lr * self.cfg.weight_decay);
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let w = p.value.data_mut();
            ensure!(m.len() == w.len(), State, "optimizer state shape for {}", p.name);
            let decay = p.decay && self.cfg.weight_decay != 0.0;
            match &grads[i] {
                Some(g) => {
                    for j in 0..w.len() {
                        m[j] = b1 * m[j] + (one - b1) * g[j];
                        v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                        if decay {
                            w[j] -= wd * w[j];
                        }
                        w[j] -= lr_t * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..w.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                        if decay {
                            w[j] -= wd * w[j];
                        }
                        w[j] -= lr_t * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
