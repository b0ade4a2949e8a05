//! Adam and the learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// Updates taken so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters the loss never reached are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.cfg.eps * c2.sqrt());
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = tb1 * *m + ob1 * g;
                *v = tb2 * *v + ob2 * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    /// Halve when a window's mean loss fails to improve enough on the last.
    Plateau,
    /// Multiply by `step_factor` at each milestone.
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrScheduler {
    pub decay: LrDecay,
    pub lr_start: f64,
    pub lr_end: f64,
    pub window: usize,
    pub min_improvement: f64,
    pub milestones: Vec<usize>,
    pub step_factor: f64,
    lr: f64,
    window_sum: f64,
    window_len: usize,
    prev_mean: Option<f64>,
}

impl LrScheduler {
    pub fn plateau(lr_start: f64, lr_end: f64, window: usize, min_improvement: f64) -> Self {
        LrScheduler {
            decay: LrDecay::Plateau,
            lr_start,
            lr_end,
            window: window.max(1),
            min_improvement,
            milestones: Vec::new(),
            step_factor: 0.5,
            lr: lr_start,
            window_sum: 0.0,
            window_len: 0,
            prev_mean: None,
        }
    }

    pub fn step(lr_start: f64, lr_end: f64, milestones: Vec<usize>, factor: f64) -> Self {
        LrScheduler {
            decay: LrDecay::Step,
            milestones,
            step_factor: factor,
            ..LrScheduler::plateau(lr_start, lr_end, 1, 0.0)
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record the loss of iteration `iter` (0-based) and return the rate
    /// for the next one.
    pub fn observe(&mut self, iter: usize, loss: f64) -> f64 {
        match self.decay {
            LrDecay::Plateau => {
                self.window_sum += loss;
                self.window_len += 1;
                if self.window_len == self.window {
                    let mean = self.window_sum / self.window as f64;
                    if let Some(prev) = self.prev_mean {
                        if mean > prev * (1.0 - self.min_improvement) {
                            self.lr *= 0.5;
                        }
                    }
                    self.prev_mean = Some(mean);
                    self.window_sum = 0.0;
                    self.window_len = 0;
                }
            }
            LrDecay::Step => {
                let passed = self.milestones.iter().filter(|&&m| m <= iter + 1).count();
                self.lr = self.lr_start * self.step_factor.powi(passed as i32);
            }
        }
        self.lr = self.lr.clamp(self.lr_end, self.lr_start);
        self.lr
    }
}
