//! AdamW with decoupled weight decay and the warmup-then-constant schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_max: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 1000,
        }
    }
}

/// Linear warmup to `lr_max` over `warmup` steps, then constant. Steps are 1-based.
pub fn lr_at(step: u64, warmup: u64, lr_max: f64) -> f64 {
    if warmup == 0 || step >= warmup {
        lr_max
    } else {
        lr_max * step as f64 / warmup as f64
    }
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimState<E: Element> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Element> OptimState<E> {
    pub fn new(config: AdamWConfig, params: &[&Tensor<E>]) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One bias-corrected AdamW update. Decay is applied as
    /// `θ ← θ − lr·wd·θ` before the adaptive step.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<E>],
        grads: &[Tensor<E>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if lr < 0.0 {
            return Err(Error::Contract(format!("negative learning rate {lr}")));
        }
        let next = self.step + 1;
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape("adamw_step", params[i].shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    step: next,
                    what: format!("gradient of parameter {i}"),
                });
            }
        }
        self.step = next;

        let c = &self.config;
        let (b1, b2) = (E::of(c.beta1), E::of(c.beta2));
        let one = E::one();
        let bc1 = one - E::of(c.beta1.powi(next as i32));
        let bc2 = one - E::of(c.beta2.powi(next as i32));
        let lr_e = E::of(lr);
        let decay = E::of(lr * c.weight_decay);
        let eps = E::of(c.eps);

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = p.data_mut();
            for j in 0..theta.len() {
                if c.weight_decay != 0.0 {
                    theta[j] = theta[j] - decay * theta[j];
                }
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] = theta[j] - lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
