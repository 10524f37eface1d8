use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr0: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Annealed learning rate `lr0 / (1 + 10 p)^0.75` with `p = epoch / total_epochs`.
pub fn lr_schedule(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    let p = if total_epochs == 0 {
        0.0
    } else {
        epoch as f64 / total_epochs as f64
    };
    lr0 / (1.0 + 10.0 * p).powf(0.75)
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, params: &[Tensor<F>]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Applies one update and returns the effective learning rate used.
    pub fn step(
        &mut self,
        params: &mut [Tensor<F>],
        grads: &[Tensor<F>],
        epoch: usize,
        total_epochs: usize,
    ) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            if p.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.shape(), m.shape()));
            }
        }
        let cfg = &self.config;
        let lr = lr_schedule(cfg.lr0, epoch, total_epochs);
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let (b1, b2) = (F::c(cfg.beta1), F::c(cfg.beta2));
        let (one_b1, one_b2) = (F::c(1.0 - cfg.beta1), F::c(1.0 - cfg.beta2));
        let decay = F::c(1.0 - lr * cfg.weight_decay);
        let step_size = F::c(lr / bc1);
        let inv_bc2 = F::c(1.0 / bc2);
        let eps = F::c(cfg.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + one_b1 * gd[i];
                vd[i] = b2 * vd[i] + one_b2 * gd[i] * gd[i];
                pd[i] *= decay;
                pd[i] -= step_size * md[i] / ((vd[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
