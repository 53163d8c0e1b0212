use serde::{Deserialize, Serialize};

use super::{shape_err, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are created lazily on
/// the first step and keyed by parameter position, so callers must pass
/// parameters in the same order on every step.
#[derive(Debug, Clone)]
pub struct AdamW<R> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update using `config.lr` for every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor<R>], grads: &[&Tensor<R>]) -> Result<()> {
        let lrs = vec![self.config.lr; params.len()];
        self.step_with_lrs(params, grads, &lrs)
    }

    /// One update with a learning rate per parameter.
    pub fn step_with_lrs(
        &mut self,
        params: &mut [&mut Tensor<R>],
        grads: &[&Tensor<R>],
        lrs: &[f64],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(shape_err(
                "adamw_step",
                format!("{} params, {} grads, {} rates", params.len(), grads.len(), lrs.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err(
                    "adamw_step",
                    format!("param {i} is {:?}, grad is {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![R::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(shape_err("adamw_step", "parameter set changed between steps"));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
        let (ob1, ob2) = (R::of(1.0 - c.beta1), R::of(1.0 - c.beta2));
        let eps = R::of(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = lrs[i];
            let decay = R::of(1.0 - lr * c.weight_decay);
            let step = R::of(lr / bc1);
            let inv_bc2 = R::of(1.0 / bc2);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + ob1 * gr;
                *vi = b2 * *vi + ob2 * gr * gr;
                *w = *w * decay - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
