//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every parameter tensor, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub config: AdamWConfig,
}

impl OptimState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamWConfig) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
            config,
        }
    }
}

/// One AdamW update of `params` in place; the learning rate is supplied by the schedule.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], opt: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(shape_err!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            opt.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != opt.m[i].shape() {
            return Err(shape_err!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    let c = opt.config;
    opt.t += 1;
    let bc1 = 1.0 - c.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - c.beta2.powi(opt.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *pj -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pj);
        }
    }
    Ok(())
}

/// `lr0 · (1 + cos(π · step / total)) / 2`, clamped to the schedule's range.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (PI * s).cos()) / 2.0
}
