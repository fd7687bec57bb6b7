//! AdamW with decoupled weight decay, cosine annealing with warm restarts,
//! and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moments and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let first_moment = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        let second_moment = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        OptimizerState {
            config,
            step: 0,
            first_moment,
            second_moment,
        }
    }
}

/// One AdamW update over every non-frozen parameter.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for id in params.ids() {
        let g = &grads[id.index()];
        if g.shape() != params.get(id).shape() {
            return Err(Error::Dimension(format!(
                "adamw: grad for {} has shape {:?}, parameter has {:?}",
                params.name(id),
                g.shape(),
                params.get(id).shape()
            )));
        }
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {} at index {bad}",
                params.name(id)
            )));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for id in params.ids() {
        if params.is_frozen(id) {
            continue;
        }
        let g = grads[id.index()].data();
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        let p = params.get_mut(id).data_mut();
        let decay = 1.0 - lr * c.weight_decay;
        for i in 0..p.len() {
            p[i] *= decay;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmRestarts {
    pub t0: u64,
    pub t_mult: u64,
    pub lr_min: f64,
    pub lr_max: f64,
}

impl CosineWarmRestarts {
    pub fn new(t0: u64, t_mult: u64, lr_min: f64, lr_max: f64) -> Result<Self> {
        if t0 < 1 || t_mult < 1 || lr_min > lr_max {
            return Err(Error::Config(format!(
                "scheduler needs T_0 ≥ 1, T_mult ≥ 1, lr_min ≤ lr_max (got {t0}, {t_mult}, {lr_min}, {lr_max})"
            )));
        }
        Ok(CosineWarmRestarts {
            t0,
            t_mult,
            lr_min,
            lr_max,
        })
    }

    /// Position within the current cycle and that cycle's length.
    pub fn cycle_position(&self, step: u64) -> (u64, u64) {
        if self.t_mult == 1 {
            return (step % self.t0, self.t0);
        }
        let (mut t_cur, mut t_i) = (step, self.t0);
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i = t_i.saturating_mul(self.t_mult);
        }
        (t_cur, t_i)
    }

    pub fn lr(&self, step: u64) -> f64 {
        let (t_cur, t_i) = self.cycle_position(step);
        if t_cur == 0 {
            return self.lr_max;
        }
        let phase = std::f64::consts::PI * t_cur as f64 / t_i as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos())
    }
}

pub fn lr_schedule(step: u64, t0: u64, t_mult: u64, lr_min: f64, lr_max: f64) -> Result<f64> {
    Ok(CosineWarmRestarts::new(t0, t_mult, lr_min, lr_max)?.lr(step))
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
