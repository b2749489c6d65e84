//! Adam with bias correction and an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrMode {
    /// Linear warmup to the peak, then `peak · sqrt(warmup / step)`.
    InverseSqrt,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub mode: LrMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            peak_lr: 7e-4,
            warmup_steps: 4000,
            mode: LrMode::InverseSqrt,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl AdamConfig {
    /// Constant learning rate, as used for fine-tuning.
    pub fn fixed(lr: f64) -> Self {
        AdamConfig {
            peak_lr: lr,
            mode: LrMode::Fixed,
            ..Default::default()
        }
    }
}

/// Moment accumulators and step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        if config.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be positive".into()));
        }
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Ok(OptimizerState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.first[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.second[param]
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        lr_schedule(self.step + 1, &self.config).expect("step + 1 is positive")
    }
}

/// Learning rate at 1-based `step`.
pub fn lr_schedule(step: u64, config: &AdamConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Domain("learning-rate steps are 1-based".into()));
    }
    Ok(match config.mode {
        LrMode::Fixed => config.peak_lr,
        LrMode::InverseSqrt => {
            let s = step as f64;
            let w = config.warmup_steps as f64;
            config.peak_lr * (s / w).min((w / s).sqrt())
        }
    })
}

/// One Adam update of every parameter that has a gradient.
///
/// Gradients are checked for finiteness before anything is modified, so a
/// failed step leaves both parameters and moments untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    for (id, g) in grads.params() {
        if g.shape() != params.get(*id).shape() {
            return Err(Error::Dimension(format!(
                "gradient for {} has shape {:?}",
                params.name(*id),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", params.name(*id))));
        }
    }
    if state.first.len() != params.len() {
        return Err(Error::Dimension("optimizer state does not match parameters".into()));
    }
    let lr = lr_schedule(state.step + 1, &state.config)?;
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (id, g) in grads.params() {
        let m = &mut state.first[id.index()];
        let v = &mut state.second[id.index()];
        let p = params.get_mut(*id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}
