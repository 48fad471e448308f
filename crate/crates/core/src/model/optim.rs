use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-6;

/// Soft Dice loss `1 - (2 sum(p g) + s) / (sum p + sum g + s)` and its
/// gradient with respect to `pred`.
pub fn dice_loss(pred: &[f64], gt: &[u8]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        let g = g as f64;
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_g + DICE_SMOOTH;
    let loss = 1.0 - num / den;
    let grad = gt
        .iter()
        .map(|&g| -(2.0 * g as f64 * den - num) / (den * den))
        .collect();
    Ok((loss, grad))
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Coupled L2 penalty added to the gradient.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Fails without touching anything when a
/// gradient entry is not finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {} at step {}",
            grads[i],
            state.t + 1
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] + cfg.weight_decay * params[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
