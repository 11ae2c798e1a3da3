use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

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

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update using `param.grad * grad_scale`, then
/// zeroes the gradient. A parameter with no gradient buffer is treated as
/// having a zero gradient.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState, grad_scale: f64) -> Result<()> {
    if let Some(g) = param.grad() {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {bad} in adam_step")));
        }
    }
    let len = param.len();
    assert_eq!(state.m.len(), len);
    let grad = param.grad_mut().clone();
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let data = param.data_mut();
    for i in 0..len {
        let g = grad[i] * grad_scale;
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    param.zero_grad();
    Ok(())
}

/// L2 norm of all gradients in the store taken together.
pub fn global_grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Factor that rescales gradients so their global norm is at most `clip_norm`.
/// A non-positive `clip_norm` disables clipping.
pub fn clip_scale(norm: f64, clip_norm: f64) -> f64 {
    if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    }
}

/// Adam over every tensor of a [`ParamStore`] with global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub states: Vec<AdamState>,
    pub clip_norm: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig, clip_norm: f64) -> Self {
        Adam {
            states: params.iter().map(|(_, t)| AdamState::new(t.len(), config)).collect(),
            clip_norm,
        }
    }

    /// Returns the pre-clipping global gradient norm. Nothing is updated if
    /// any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<f64> {
        let norm = global_grad_norm(params);
        if !norm.is_finite() {
            return Err(Error::NonFinite("global gradient norm".into()));
        }
        let scale = clip_scale(norm, self.clip_norm);
        for (t, s) in params.tensors_mut().iter_mut().zip(&mut self.states) {
            adam_step(t, s, scale)?;
        }
        Ok(norm)
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask_with<R: Rng>(rng: &mut R, shape: &[usize], rate: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Usage(format!("dropout rate {rate} outside [0, 1)")));
    }
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let data = if rate == 0.0 {
        vec![1.0; n]
    } else {
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect()
    };
    Tensor::new(shape.to_vec(), data)
}

pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Result<Tensor> {
    dropout_mask_with(&mut ChaCha8Rng::seed_from_u64(seed), shape, rate)
}
