//! Gaussian policy and value function.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{ForwardCache, Mlp};
use crate::error::Result;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

/// Widths of the two hidden layers.
pub const HIDDEN: usize = 64;

fn architecture(input_dim: usize) -> [usize; 4] {
    [input_dim, HIDDEN, HIDDEN, 1]
}

/// Stochastic policy `N(μ_θ(o), σ²)` with a state-independent `log σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub net: Mlp,
    pub log_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub net: Mlp,
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Self {
        PolicyParams {
            net: Mlp::orthogonal(&architecture(input_dim), 2f64.sqrt(), 0.01, rng),
            log_std: 0.5f64.ln(),
        }
    }

    pub fn zeros(input_dim: usize) -> Self {
        PolicyParams {
            net: Mlp::zeros(&architecture(input_dim)),
            log_std: 0.5f64.ln(),
        }
    }

    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
    }

    pub fn is_finite(&self) -> bool {
        self.log_std.is_finite() && self.net.params().iter().all(|x| x.is_finite())
    }
}

impl ValueParams {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Self {
        ValueParams {
            net: Mlp::orthogonal(&architecture(input_dim), 2f64.sqrt(), 1.0, rng),
        }
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        self.net.forward(obs)
    }

    pub fn value_cached(&self, obs: &[f64], cache: &mut ForwardCache) -> Result<f64> {
        self.net.forward_cached(obs, cache)
    }
}

/// `(mean, std)` of the action distribution.
pub fn policy_forward(params: &PolicyParams, obs: &[f64]) -> Result<(f64, f64)> {
    Ok((params.net.forward(obs)?, params.std()))
}

/// Log-density of `N(mean, exp(log_std)²)` at `action`.
pub fn gaussian_log_prob(action: f64, mean: f64, log_std: f64) -> f64 {
    let z = (action - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * PI).ln()
}

pub fn gaussian_entropy(log_std: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E).ln() + log_std
}

/// Samples an (unclamped) action and its log-probability.
pub fn sample_action<R: Rng + ?Sized>(
    params: &PolicyParams,
    obs: &[f64],
    rng: &mut R,
) -> Result<(f64, f64)> {
    let (mean, std) = policy_forward(params, obs)?;
    let noise: f64 = rng.sample(StandardNormal);
    let action = mean + std * noise;
    Ok((action, gaussian_log_prob(action, mean, params.log_std)))
}

/// The distribution mean, used for evaluation.
pub fn deterministic_action(params: &PolicyParams, obs: &[f64]) -> Result<f64> {
    params.net.forward(obs)
}
