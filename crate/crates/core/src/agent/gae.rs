//! Rollout buffers and advantage estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One episode (or episode fragment) collected under a fixed policy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    /// Sampled actions, before the environment clamps them.
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Value of the state after the last step; zero for a finished episode.
    pub bootstrap_value: f64,
}

impl Trajectory {
    pub fn push(&mut self, obs: Vec<f64>, action: f64, log_prob: f64, reward: f64, value: f64) {
        self.observations.push(obs);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Undiscounted return `Σ r_t`.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn check(&self) -> Result<()> {
        let n = self.rewards.len();
        if n == 0 {
            return Err(Error::domain("empty trajectory"));
        }
        if [
            self.observations.len(),
            self.actions.len(),
            self.log_probs.len(),
            self.values.len(),
        ]
        .iter()
        .any(|&m| m != n)
        {
            return Err(Error::integrity("trajectory buffers differ in length"));
        }
        Ok(())
    }
}

/// Generalised advantage estimates and the matching value targets,
/// `returns = advantages + values`. Advantages are not normalised here.
pub fn compute_gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    traj.check()?;
    let n = traj.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n {
            traj.values[t + 1]
        } else {
            traj.bootstrap_value
        };
        let delta = traj.rewards[t] + gamma * next_value - traj.values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(&traj.values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Discounted reward-to-go, bootstrapped from `bootstrap_value`.
pub fn reward_to_go(traj: &Trajectory, gamma: f64) -> Result<Vec<f64>> {
    traj.check()?;
    let mut out = vec![0.0; traj.len()];
    let mut running = traj.bootstrap_value;
    for t in (0..traj.len()).rev() {
        running = traj.rewards[t] + gamma * running;
        out[t] = running;
    }
    Ok(out)
}

/// Shifts and scales to zero mean and unit variance. A constant batch is
/// only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}
