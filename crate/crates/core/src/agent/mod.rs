//! Actor-critic speed controller trained with PPO.

pub mod adam;
pub mod checkpoint;
pub mod gae;
pub mod network;
pub mod policy;
pub mod ppo;
pub mod train;

pub use checkpoint::Checkpoint;
pub use gae::{compute_gae, Trajectory};
pub use policy::{deterministic_action, policy_forward, sample_action, PolicyParams, ValueParams};
pub use ppo::{ppo_update, Batch, CriticTarget, Hyperparams, Optimizers, UpdateStats};
pub use train::{train, Environment, QuadraticBandit, Trainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Controller, Observation};
use crate::error::Result;

/// How a trained policy picks actions at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Samples from the Gaussian policy.
    Stochastic,
    /// Uses the distribution mean.
    Deterministic,
}

/// Adapts a policy to the [`Controller`] interface.
#[derive(Debug, Clone)]
pub struct PolicyController<'a> {
    policy: &'a PolicyParams,
    mode: ActionMode,
    rng: ChaCha8Rng,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a PolicyParams, mode: ActionMode, seed: u64) -> Self {
        PolicyController {
            policy,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, obs: &Observation) -> Result<f64> {
        match self.mode {
            ActionMode::Deterministic => deterministic_action(self.policy, obs.as_slice()),
            ActionMode::Stochastic => {
                sample_action(self.policy, obs.as_slice(), &mut self.rng).map(|(a, _)| a)
            }
        }
    }
}
