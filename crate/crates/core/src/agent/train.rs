//! Rollout collection and the training loop.
//!
//! Every episode draws its own sampling stream from the trainer's master
//! generator before any rollout starts, so results do not depend on how
//! episodes are spread over worker threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gae::Trajectory;
use super::policy::{sample_action, PolicyParams, ValueParams};
use super::ppo::{ppo_update, Batch, Hyperparams, Optimizers, UpdateStats};
use crate::env::{Observation, TrafficEnv};
use crate::error::{Error, Result};

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment with a scalar continuous action.
pub trait Environment: Send {
    fn observation_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Observation>;
    fn step(&mut self, action: f64) -> Result<Transition>;
}

impl Environment for TrafficEnv {
    fn observation_dim(&self) -> usize {
        TrafficEnv::observation_dim(self)
    }

    fn reset(&mut self, seed: u64) -> Result<Observation> {
        TrafficEnv::reset(self, seed)
    }

    fn step(&mut self, action: f64) -> Result<Transition> {
        let s = TrafficEnv::step(self, action)?;
        Ok(Transition {
            observation: s.observation,
            reward: s.reward,
            done: s.done,
        })
    }
}

/// Single-state environment rewarding `−(a − target)²`, one step per episode.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticBandit {
    pub target: f64,
}

impl Environment for QuadraticBandit {
    fn observation_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, _seed: u64) -> Result<Observation> {
        Ok(Observation(vec![1.0]))
    }

    fn step(&mut self, action: f64) -> Result<Transition> {
        Ok(Transition {
            observation: Observation(vec![1.0]),
            reward: -(action - self.target).powi(2),
            done: true,
        })
    }
}

/// Guard against environments that never terminate.
const MAX_EPISODE_STEPS: usize = 1_000_000;

/// Runs one full episode under the stochastic policy.
pub fn collect_episode<E: Environment + ?Sized>(
    env: &mut E,
    policy: &PolicyParams,
    value: &ValueParams,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset(seed)?;
    let mut traj = Trajectory::default();
    for _ in 0..MAX_EPISODE_STEPS {
        let (action, log_prob) = sample_action(policy, obs.as_slice(), &mut rng)?;
        let v = value.value(obs.as_slice())?;
        let t = env.step(action)?;
        traj.push(obs.0, action, log_prob, t.reward, v);
        obs = t.observation;
        if t.done {
            traj.bootstrap_value = 0.0;
            return Ok(traj);
        }
    }
    Err(Error::State(format!(
        "episode exceeded {MAX_EPISODE_STEPS} steps"
    )))
}

/// Collects `seeds.len()` episodes over the given environments, one worker
/// thread per environment when there is more than one.
pub fn collect_episodes<E: Environment>(
    envs: &mut [E],
    policy: &PolicyParams,
    value: &ValueParams,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    if envs.is_empty() {
        return Err(Error::domain("no environments to collect from"));
    }
    if envs.len() == 1 {
        let env = &mut envs[0];
        return seeds
            .iter()
            .map(|&s| collect_episode(env, policy, value, s))
            .collect();
    }
    let workers = envs.len();
    let mut slots: Vec<Option<Result<Trajectory>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = envs
            .iter_mut()
            .enumerate()
            .map(|(w, env)| {
                scope.spawn(move || {
                    seeds
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(k, &s)| (k, collect_episode(env, policy, value, s)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("rollout worker panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every episode assigned"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Mean undiscounted return of the iteration's episodes.
    pub mean_return: f64,
    pub stats: UpdateStats,
}

/// Everything needed to continue or reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub optimizers: Optimizers,
    pub hyper: Hyperparams,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    /// Mean episode return per completed iteration.
    pub curve: Vec<f64>,
}

impl Trainer {
    pub fn new(observation_dim: usize, hyper: Hyperparams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyParams::init(observation_dim, &mut rng);
        let value = ValueParams::init(observation_dim, &mut rng);
        let optimizers = Optimizers::new(&policy, &value, &hyper);
        Ok(Trainer {
            policy,
            value,
            optimizers,
            hyper,
            rng,
            iteration: 0,
            curve: Vec::new(),
        })
    }

    /// Collects `rollout_episodes` episodes and applies one PPO update.
    pub fn iterate<E: Environment>(&mut self, envs: &mut [E]) -> Result<IterationReport> {
        let seeds: Vec<u64> = (0..self.hyper.rollout_episodes)
            .map(|_| self.rng.next_u64())
            .collect();
        let trajs = collect_episodes(envs, &self.policy, &self.value, &seeds)?;
        let mean_return =
            trajs.iter().map(Trajectory::total_reward).sum::<f64>() / trajs.len() as f64;
        let batch = Batch::from_trajectories(&trajs, &self.hyper)?;
        let stats = ppo_update(
            &mut self.policy,
            &mut self.value,
            &mut self.optimizers,
            &batch,
            &self.hyper,
            &mut self.rng,
        )?;
        self.iteration += 1;
        self.curve.push(mean_return);
        Ok(IterationReport {
            iteration: self.iteration,
            mean_return,
            stats,
        })
    }
}

/// Builds `hyper.workers` environments from `factory` and trains for
/// `hyper.iterations` iterations, calling `on_iteration` after each.
pub fn train<E, F>(
    factory: F,
    hyper: Hyperparams,
    seed: u64,
    mut on_iteration: impl FnMut(&Trainer, &IterationReport) -> Result<()>,
) -> Result<Trainer>
where
    E: Environment,
    F: Fn() -> Result<E>,
{
    hyper.validate()?;
    let mut envs = (0..hyper.workers).map(|_| factory()).collect::<Result<Vec<E>>>()?;
    let mut trainer = Trainer::new(envs[0].observation_dim(), hyper, seed)?;
    for _ in 0..hyper.iterations {
        let report = trainer.iterate(&mut envs)?;
        on_iteration(&trainer, &report)?;
    }
    Ok(trainer)
}
