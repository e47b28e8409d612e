//! Episodic decision process around the coupled simulation.
//!
//! The agent observes a pooled density profile (plus the AV's position and
//! speed), commands a speed in `[0, 1]·v_max` that is held for one control
//! interval, and is rewarded with
//! `r = w1·Φ + w2·ẏ − w3·TV(v)` averaged over the interval's solver steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::scenario::ScenarioConfig;
use crate::solver::{AvState, Simulation, StepReport, TrafficState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl RewardWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        let w = RewardWeights { w1, w2, w3 };
        let v = w.violations();
        if v.is_empty() {
            Ok(w)
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w.is_finite() && w >= 0.0) {
                out.push(format!("reward.{name} must be >= 0 (got {w})"));
            }
        }
        if !(self.w1 + self.w2 + self.w3 > 0.0) {
            out.push("reward weights must not all be zero".into());
        }
        out
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w1: 0.2,
            w2: 0.3,
            w3: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub reward: RewardWeights,
    /// Number of pooled density bins in the observation.
    pub observation_bins: usize,
    pub cfl: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            reward: RewardWeights::default(),
            observation_bins: 40,
            cfl: 0.9,
        }
    }
}

impl EnvConfig {
    pub fn violations(&self, n_cells: usize) -> Vec<String> {
        let mut out = self.reward.violations();
        if self.observation_bins == 0 || self.observation_bins > n_cells {
            out.push(format!(
                "env.observation_bins must lie in [1, {n_cells}] (got {})",
                self.observation_bins
            ));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            out.push(format!("env.cfl must lie in (0, 1] (got {})", self.cfl));
        }
        out
    }
}

/// Normalised observation: `observation_bins` pooled densities, then `y/L`,
/// then `ẏ/v_max`. Every entry lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Diagnostics of one control interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    /// Φ at the end of the interval.
    pub min_flux: f64,
    /// TV of the velocity field at the end of the interval.
    pub total_variation: f64,
    /// Mean realized AV speed over the interval.
    pub ego_speed: f64,
    /// Commanded speed applied during the interval.
    pub v_cmd: f64,
    /// Largest `F − ẏρ_up − F_α(ẏ)` seen at the AV interface.
    pub constraint_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// `Φ = min_x f(ρ(x))`.
pub fn min_flux(state: &TrafficState, p: &FlowParams) -> f64 {
    state
        .densities
        .iter()
        .map(|&r| p.flux_unchecked(r))
        .fold(f64::INFINITY, f64::min)
}

/// `Σ |a_{j+1} − a_j|` without a wrap-around term.
pub fn total_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("total variation of an empty sequence"));
    }
    Ok(values.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
}

/// Total variation of the velocity field `v(ρ)`.
pub fn velocity_total_variation(state: &TrafficState, p: &FlowParams) -> f64 {
    // v is affine, so TV(v) = (v_max/ρ_max)·TV(ρ)
    let tv: f64 = state
        .densities
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .sum();
    tv * p.v_max / p.rho_max
}

/// `w1·Φ + w2·ẏ − w3·TV(v)`.
pub fn reward(state: &TrafficState, av: &AvState, weights: &RewardWeights, p: &FlowParams) -> f64 {
    weights.w1 * min_flux(state, p) + weights.w2 * av.y_dot
        - weights.w3 * velocity_total_variation(state, p)
}

/// Cell-average pooling of `densities` into `bins` bins, normalised by `rho_max`.
pub fn pool_densities(densities: &[f64], bins: usize, rho_max: f64) -> Vec<f64> {
    let n = densities.len();
    (0..bins)
        .map(|b| {
            let lo = b * n / bins;
            let hi = ((b + 1) * n / bins).max(lo + 1);
            let sum: f64 = densities[lo..hi].iter().sum();
            (sum / (hi - lo) as f64 / rho_max).clamp(0.0, 1.0)
        })
        .collect()
}

pub fn observe(sim: &Simulation, bins: usize) -> Observation {
    let p = sim.params();
    let mut obs = pool_densities(&sim.state().densities, bins, p.rho_max);
    let length = sim.grid().length;
    obs.push((sim.av().y / length).clamp(0.0, 1.0));
    obs.push((sim.av().y_dot / p.v_max).clamp(0.0, 1.0));
    Observation(obs)
}

/// Anything that maps observations to actions in `[0, 1]`.
pub trait Controller {
    fn act(&mut self, obs: &Observation) -> Result<f64>;
}

/// Constant action. `ConstantController(1.0)` is the no-control baseline.
#[derive(Debug, Clone, Copy)]
pub struct ConstantController(pub f64);

impl Controller for ConstantController {
    fn act(&mut self, _obs: &Observation) -> Result<f64> {
        Ok(self.0)
    }
}

impl<F: FnMut(&Observation) -> f64> Controller for F {
    fn act(&mut self, obs: &Observation) -> Result<f64> {
        Ok(self(obs))
    }
}

/// One environment instance. Instances share nothing and are `Send`.
#[derive(Debug, Clone)]
pub struct TrafficEnv {
    scenario: ScenarioConfig,
    config: EnvConfig,
    sim: Simulation,
    substeps: usize,
    dt_sub: f64,
    steps_taken: usize,
    seed: u64,
}

impl TrafficEnv {
    pub fn new(scenario: ScenarioConfig, config: EnvConfig) -> Result<Self> {
        let mut problems = scenario.violations();
        problems.extend(config.violations(scenario.grid.n_cells));
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let sim = scenario.build()?.into_simulation()?;
        let dt_cfl = crate::solver::cfl_timestep(&scenario.grid, &scenario.flow, config.cfl);
        let substeps = (scenario.dt_ctrl / dt_cfl - 1e-9).ceil().max(1.0) as usize;
        let dt_sub = scenario.dt_ctrl / substeps as f64;
        let seed = scenario.seed;
        Ok(TrafficEnv {
            scenario,
            config,
            sim,
            substeps,
            dt_sub,
            steps_taken: 0,
            seed,
        })
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn observation_dim(&self) -> usize {
        self.config.observation_bins + 2
    }

    /// Control intervals per episode.
    pub fn episode_len(&self) -> usize {
        self.scenario.episode_len()
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn dt_sub(&self) -> f64 {
        self.dt_sub
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn is_done(&self) -> bool {
        self.steps_taken >= self.episode_len()
    }

    /// Rebuilds the world. The dynamics are deterministic; the seed is kept
    /// for callers that derive their own streams from it.
    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.sim = self.scenario.build()?.into_simulation()?;
        self.steps_taken = 0;
        self.seed = seed;
        Ok(self.observe())
    }

    pub fn observe(&self) -> Observation {
        observe(&self.sim, self.config.observation_bins)
    }

    pub fn step(&mut self, action: f64) -> Result<EnvStep> {
        self.step_observed(action, |_, _| {})
    }

    /// Like [`step`](Self::step), calling `on_substep` after every solver step.
    pub fn step_observed(
        &mut self,
        action: f64,
        mut on_substep: impl FnMut(&Simulation, &StepReport),
    ) -> Result<EnvStep> {
        if self.is_done() {
            return Err(Error::State("episode already finished".into()));
        }
        if action.is_nan() {
            return Err(Error::domain("action is NaN"));
        }
        let p = *self.sim.params();
        let w = self.config.reward;
        let v_cmd = action.clamp(0.0, 1.0) * p.v_max;
        self.sim.set_command(v_cmd);

        let mut reward_sum = 0.0;
        let mut ego_sum = 0.0;
        let mut residual = f64::NEG_INFINITY;
        for _ in 0..self.substeps {
            let report = self.sim.advance(self.dt_sub)?;
            if let Some(iface) = report.av_interface {
                ego_sum += iface.y_dot;
                residual = residual.max(iface.constraint_residual(&p));
            } else {
                ego_sum += self.sim.av().y_dot;
            }
            reward_sum += reward(self.sim.state(), self.sim.av(), &w, &p);
            on_substep(&self.sim, &report);
        }
        self.steps_taken += 1;
        let reward = reward_sum / self.substeps as f64;

        let n = self.sim.grid().n_cells as f64;
        let upper = w.w1 * p.capacity() + w.w2 * p.v_max;
        let lower = -w.w3 * 2.0 * n * p.v_max;
        if !(reward.is_finite() && reward >= lower - 1e-12 && reward <= upper + 1e-12) {
            return Err(Error::integrity(format!(
                "reward {reward} outside [{lower}, {upper}]"
            )));
        }

        let state = self.sim.state();
        Ok(EnvStep {
            observation: self.observe(),
            reward,
            done: self.is_done(),
            info: StepInfo {
                min_flux: min_flux(state, &p),
                total_variation: velocity_total_variation(state, &p),
                ego_speed: ego_sum / self.substeps as f64,
                v_cmd,
                constraint_residual: if residual.is_finite() { residual } else { 0.0 },
            },
        })
    }

    /// Runs a whole episode from reset and returns the undiscounted return.
    pub fn rollout(&mut self, controller: &mut impl Controller) -> Result<f64> {
        let mut obs = self.reset(self.seed)?;
        let mut total = 0.0;
        loop {
            let step = self.step(controller.act(&obs)?)?;
            total += step.reward;
            obs = step.observation;
            if step.done {
                return Ok(total);
            }
        }
    }
}
