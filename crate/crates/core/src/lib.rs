//! Mixed-autonomy traffic laboratory.
//!
//! Bulk traffic is an LWR conservation law with a Greenshields diagram; one
//! autonomous vehicle acts as a moving bottleneck whose commanded speed is
//! learned with PPO. The crate is organised bottom-up:
//!
//! - [`flow`]: fundamental diagram and bottleneck geometry
//! - [`solver`]: Godunov finite-volume scheme coupled to the AV trajectory
//! - [`scenario`]: initial data and experiment presets
//! - [`env`]: the decision process (observation, action, reward)
//! - [`agent`]: Gaussian actor-critic trained with PPO
//! - [`metrics`]: evaluation, exports and learning-curve summaries
//! - [`config`]: experiment files

pub mod agent;
pub mod config;
pub mod env;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod scenario;
pub mod solver;

pub use agent::{ActionMode, Checkpoint, Hyperparams, PolicyParams, Trainer};
pub use config::ExperimentConfig;
pub use env::{Controller, EnvConfig, Observation, RewardWeights, TrafficEnv};
pub use error::{Error, Result};
pub use flow::FlowParams;
pub use scenario::{InitialCondition, ScenarioConfig};
pub use solver::{AvState, Boundary, Grid, Simulation, TrafficState};
pub use metrics::{EpisodeMetrics, MetricsSummary};
