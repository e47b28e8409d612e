//! Evaluation metrics, time-space exports and learning-curve summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ActionMode, PolicyController, PolicyParams};
use crate::env::{Controller, EnvConfig, TrafficEnv};
use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::scenario::ScenarioConfig;
use crate::solver::{Simulation, Snapshot, TrafficState};

/// Per-episode metrics, each averaged over every solver step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Time-space mean of `f(ρ)`.
    pub avg_flux: f64,
    /// Time mean of the AV's realized speed.
    pub ego_speed: f64,
    /// Vehicle-weighted mean speed, `Σ f(ρ) / Σ ρ` over time and space.
    pub avg_speed: f64,
    /// Time mean of the spatial standard deviation of `v(ρ)`.
    pub avg_deviation: f64,
    /// Smallest Φ over the episode.
    pub min_flux_over_time: f64,
    /// Time-space mean of `v(ρ)`, unweighted.
    pub mean_velocity: f64,
    /// Time mean of TV(v), the reward's penalty term.
    pub mean_total_variation: f64,
    /// TV of the commanded-speed sequence over control intervals.
    pub command_variation: f64,
    /// Undiscounted episode return.
    pub episode_return: f64,
}

impl EpisodeMetrics {
    pub const FIELDS: [&'static str; 9] = [
        "avg_flux",
        "ego_speed",
        "avg_speed",
        "avg_deviation",
        "min_flux_over_time",
        "mean_velocity",
        "mean_total_variation",
        "command_variation",
        "episode_return",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.avg_flux,
            self.ego_speed,
            self.avg_speed,
            self.avg_deviation,
            self.min_flux_over_time,
            self.mean_velocity,
            self.mean_total_variation,
            self.command_variation,
            self.episode_return,
        ]
    }

    fn from_values(v: [f64; 9]) -> Self {
        EpisodeMetrics {
            avg_flux: v[0],
            ego_speed: v[1],
            avg_speed: v[2],
            avg_deviation: v[3],
            min_flux_over_time: v[4],
            mean_velocity: v[5],
            mean_total_variation: v[6],
            command_variation: v[7],
            episode_return: v[8],
        }
    }
}

/// Running sums over solver steps.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    steps: usize,
    flux_sum: f64,
    density_sum: f64,
    velocity_sum: f64,
    deviation_sum: f64,
    tv_sum: f64,
    ego_sum: f64,
    min_flux: f64,
    commands: Vec<f64>,
    episode_return: f64,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        MetricsAccumulator {
            min_flux: f64::INFINITY,
            ..Default::default()
        }
    }

    /// Records one post-step density profile and the AV speed that held
    /// during the step.
    pub fn record_state(&mut self, state: &TrafficState, ego_speed: f64, p: &FlowParams) {
        let n = state.densities.len() as f64;
        let (mut flux, mut dens, mut vel, mut vel_sq) = (0.0, 0.0, 0.0, 0.0);
        let mut phi = f64::INFINITY;
        for &r in &state.densities {
            let v = p.velocity_unchecked(r);
            let f = r * v;
            flux += f;
            dens += r;
            vel += v;
            vel_sq += v * v;
            phi = phi.min(f);
        }
        let mean_v = vel / n;
        let var = (vel_sq / n - mean_v * mean_v).max(0.0);
        self.steps += 1;
        self.flux_sum += flux / n;
        self.density_sum += dens / n;
        self.velocity_sum += mean_v;
        self.deviation_sum += var.sqrt();
        self.tv_sum += crate::env::velocity_total_variation(state, p);
        self.ego_sum += ego_speed;
        self.min_flux = self.min_flux.min(phi);
    }

    pub fn record_command(&mut self, v_cmd: f64) {
        self.commands.push(v_cmd);
    }

    pub fn record_reward(&mut self, r: f64) {
        self.episode_return += r;
    }

    pub fn finish(&self, p: &FlowParams) -> Result<EpisodeMetrics> {
        if self.steps == 0 {
            return Err(Error::domain("no solver steps recorded"));
        }
        let k = self.steps as f64;
        let avg_speed = if self.density_sum > 0.0 {
            self.flux_sum / self.density_sum
        } else {
            p.v_max
        };
        let command_variation = if self.commands.is_empty() {
            0.0
        } else {
            crate::env::total_variation(&self.commands)?
        };
        Ok(EpisodeMetrics {
            avg_flux: self.flux_sum / k,
            ego_speed: self.ego_sum / k,
            avg_speed,
            avg_deviation: self.deviation_sum / k,
            min_flux_over_time: self.min_flux,
            mean_velocity: self.velocity_sum / k,
            mean_total_variation: self.tv_sum / k,
            command_variation,
            episode_return: self.episode_return,
        })
    }
}

/// Runs one episode, recording metrics and (optionally) snapshots every
/// `stride` solver steps.
pub fn run_episode(
    env: &mut TrafficEnv,
    controller: &mut impl Controller,
    seed: u64,
    stride: Option<usize>,
) -> Result<(EpisodeMetrics, Vec<Snapshot>)> {
    let mut obs = env.reset(seed)?;
    let p = *env.simulation().params();
    let mut acc = MetricsAccumulator::new();
    let mut trace = Vec::new();
    if stride.is_some() {
        trace.push(env.simulation().snapshot());
    }
    let mut substep = 0usize;
    loop {
        let action = controller.act(&obs)?;
        let step = env.step_observed(action, |sim: &Simulation, report| {
            let ego = report
                .av_interface
                .map_or(sim.av().y_dot, |iface| iface.y_dot);
            acc.record_state(sim.state(), ego, &p);
            substep += 1;
            if let Some(s) = stride {
                if substep.is_multiple_of(s.max(1)) {
                    trace.push(sim.snapshot());
                }
            }
        })?;
        acc.record_command(step.info.v_cmd);
        acc.record_reward(step.reward);
        obs = step.observation;
        if step.done {
            break;
        }
    }
    if let Some(s) = stride {
        if !substep.is_multiple_of(s.max(1)) {
            trace.push(env.simulation().snapshot());
        }
    }
    Ok((acc.finish(&p)?, trace))
}

/// Metrics from a stored trace: each snapshot after the first stands for
/// the step that produced it.
pub fn metrics_from_trace(trace: &[Snapshot], p: &FlowParams) -> Result<EpisodeMetrics> {
    if trace.len() < 2 {
        return Err(Error::domain("trace needs at least two snapshots"));
    }
    let mut acc = MetricsAccumulator::new();
    let mut state = TrafficState::new(Vec::new(), 0.0);
    for pair in trace.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        state.densities.clone_from(&cur.densities);
        state.time = cur.time;
        acc.record_state(&state, prev.av.y_dot, p);
        acc.record_command(prev.av.v_cmd);
    }
    acc.finish(p)
}

/// Mean and population standard deviation over episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub episodes: usize,
    pub mean: EpisodeMetrics,
    pub std: EpisodeMetrics,
}

impl MetricsSummary {
    pub fn from_episodes(eps: &[EpisodeMetrics]) -> Result<Self> {
        if eps.is_empty() {
            return Err(Error::domain("no episodes to summarise"));
        }
        let n = eps.len() as f64;
        let mut mean = [0.0; 9];
        for e in eps {
            for (m, v) in mean.iter_mut().zip(e.values()) {
                *m += v / n;
            }
        }
        let mut var = [0.0; 9];
        for e in eps {
            for ((s, v), m) in var.iter_mut().zip(e.values()).zip(mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        Ok(MetricsSummary {
            episodes: eps.len(),
            mean: EpisodeMetrics::from_values(mean),
            std: EpisodeMetrics::from_values(var.map(f64::sqrt)),
        })
    }

    /// `key=value` lines, one per metric mean and standard deviation.
    pub fn to_key_values(&self, label: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "label={label}");
        let _ = writeln!(out, "episodes={}", self.episodes);
        for ((name, m), s) in EpisodeMetrics::FIELDS
            .iter()
            .zip(self.mean.values())
            .zip(self.std.values())
        {
            let _ = writeln!(out, "{name}.mean={}", fmt9(m));
            let _ = writeln!(out, "{name}.std={}", fmt9(s));
        }
        out
    }
}

/// Evaluates `n_episodes` episodes; `make` builds a controller from the
/// episode's seed.
pub fn evaluate<C, F>(
    scenario: &ScenarioConfig,
    env_cfg: &EnvConfig,
    n_episodes: usize,
    seed: u64,
    mut make: F,
) -> Result<MetricsSummary>
where
    C: Controller,
    F: FnMut(u64) -> C,
{
    if n_episodes == 0 {
        return Err(Error::domain("n_episodes must be >= 1"));
    }
    let mut env = TrafficEnv::new(scenario.clone(), *env_cfg)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let eps = (0..n_episodes)
        .map(|_| {
            let s = seeds.next_u64();
            let mut c = make(s);
            run_episode(&mut env, &mut c, s, None).map(|(m, _)| m)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsSummary::from_episodes(&eps)
}

/// Evaluates a trained policy in the given mode.
pub fn evaluate_policy(
    policy: &PolicyParams,
    mode: ActionMode,
    scenario: &ScenarioConfig,
    env_cfg: &EnvConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<MetricsSummary> {
    evaluate(scenario, env_cfg, n_episodes, seed, |s| {
        PolicyController::new(policy, mode, s)
    })
}

/// The no-control baseline: the AV is always commanded `v_max`.
pub fn evaluate_baseline(
    scenario: &ScenarioConfig,
    env_cfg: &EnvConfig,
    seed: u64,
) -> Result<MetricsSummary> {
    evaluate(scenario, env_cfg, 1, seed, |_| {
        crate::env::ConstantController(1.0)
    })
}

/// Nine significant digits.
pub fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Time-space table: header `t,y,y_dot,v_cmd,rho_0,...`, one row per snapshot.
pub fn time_space_csv(trace: &[Snapshot]) -> Result<String> {
    let first = trace
        .first()
        .ok_or_else(|| Error::domain("cannot export an empty trace"))?;
    let n = first.densities.len();
    let mut out = String::from("t,y,y_dot,v_cmd");
    for j in 0..n {
        let _ = write!(out, ",rho_{j}");
    }
    out.push('\n');
    for s in trace {
        if s.densities.len() != n {
            return Err(Error::domain("snapshots differ in cell count"));
        }
        let _ = write!(
            out,
            "{},{},{},{}",
            fmt9(s.time),
            fmt9(s.av.y),
            fmt9(s.av.y_dot),
            fmt9(s.av.v_cmd)
        );
        for r in &s.densities {
            out.push(',');
            out.push_str(&fmt9(*r));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_time_space(trace: &[Snapshot], path: &Path) -> Result<()> {
    let text = time_space_csv(trace)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a time-space table written by [`export_time_space`].
pub fn read_time_space(path: &Path) -> Result<Vec<Snapshot>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
    let n_cols = header.split(',').count();
    if n_cols < 5 || !header.starts_with("t,y,y_dot,v_cmd,") {
        return Err(parse_err(format!("unexpected header: {header}")));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let vals = line
                .split(',')
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("row {}: {e}", k + 1)))?;
            if vals.len() != n_cols {
                return Err(parse_err(format!(
                    "row {} has {} columns, header has {n_cols}",
                    k + 1,
                    vals.len()
                )));
            }
            Ok(Snapshot {
                time: vals[0],
                av: crate::solver::AvState {
                    y: vals[1],
                    y_dot: vals[2],
                    v_cmd: vals[3],
                },
                densities: vals[4..].to_vec(),
            })
        })
        .collect()
}

/// Learning-curve summary over 5-iteration moving averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    /// Mean of the first five iterations.
    pub baseline_return: f64,
    pub best_smoothed_return: f64,
    /// `(best − baseline) / |baseline|`.
    pub improvement_fraction: f64,
}

pub const SMOOTHING_WINDOW: usize = 5;

pub fn learning_curve_summary(curve: &[f64]) -> Result<CurveSummary> {
    if curve.len() < 2 * SMOOTHING_WINDOW {
        return Err(Error::domain(format!(
            "learning curve needs at least {} points, got {}",
            2 * SMOOTHING_WINDOW,
            curve.len()
        )));
    }
    let w = SMOOTHING_WINDOW as f64;
    let smoothed: Vec<f64> = curve
        .windows(SMOOTHING_WINDOW)
        .map(|win| win.iter().sum::<f64>() / w)
        .collect();
    let baseline = smoothed[0];
    let best = smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if baseline == 0.0 {
        return Err(Error::domain("first smoothed return is zero"));
    }
    Ok(CurveSummary {
        baseline_return: baseline,
        best_smoothed_return: best,
        improvement_fraction: (best - baseline) / baseline.abs(),
    })
}

pub fn learning_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("iteration,mean_return\n");
    for (k, r) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{}", k + 1, fmt9(*r));
    }
    out
}

/// Aligned table: one row per labelled result, four metric columns.
pub fn comparison_table(rows: &[(String, MetricsSummary)]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .chain(std::iter::once("[w1, w2, w3]".len()))
        .max()
        .unwrap_or(0);
    let cols = ["Avg. Flux", "Ego Speed", "Avg. Speed", "Avg. Deviation"];
    let mut out = format!("{:<label_w$}", "[w1, w2, w3]");
    for c in cols {
        let _ = write!(out, "  {c:>14}");
    }
    out.push('\n');
    for (label, s) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for v in [
            s.mean.avg_flux,
            s.mean.ego_speed,
            s.mean.avg_speed,
            s.mean.avg_deviation,
        ] {
            let _ = write!(out, "  {v:>14.4}");
        }
        out.push('\n');
    }
    out
}
