//! Declarative initial and boundary data for experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::solver::{AvState, Boundary, Grid, Simulation, TrafficState};

/// Initial density profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Uniform { rho: f64 },
    /// `n_waves` pairs of low/high plateaus of equal width, starting low.
    SquareWaveTrain {
        rho_low: f64,
        rho_high: f64,
        n_waves: usize,
    },
    /// `rho_left` on `[0, x_split)`, `rho_right` on `[x_split, L)`.
    Riemann {
        rho_left: f64,
        rho_right: f64,
        x_split: f64,
    },
    /// Explicit cell averages, one per cell.
    Profile { densities: Vec<f64> },
}

impl InitialCondition {
    fn densities(&self) -> Vec<f64> {
        match self {
            InitialCondition::Uniform { rho } => vec![*rho],
            InitialCondition::SquareWaveTrain {
                rho_low, rho_high, ..
            } => vec![*rho_low, *rho_high],
            InitialCondition::Riemann {
                rho_left,
                rho_right,
                ..
            } => vec![*rho_left, *rho_right],
            InitialCondition::Profile { densities } => densities.clone(),
        }
    }

    /// Piecewise-constant pieces `(start, value)` covering `[0, length)`.
    fn pieces(&self, length: f64) -> Vec<(f64, f64)> {
        match self {
            InitialCondition::Uniform { rho } => vec![(0.0, *rho)],
            InitialCondition::SquareWaveTrain {
                rho_low,
                rho_high,
                n_waves,
            } => {
                let m = 2 * n_waves;
                (0..m)
                    .map(|k| {
                        let rho = if k % 2 == 0 { *rho_low } else { *rho_high };
                        (length * k as f64 / m as f64, rho)
                    })
                    .collect()
            }
            InitialCondition::Riemann {
                rho_left,
                rho_right,
                x_split,
            } => vec![(0.0, *rho_left), (*x_split, *rho_right)],
            InitialCondition::Profile { .. } => unreachable!("profiles are given per cell"),
        }
    }

    /// Exact integral of the profile over `[0, length)`.
    pub fn analytic_mass(&self, length: f64) -> f64 {
        match self {
            InitialCondition::Profile { densities } => {
                densities.iter().sum::<f64>() * length / densities.len() as f64
            }
            other => {
                let pieces = other.pieces(length);
                pieces
                    .iter()
                    .enumerate()
                    .map(|(k, (start, rho))| {
                        let end = pieces.get(k + 1).map_or(length, |p| p.0);
                        rho * (end - start)
                    })
                    .sum()
            }
        }
    }
}

/// Exact cell averages of a piecewise-constant function. Breakpoints within
/// round-off of a cell edge are snapped to it so whole cells stay exact.
fn cell_averages(pieces: &[(f64, f64)], grid: &Grid) -> Vec<f64> {
    let n = grid.n_cells;
    let dx = grid.dx();
    // breakpoints in cell units
    let mut edges: Vec<f64> = pieces
        .iter()
        .map(|(x, _)| {
            let b = (x / dx).clamp(0.0, n as f64);
            if (b - b.round()).abs() < 1e-9 {
                b.round()
            } else {
                b
            }
        })
        .collect();
    edges.push(n as f64);
    let mut out = vec![0.0; n];
    for (k, (_, rho)) in pieces.iter().enumerate() {
        let (a, b) = (edges[k], edges[k + 1]);
        if b <= a {
            continue;
        }
        let first = a.floor() as usize;
        let last = (b.ceil() as usize).min(n);
        for (j, cell) in out.iter_mut().enumerate().take(last).skip(first) {
            let lo = a.max(j as f64);
            let hi = b.min(j as f64 + 1.0);
            if hi > lo {
                let w = hi - lo;
                if w == 1.0 {
                    *cell = *rho;
                } else {
                    *cell += rho * w;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: Grid,
    pub flow: FlowParams,
    pub initial: InitialCondition,
    /// AV starting position.
    pub av_position: f64,
    /// Episode horizon `T`.
    pub horizon: f64,
    /// Control interval: the commanded speed is held constant over it.
    pub dt_ctrl: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    /// Ring road with three stop-and-go waves.
    pub fn stop_and_go() -> Self {
        ScenarioConfig {
            grid: Grid {
                length: 1.0,
                n_cells: 400,
                boundary: Boundary::Periodic,
            },
            flow: FlowParams::default(),
            initial: InitialCondition::SquareWaveTrain {
                rho_low: 0.15,
                rho_high: 0.85,
                n_waves: 3,
            },
            av_position: 0.5,
            horizon: 2.0,
            dt_ctrl: 0.02,
            seed: 0,
        }
    }

    /// A standing queue ahead of the AV.
    pub fn bottleneck() -> Self {
        ScenarioConfig {
            initial: InitialCondition::Riemann {
                rho_left: 0.2,
                rho_right: 0.8,
                x_split: 0.7,
            },
            av_position: 0.3,
            ..Self::stop_and_go()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = self.flow.violations();
        out.extend(self.grid.violations(Some(&self.flow)));
        let rho_max = self.flow.rho_max;
        for (k, rho) in self.initial.densities().into_iter().enumerate() {
            if !(rho.is_finite() && (0.0..=rho_max).contains(&rho)) {
                out.push(format!(
                    "initial density #{k} must lie in [0, {rho_max}] (got {rho})"
                ));
            }
        }
        match &self.initial {
            InitialCondition::SquareWaveTrain { n_waves, .. } if *n_waves < 1 => {
                out.push("initial.n_waves must be >= 1".into());
            }
            InitialCondition::Riemann { x_split, .. }
                if !(x_split.is_finite() && (0.0..=self.grid.length).contains(x_split)) =>
            {
                out.push(format!(
                    "initial.x_split must lie in [0, {}] (got {x_split})",
                    self.grid.length
                ));
            }
            InitialCondition::Profile { densities } if densities.len() != self.grid.n_cells => {
                out.push(format!(
                    "initial.densities has {} entries, grid has {} cells",
                    densities.len(),
                    self.grid.n_cells
                ));
            }
            _ => {}
        }
        if !(self.av_position.is_finite()
            && self.av_position >= 0.0
            && self.av_position < self.grid.length)
        {
            out.push(format!(
                "av_position must lie in [0, {}) (got {})",
                self.grid.length, self.av_position
            ));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            out.push(format!("horizon must be > 0 (got {})", self.horizon));
        }
        if !(self.dt_ctrl.is_finite() && self.dt_ctrl > 0.0) {
            out.push(format!("dt_ctrl must be > 0 (got {})", self.dt_ctrl));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Builds the initial world. The AV starts with `v_cmd = v_max`.
    pub fn build(&self) -> Result<World> {
        self.validate()?;
        let grid = self.grid;
        let densities = match &self.initial {
            InitialCondition::Profile { densities } => densities.clone(),
            other => cell_averages(&other.pieces(grid.length), &grid),
        };
        let state = TrafficState::new(densities, 0.0);
        let av = AvState::new(self.av_position, self.flow.v_max, &state, &grid, &self.flow);
        Ok(World {
            state,
            av,
            grid,
            params: self.flow,
        })
    }

    /// Number of control intervals in an episode, `⌈T / dt_ctrl⌉`.
    pub fn episode_len(&self) -> usize {
        (self.horizon / self.dt_ctrl - 1e-9).ceil().max(1.0) as usize
    }
}

/// A freshly built initial world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub state: TrafficState,
    pub av: AvState,
    pub grid: Grid,
    pub params: FlowParams,
}

impl World {
    pub fn into_simulation(self) -> Result<Simulation> {
        Simulation::new(self.grid, self.params, self.state, self.av)
    }
}
