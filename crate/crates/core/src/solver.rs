//! Explicit finite-volume integration of the coupled density / AV system.
//!
//! Bulk traffic follows `ρ_t + f(ρ)_x = 0`, discretised with Godunov fluxes.
//! The AV moves at `ẏ = min(V, v(ρ(y+)))` and caps the flux through the
//! interface just downstream of its cell so that, in its own frame, no more
//! than `F_α(ẏ)` vehicles per unit time pass it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowParams;

/// Round-off band in which densities are silently repaired back into range.
const CLAMP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Boundary {
    Periodic,
    /// Ghost cells hold fixed inflow / outflow densities.
    Dirichlet { rho_in: f64, rho_out: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub length: f64,
    pub n_cells: usize,
    pub boundary: Boundary,
}

impl Grid {
    pub const MIN_CELLS: usize = 4;

    pub fn new(length: f64, n_cells: usize, boundary: Boundary) -> Result<Self> {
        let g = Grid {
            length,
            n_cells,
            boundary,
        };
        let v = g.violations(None);
        if v.is_empty() {
            Ok(g)
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn periodic(length: f64, n_cells: usize) -> Result<Self> {
        Self::new(length, n_cells, Boundary::Periodic)
    }

    pub(crate) fn violations(&self, p: Option<&FlowParams>) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.length.is_finite() && self.length > 0.0) {
            out.push(format!("grid.length must be > 0 (got {})", self.length));
        }
        if self.n_cells < Self::MIN_CELLS {
            out.push(format!(
                "grid.n_cells must be >= {} (got {})",
                Self::MIN_CELLS,
                self.n_cells
            ));
        }
        if let (Boundary::Dirichlet { rho_in, rho_out }, Some(p)) = (self.boundary, p) {
            for (name, rho) in [("rho_in", rho_in), ("rho_out", rho_out)] {
                if !(rho.is_finite() && (0.0..=p.rho_max).contains(&rho)) {
                    out.push(format!(
                        "grid.boundary.{name} must lie in [0, {}] (got {rho})",
                        p.rho_max
                    ));
                }
            }
        }
        out
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_cells as f64
    }

    /// Cell centre of cell `j`.
    pub fn centre(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dx()
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self.boundary, Boundary::Periodic)
    }

    /// Index of the cell containing position `y`, or `None` when `y` is off
    /// a non-periodic road.
    pub fn cell_of(&self, y: f64) -> Option<usize> {
        let j = (y / self.dx()).floor();
        if self.is_periodic() {
            Some((j as i64).rem_euclid(self.n_cells as i64) as usize)
        } else if j >= 0.0 && (j as usize) < self.n_cells {
            Some(j as usize)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    pub densities: Vec<f64>,
    pub time: f64,
}

impl TrafficState {
    pub fn new(densities: Vec<f64>, time: f64) -> Self {
        TrafficState { densities, time }
    }

    /// Total number of vehicles, `Σ ρ_j·dx`.
    pub fn mass(&self, grid: &Grid) -> f64 {
        self.densities.iter().sum::<f64>() * grid.dx()
    }

    pub fn validate(&self, grid: &Grid, p: &FlowParams) -> Result<()> {
        if self.densities.len() != grid.n_cells {
            return Err(Error::integrity(format!(
                "state has {} cells, grid has {}",
                self.densities.len(),
                grid.n_cells
            )));
        }
        if let Some((j, rho)) = self
            .densities
            .iter()
            .enumerate()
            .find(|(_, r)| !(r.is_finite() && **r >= 0.0 && **r <= p.rho_max))
        {
            return Err(Error::integrity(format!(
                "density {rho} in cell {j} outside [0, {}]",
                p.rho_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvState {
    /// Position along the road.
    pub y: f64,
    /// Commanded maximum speed (the control).
    pub v_cmd: f64,
    /// Realized speed.
    pub y_dot: f64,
}

impl AvState {
    /// An AV at `y` commanded to `v_cmd`, with its realized speed resolved
    /// against the current traffic.
    pub fn new(y: f64, v_cmd: f64, state: &TrafficState, grid: &Grid, p: &FlowParams) -> Self {
        let mut av = AvState {
            y,
            v_cmd: v_cmd.clamp(0.0, p.v_max),
            y_dot: 0.0,
        };
        av.y_dot = av_realized_speed(&av, state, grid, p);
        av
    }
}

/// Explicit time step with `|f'(ρ)| ≤ v_max`.
pub fn cfl_timestep(grid: &Grid, p: &FlowParams, cfl: f64) -> f64 {
    cfl * grid.dx() / p.v_max
}

/// Exact Riemann flux of the concave diagram: `min(demand(ρL), supply(ρR))`.
pub fn godunov_flux(rho_left: f64, rho_right: f64, p: &FlowParams) -> Result<f64> {
    Ok(p.demand(rho_left)?.min(p.supply(rho_right)?))
}

#[inline]
fn godunov_flux_unchecked(rho_left: f64, rho_right: f64, p: &FlowParams) -> f64 {
    p.demand_unchecked(rho_left).min(p.supply_unchecked(rho_right))
}

/// Density immediately ahead of the AV: the cell after the one it occupies.
fn downstream_density(y: f64, state: &TrafficState, grid: &Grid) -> f64 {
    let n = grid.n_cells;
    match grid.boundary {
        Boundary::Periodic => {
            let j = grid.cell_of(y).unwrap_or(0);
            state.densities[(j + 1) % n]
        }
        Boundary::Dirichlet { rho_in, rho_out } => {
            let j = (y / grid.dx()).floor();
            if j < -1.0 {
                rho_in
            } else {
                let next = (j + 1.0) as usize;
                state.densities.get(next).copied().unwrap_or(rho_out)
            }
        }
    }
}

/// `ẏ = min(V, v(ρ(y+)))`.
pub fn av_realized_speed(av: &AvState, state: &TrafficState, grid: &Grid, p: &FlowParams) -> f64 {
    let rho_down = downstream_density(av.y, state, grid).clamp(0.0, p.rho_max);
    av.v_cmd.min(p.velocity_unchecked(rho_down)).max(0.0)
}

/// Flux through the interface just downstream of the AV.
///
/// The Godunov flux is kept while the flux seen from the AV frame,
/// `F − ẏ·ρL`, stays within `F_α(ẏ)`. Otherwise the bottleneck is active and
/// the interface passes the road-frame flux of the downstream state,
/// `f(ρ̌(ẏ)) = F_α(ẏ) + ẏ·ρ̌(ẏ)`.
pub fn constrained_interface_flux(
    rho_left: f64,
    rho_right: f64,
    y_dot: f64,
    p: &FlowParams,
) -> Result<f64> {
    godunov_flux(rho_left, rho_right, p)?;
    p.f_alpha(y_dot)?;
    Ok(constrained_flux_unchecked(rho_left, rho_right, y_dot, p).0)
}

/// Ties count as active so that the AV entering a cell of downstream state
/// keeps the bottleneck engaged.
const ACTIVE_TOL: f64 = 1e-12;

/// Returns the interface flux and whether the bottleneck is active.
#[inline]
fn constrained_flux_unchecked(rho_left: f64, rho_right: f64, y_dot: f64, p: &FlowParams) -> (f64, bool) {
    let free = godunov_flux_unchecked(rho_left, rho_right, p);
    if free < p.f_alpha_unchecked(y_dot) + y_dot * rho_left - ACTIVE_TOL {
        (free, false)
    } else {
        (free.min(p.flux_unchecked(p.bottleneck_roots(y_dot).0)), true)
    }
}

/// What happened at the AV interface during one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterfaceReport {
    /// Interface index: interface `i` separates cells `i − 1` and `i`.
    pub interface: usize,
    pub flux: f64,
    /// Density of the cell upstream of the interface.
    pub rho_up: f64,
    pub y_dot: f64,
    /// Whether the bottleneck constraint was engaged.
    pub active: bool,
}

impl InterfaceReport {
    /// `F − ẏ·ρ_up − F_α(ẏ)`; non-positive when the flux constraint holds.
    pub fn constraint_residual(&self, p: &FlowParams) -> f64 {
        self.flux - self.y_dot * self.rho_up - p.f_alpha_unchecked(self.y_dot)
    }
}

/// One integration step's outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub dt: f64,
    /// `None` when the AV is off a non-periodic road.
    pub av_interface: Option<InterfaceReport>,
}

/// A simulation instance owning its state and scratch buffers.
#[derive(Debug, Clone)]
pub struct Simulation {
    grid: Grid,
    params: FlowParams,
    state: TrafficState,
    av: AvState,
    fluxes: Vec<f64>,
}

impl Simulation {
    pub fn new(grid: Grid, params: FlowParams, state: TrafficState, av: AvState) -> Result<Self> {
        let mut problems = params.violations();
        problems.extend(grid.violations(Some(&params)));
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        state.validate(&grid, &params)?;
        let n_iface = grid.n_cells + usize::from(!grid.is_periodic());
        let mut sim = Simulation {
            grid,
            params,
            state,
            av,
            fluxes: vec![0.0; n_iface],
        };
        sim.set_command(av.v_cmd);
        Ok(sim)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn params(&self) -> &FlowParams {
        &self.params
    }

    pub fn state(&self) -> &TrafficState {
        &self.state
    }

    pub fn av(&self) -> &AvState {
        &self.av
    }

    pub fn time(&self) -> f64 {
        self.state.time
    }

    /// Largest stable step.
    pub fn max_dt(&self) -> f64 {
        cfl_timestep(&self.grid, &self.params, 1.0)
    }

    /// Sets the commanded speed (clamped to `[0, v_max]`) and refreshes the
    /// realized speed.
    pub fn set_command(&mut self, v_cmd: f64) {
        self.av.v_cmd = v_cmd.clamp(0.0, self.params.v_max);
        self.av.y_dot = av_realized_speed(&self.av, &self.state, &self.grid, &self.params);
    }

    /// Index of the interface capped by the AV, if it is on the road.
    fn av_interface(&self) -> Option<usize> {
        let n = self.grid.n_cells;
        match self.grid.boundary {
            Boundary::Periodic => self.grid.cell_of(self.av.y).map(|j| (j + 1) % n),
            // The outflow interface is n; the AV caps it while in the last cell.
            Boundary::Dirichlet { .. } => self.grid.cell_of(self.av.y).map(|j| j + 1),
        }
    }

    /// Advances density and AV by `dt`.
    pub fn advance(&mut self, dt: f64) -> Result<StepReport> {
        let limit = self.max_dt();
        if !(dt > 0.0 && dt <= limit * (1.0 + 1e-12)) {
            return Err(Error::integrity(format!(
                "time step {dt} violates the CFL bound {limit}"
            )));
        }
        let p = self.params;
        let n = self.grid.n_cells;
        let rho = &self.state.densities;
        let y_dot = av_realized_speed(&self.av, &self.state, &self.grid, &p);

        match self.grid.boundary {
            Boundary::Periodic => {
                for i in 0..n {
                    let left = rho[(i + n - 1) % n];
                    self.fluxes[i] = godunov_flux_unchecked(left, rho[i], &p);
                }
            }
            Boundary::Dirichlet { rho_in, rho_out } => {
                for i in 0..=n {
                    let left = if i == 0 { rho_in } else { rho[i - 1] };
                    let right = if i == n { rho_out } else { rho[i] };
                    self.fluxes[i] = godunov_flux_unchecked(left, right, &p);
                }
            }
        }

        let av_interface = self.av_interface().map(|i| {
            let rho_up = match self.grid.boundary {
                Boundary::Periodic => rho[(i + n - 1) % n],
                Boundary::Dirichlet { .. } => rho[i - 1],
            };
            let right = match self.grid.boundary {
                Boundary::Periodic => rho[i % n],
                Boundary::Dirichlet { rho_out, .. } => rho.get(i).copied().unwrap_or(rho_out),
            };
            let (flux, active) = constrained_flux_unchecked(rho_up, right, y_dot, &p);
            self.fluxes[i] = flux;
            if active {
                // the interface the AV crossed last carries the upstream state
                let behind = if i == 0 { n - 1 } else { i - 1 };
                let hat = p.flux_unchecked(p.bottleneck_roots(y_dot).1);
                self.fluxes[behind] = self.fluxes[behind].min(hat);
            }
            InterfaceReport {
                interface: i,
                flux,
                rho_up,
                y_dot,
                active,
            }
        });

        let ratio = dt / self.grid.dx();
        let rho_max = p.rho_max;
        let periodic = self.grid.is_periodic();
        for j in 0..n {
            let right = if periodic && j + 1 == n { 0 } else { j + 1 };
            let updated = self.state.densities[j] - ratio * (self.fluxes[right] - self.fluxes[j]);
            self.state.densities[j] = repair(updated, rho_max).ok_or_else(|| {
                Error::integrity(format!(
                    "density {updated} in cell {j} left [0, {rho_max}] at t = {}",
                    self.state.time
                ))
            })?;
        }

        let mut y = self.av.y + y_dot * dt;
        if periodic {
            y = y.rem_euclid(self.grid.length);
            // rem_euclid can return `length` itself for tiny negative inputs
            if y >= self.grid.length {
                y = 0.0;
            }
        }
        self.av.y = y;
        self.state.time += dt;
        self.av.y_dot = av_realized_speed(&self.av, &self.state, &self.grid, &p);

        Ok(StepReport { dt, av_interface })
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            time: self.state.time,
            densities: self.state.densities.clone(),
            av: self.av,
        }
    }
}

fn repair(rho: f64, rho_max: f64) -> Option<f64> {
    if !rho.is_finite() {
        None
    } else if (0.0..=rho_max).contains(&rho) {
        Some(rho)
    } else if (-CLAMP_SLACK..0.0).contains(&rho) {
        Some(0.0)
    } else if rho > rho_max && rho <= rho_max + CLAMP_SLACK {
        Some(rho_max)
    } else {
        None
    }
}

/// Density profile and AV state at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub densities: Vec<f64>,
    pub av: AvState,
}

/// Single explicit step on value inputs; see [`Simulation::advance`].
pub fn step(
    state: &TrafficState,
    av: &AvState,
    grid: &Grid,
    p: &FlowParams,
    dt: f64,
) -> Result<(TrafficState, AvState)> {
    let mut sim = Simulation::new(*grid, *p, state.clone(), *av)?;
    sim.advance(dt)?;
    Ok((sim.state, sim.av))
}

/// Options for the open-loop driver.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub cfl: f64,
    /// Keep every `stride`-th step (plus the first and last).
    pub stride: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { cfl: 0.9, stride: 1 }
    }
}

/// Integrates to `t_end` with the commanded speed taken from `schedule` at
/// the start of every step. The final step is shortened to land on `t_end`.
pub fn run<S>(
    sim: &mut Simulation,
    t_end: f64,
    mut schedule: S,
    opts: RunOptions,
    mut on_step: impl FnMut(&Simulation, &StepReport),
) -> Result<Vec<Snapshot>>
where
    S: FnMut(f64) -> f64,
{
    if !(opts.cfl > 0.0 && opts.cfl <= 1.0) {
        return Err(Error::domain(format!("cfl {} outside (0, 1]", opts.cfl)));
    }
    let stride = opts.stride.max(1);
    let t0 = sim.time();
    if !(t_end >= t0) {
        return Err(Error::domain(format!(
            "end time {t_end} precedes start time {t0}"
        )));
    }
    let dt_max = cfl_timestep(&sim.grid, &sim.params, opts.cfl);
    let n_steps = ((t_end - t0) / dt_max - 1e-9).ceil().max(0.0) as usize;
    let mut trace = vec![sim.snapshot()];
    for k in 0..n_steps {
        let dt = if k + 1 == n_steps {
            t_end - sim.time()
        } else {
            dt_max
        };
        if dt <= 0.0 {
            break;
        }
        sim.set_command(schedule(sim.time()));
        let report = sim.advance(dt)?;
        on_step(sim, &report);
        if (k + 1) % stride == 0 || k + 1 == n_steps {
            trace.push(sim.snapshot());
        }
    }
    Ok(trace)
}
