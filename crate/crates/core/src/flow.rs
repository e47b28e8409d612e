//! Greenshields fundamental diagram and the moving-bottleneck geometry.
//!
//! With `v(ρ) = V·(1 − ρ/ρm)` and `f(ρ) = ρ·v(ρ)`, an AV travelling at speed `u`
//! lets through at most `F_α(u) = α·max_ρ (f(ρ) − uρ)` in its own frame. The
//! line `F_α(u) + uρ` cuts the diagram at `ρ̌(u) ≤ ρ̂(u)`, the densities that
//! settle downstream and upstream of an active bottleneck.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack accepted on domain checks, so values produced by round-off at the
/// ends of an interval are not rejected.
const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowParams {
    pub v_max: f64,
    pub rho_max: f64,
    /// Capacity fraction retained through the moving bottleneck, in (0, 1).
    pub alpha: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            v_max: 1.0,
            rho_max: 1.0,
            alpha: 0.6,
        }
    }
}

impl FlowParams {
    pub fn new(v_max: f64, rho_max: f64, alpha: f64) -> Result<Self> {
        let p = FlowParams {
            v_max,
            rho_max,
            alpha,
        };
        let problems = p.violations();
        if problems.is_empty() {
            Ok(p)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Lists every violated invariant; empty when the parameters are valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.v_max.is_finite() && self.v_max > 0.0) {
            out.push(format!("flow.v_max must be > 0 (got {})", self.v_max));
        }
        if !(self.rho_max.is_finite() && self.rho_max > 0.0) {
            out.push(format!("flow.rho_max must be > 0 (got {})", self.rho_max));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            out.push(format!("flow.alpha must lie in (0, 1) (got {})", self.alpha));
        }
        out
    }

    fn check_density(&self, rho: f64) -> Result<()> {
        if rho.is_finite() && rho >= -DOMAIN_SLACK && rho <= self.rho_max + DOMAIN_SLACK {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "density {rho} outside [0, {}]",
                self.rho_max
            )))
        }
    }

    fn check_speed(&self, v: f64) -> Result<()> {
        if v.is_finite() && v >= -DOMAIN_SLACK && v <= self.v_max + DOMAIN_SLACK {
            Ok(())
        } else {
            Err(Error::domain(format!("speed {v} outside [0, {}]", self.v_max)))
        }
    }

    pub fn critical_density(&self) -> f64 {
        0.5 * self.rho_max
    }

    /// Largest flux of the diagram, reached at the critical density.
    pub fn capacity(&self) -> f64 {
        0.25 * self.v_max * self.rho_max
    }

    pub fn velocity(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.velocity_unchecked(rho))
    }

    pub fn flux(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.flux_unchecked(rho))
    }

    pub fn demand(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.demand_unchecked(rho))
    }

    pub fn supply(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.supply_unchecked(rho))
    }

    /// Maximal flux through the bottleneck in its own frame, scaled by `alpha`.
    pub fn f_alpha(&self, v_av: f64) -> Result<f64> {
        self.check_speed(v_av)?;
        Ok(self.f_alpha_unchecked(v_av))
    }

    /// Downstream (low) intersection of `F_α(v) + vρ` with the diagram.
    pub fn rho_check(&self, v_av: f64) -> Result<f64> {
        self.check_speed(v_av)?;
        Ok(self.bottleneck_roots(v_av).0)
    }

    /// Upstream (high) intersection of `F_α(v) + vρ` with the diagram.
    pub fn rho_hat(&self, v_av: f64) -> Result<f64> {
        self.check_speed(v_av)?;
        Ok(self.bottleneck_roots(v_av).1)
    }

    // The unchecked variants are for hot loops whose inputs are already
    // known to be in range.

    #[inline]
    pub(crate) fn velocity_unchecked(&self, rho: f64) -> f64 {
        self.v_max * (1.0 - rho / self.rho_max)
    }

    #[inline]
    pub(crate) fn flux_unchecked(&self, rho: f64) -> f64 {
        rho * self.velocity_unchecked(rho)
    }

    #[inline]
    pub(crate) fn demand_unchecked(&self, rho: f64) -> f64 {
        self.flux_unchecked(rho.min(self.critical_density()))
    }

    #[inline]
    pub(crate) fn supply_unchecked(&self, rho: f64) -> f64 {
        self.flux_unchecked(rho.max(self.critical_density()))
    }

    #[inline]
    pub(crate) fn f_alpha_unchecked(&self, v_av: f64) -> f64 {
        let gap = (self.v_max - v_av).max(0.0);
        self.alpha * self.rho_max * gap * gap / (4.0 * self.v_max)
    }

    /// `(ρ̌, ρ̂)` for a clamped speed; both collapse to 0 at `v_av = v_max`.
    pub(crate) fn bottleneck_roots(&self, v_av: f64) -> (f64, f64) {
        let v = v_av.clamp(0.0, self.v_max);
        let centre = 0.5 * self.rho_max * (1.0 - v / self.v_max);
        let spread = (1.0 - self.alpha).sqrt();
        (centre * (1.0 - spread), centre * (1.0 + spread))
    }
}
