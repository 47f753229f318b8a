//! Truncated computational domain in (time to maturity, log-moneyness).
//!
//! Nodes sit at `tau_i = i * dtau` for `i = 0..=I` and `y_j = j * dy` for
//! `j = j_min..=j_max` with `j_min < 0 < j_max`. Outside `[y_min, y_max]` the
//! solution is taken to be the call payoff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when snapping coordinates onto the lattice.
const SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dtau: f64,
    dy: f64,
    n_steps: usize,
    j_min: i64,
    j_max: i64,
}

impl Grid {
    /// Lattice over `[0, tau_max] x [y_min, y_max]`.
    ///
    /// The bounds must be integer multiples of the steps up to rounding.
    pub fn new(tau_max: f64, y_min: f64, y_max: f64, dtau: f64, dy: f64) -> Result<Self> {
        if !(dtau > 0.0 && dy > 0.0) || !dtau.is_finite() || !dy.is_finite() {
            return Err(Error::config(format!("steps must be positive (dtau={dtau}, dy={dy})")));
        }
        if !(y_min < 0.0 && y_max > 0.0) {
            return Err(Error::config(format!(
                "log-moneyness bounds must straddle zero (y_min={y_min}, y_max={y_max})"
            )));
        }
        let n_steps = multiple_of(tau_max, dtau, "tau_max")?;
        let j_max = multiple_of(y_max, dy, "y_max")?;
        let j_min = -multiple_of(-y_min, dy, "y_min")?;
        if n_steps < 1 {
            return Err(Error::config("at least one time step is required"));
        }
        Ok(Self {
            dtau,
            dy,
            n_steps: n_steps as usize,
            j_min,
            j_max,
        })
    }

    /// Symmetric lattice `y_min = -y_max`.
    pub fn symmetric(tau_max: f64, y_max: f64, dtau: f64, dy: f64) -> Result<Self> {
        Self::new(tau_max, -y_max, y_max, dtau, dy)
    }

    /// Lattice built from counts: `n_steps` time steps and `half_nodes` nodes
    /// on each side of zero.
    pub fn from_counts(tau_max: f64, y_max: f64, n_steps: usize, half_nodes: usize) -> Result<Self> {
        if n_steps == 0 || half_nodes == 0 {
            return Err(Error::config("grid counts must be positive"));
        }
        Self::symmetric(
            tau_max,
            y_max,
            tau_max / n_steps as f64,
            y_max / half_nodes as f64,
        )
    }

    pub fn dtau(&self) -> f64 {
        self.dtau
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    /// Number of time steps `I`.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of time levels `I + 1`.
    pub fn n_levels(&self) -> usize {
        self.n_steps + 1
    }

    /// Number of space nodes per level.
    pub fn n_nodes(&self) -> usize {
        (self.j_max - self.j_min + 1) as usize
    }

    pub fn j_min(&self) -> i64 {
        self.j_min
    }

    pub fn j_max(&self) -> i64 {
        self.j_max
    }

    pub fn tau_max(&self) -> f64 {
        self.n_steps as f64 * self.dtau
    }

    pub fn y_min(&self) -> f64 {
        self.j_min as f64 * self.dy
    }

    pub fn y_max(&self) -> f64 {
        self.j_max as f64 * self.dy
    }

    /// `dtau / dy`.
    pub fn beta(&self) -> f64 {
        self.dtau / self.dy
    }

    /// `dtau / dy^2`.
    pub fn eta(&self) -> f64 {
        self.dtau / (self.dy * self.dy)
    }

    pub fn tau(&self, i: usize) -> f64 {
        i as f64 * self.dtau
    }

    /// Log-moneyness of signed lattice index `j` (may lie outside the grid).
    pub fn y_of(&self, j: i64) -> f64 {
        j as f64 * self.dy
    }

    /// Log-moneyness of storage index `idx` (0-based from `j_min`).
    pub fn y(&self, idx: usize) -> f64 {
        self.y_of(self.j_min + idx as i64)
    }

    pub fn ys(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.y(k)).collect()
    }

    pub fn taus(&self) -> Vec<f64> {
        (0..self.n_levels()).map(|i| self.tau(i)).collect()
    }

    /// Storage index of signed index `j`, if on the grid.
    pub fn index_of(&self, j: i64) -> Option<usize> {
        (self.j_min..=self.j_max)
            .contains(&j)
            .then(|| (j - self.j_min) as usize)
    }

    /// Storage index of the zero node.
    pub fn zero_index(&self) -> usize {
        (-self.j_min) as usize
    }

    /// Snap a log-moneyness onto the lattice, returning the storage index.
    pub fn node_index(&self, y: f64) -> Result<usize> {
        let j = snap(y, self.dy)
            .ok_or_else(|| Error::domain(format!("y = {y} is not a lattice node (dy = {})", self.dy)))?;
        self.index_of(j)
            .ok_or_else(|| Error::domain(format!("y = {y} lies outside [{}, {}]", self.y_min(), self.y_max())))
    }

    /// Snap a time to maturity onto the lattice, returning the level.
    pub fn level_index(&self, tau: f64) -> Result<usize> {
        let i = snap(tau, self.dtau).ok_or_else(|| {
            Error::domain(format!("tau = {tau} is not a lattice level (dtau = {})", self.dtau))
        })?;
        if i < 0 || i as usize > self.n_steps {
            return Err(Error::domain(format!("tau = {tau} lies outside [0, {}]", self.tau_max())));
        }
        Ok(i as usize)
    }
}

fn multiple_of(x: f64, step: f64, what: &str) -> Result<i64> {
    snap(x, step).ok_or_else(|| Error::config(format!("{what} = {x} is not a multiple of {step}")))
}

/// Round half up to the nearest multiple of `step`; `None` on mismatch.
fn snap(x: f64, step: f64) -> Option<i64> {
    let k = (x / step + 0.5).floor();
    ((x - k * step).abs() <= SNAP_TOL * step).then_some(k as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketParams {
    /// Continuously compounded rate.
    pub r: f64,
    /// Spot price.
    pub s0: f64,
}

impl MarketParams {
    pub fn new(r: f64, s0: f64) -> Result<Self> {
        if !(s0 > 0.0) || !s0.is_finite() {
            return Err(Error::domain(format!("spot must be positive, got {s0}")));
        }
        if !r.is_finite() {
            return Err(Error::domain("rate must be finite"));
        }
        Ok(Self { r, s0 })
    }
}

impl Default for MarketParams {
    fn default() -> Self {
        Self { r: 0.0, s0: 1.0 }
    }
}

/// Normalized call payoff `max(0, 1 - e^y)`.
pub fn payoff(y: f64) -> f64 {
    (1.0 - y.exp()).max(0.0)
}

/// Value of `row` at signed index `j`, falling back to the payoff off-grid.
pub fn extend_index(row: &[f64], grid: &Grid, j: i64) -> f64 {
    match grid.index_of(j) {
        Some(idx) => row[idx],
        None => payoff(grid.y_of(j)),
    }
}

/// `y = ln(K / S0)`.
pub fn log_moneyness(strike: f64, spot: f64) -> Result<f64> {
    if !(strike > 0.0) || !(spot > 0.0) {
        return Err(Error::domain(format!(
            "strike and spot must be positive (K={strike}, S0={spot})"
        )));
    }
    Ok((strike / spot).ln())
}

/// Inverse of [`log_moneyness`].
pub fn strike_from_log_moneyness(y: f64, spot: f64) -> f64 {
    spot * y.exp()
}
