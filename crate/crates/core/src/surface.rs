//! Dense (tau, y) surfaces on a [`Grid`].

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

fn check_shape(values: &Array2<f64>, grid: &Grid, what: &str) -> Result<()> {
    let expected = (grid.n_levels(), grid.n_nodes());
    if values.dim() != expected {
        return Err(Error::config(format!(
            "{what} has shape {:?}, grid expects {:?}",
            values.dim(),
            expected
        )));
    }
    Ok(())
}

/// Local variance `a = sigma^2 / 2` at every grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolSurface(pub Array2<f64>);

impl VolSurface {
    pub fn new(values: Array2<f64>, grid: &Grid) -> Result<Self> {
        check_shape(&values, grid, "vol surface")?;
        Ok(Self(values))
    }

    pub fn constant(grid: &Grid, a: f64) -> Self {
        Self(Array2::from_elem((grid.n_levels(), grid.n_nodes()), a))
    }

    /// Tabulate `f(tau, y)` on the grid.
    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        Self(Array2::from_shape_fn(
            (grid.n_levels(), grid.n_nodes()),
            |(i, k)| f(grid.tau(i), grid.y(k)),
        ))
    }

    /// Tabulate a local volatility `sigma(tau, y)` as `sigma^2 / 2`.
    pub fn from_sigma_fn(grid: &Grid, sigma: impl Fn(f64, f64) -> f64) -> Self {
        Self::from_fn(grid, |t, y| 0.5 * sigma(t, y).powi(2))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn sigma(&self) -> Array2<f64> {
        self.0.mapv(|a| (2.0 * a).sqrt())
    }

    /// Verify `lower <= a <= upper` everywhere.
    pub fn check_bounds(&self, lower: f64, upper: f64) -> Result<()> {
        if !(0.0 < lower && lower < upper) {
            return Err(Error::config(format!("invalid vol box [{lower}, {upper}]")));
        }
        if let Some(((i, k), v)) = self
            .0
            .indexed_iter()
            .find(|(_, &v)| !(lower..=upper).contains(&v))
        {
            return Err(Error::domain(format!(
                "local variance {v} at node ({i}, {k}) outside [{lower}, {upper}]"
            )));
        }
        Ok(())
    }
}

/// Normalized call prices `u = C / S0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSurface(pub Array2<f64>);

impl PriceSurface {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn at(&self, level: usize, node: usize) -> f64 {
        self.0[(level, node)]
    }

    /// Largest violation of `0 <= u <= 1`, monotonicity in strike and the
    /// exact payoff at `tau = 0`. Zero when all invariants hold.
    pub fn invariant_violation(&self, grid: &Grid) -> f64 {
        let mut worst = 0.0f64;
        for (k, &v) in self.0.row(0).iter().enumerate() {
            worst = worst.max((v - crate::grid::payoff(grid.y(k))).abs());
        }
        for row in self.0.rows() {
            for &v in row {
                worst = worst.max(-v).max(v - 1.0);
            }
            for w in row.windows(2) {
                worst = worst.max(w[1] - w[0]);
            }
        }
        worst
    }
}
