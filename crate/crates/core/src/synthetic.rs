//! Test surfaces, jump densities, quote lattices and noisy quote sets.

use std::collections::HashSet;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjoint::Observations;
use crate::analytic::{call_bounds, implied_vol};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::levy_tail::{JumpDensity, TailFunction};
use crate::pide::PideModel;
use crate::surface::VolSurface;

/// Smile-shaped local volatility used throughout the synthetic experiments.
pub fn reference_sigma(tau: f64, y: f64) -> f64 {
    if y.abs() <= 0.4 {
        0.4 - 0.16 * (-tau / 2.0).exp() * (4.0 * PI * y / 5.0).cos()
    } else {
        0.4
    }
}

/// Jump of [`reference_sigma`] across `|y| = 0.4` at maturity `tau` (outer minus inner).
pub fn reference_sigma_gap(tau: f64) -> f64 {
    0.16 * (-tau / 2.0).exp() * (4.0 * PI * 0.4 / 5.0).cos()
}

pub fn reference_vol_surface(grid: &Grid) -> VolSurface {
    VolSurface::from_sigma_fn(grid, reference_sigma)
}

/// Gaussian jump-size density with intensity 0.1.
pub fn reference_density(x: f64) -> f64 {
    0.1 / (2.0 * PI).sqrt() * (-0.5 * x * x).exp()
}

/// Cell masses of [`reference_density`] and the excluded center mass.
pub fn reference_jump_density(grid: &Grid) -> (JumpDensity, f64) {
    JumpDensity::from_density(grid, reference_density)
}

/// Asymmetric initial guess and prior for the splitting experiment.
pub fn prior_density(x: f64) -> f64 {
    if x >= 0.0 {
        0.5 * (-0.5 * x * x - 0.5 * x).exp()
    } else {
        0.5 * (-0.5 * x * x - 0.5 * x.abs()).exp()
    }
}

pub fn prior_jump_density(grid: &Grid) -> JumpDensity {
    JumpDensity::from_density(grid, prior_density).0
}

/// Rectangular sub-lattice `(i * dtau, j * dy)` of quote coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteLattice {
    pub taus: Vec<f64>,
    pub ys: Vec<f64>,
}

impl QuoteLattice {
    pub fn new(
        levels: std::ops::RangeInclusive<i64>,
        strikes: std::ops::RangeInclusive<i64>,
        dtau: f64,
        dy: f64,
    ) -> Self {
        Self {
            taus: levels.map(|i| i as f64 * dtau).collect(),
            ys: strikes.map(|j| j as f64 * dy).collect(),
        }
    }

    /// Maturities 0.1..1 and strikes |y| <= 0.5, both on a 0.05 step in y.
    pub fn near_money() -> Self {
        Self::new(1..=10, -10..=10, 0.1, 0.05)
    }

    /// Maturities 0.1..1 and strikes from deep in the money up to y = 0.5.
    pub fn wide() -> Self {
        Self::new(1..=10, -90..=10, 0.1, 0.05)
    }

    /// Every node of `grid`; interpolation from it is the identity.
    pub fn full(grid: &Grid) -> Self {
        Self {
            taus: grid.taus(),
            ys: grid.ys(),
        }
    }

    /// The smallest lattice containing every quote coordinate.
    pub fn covering(quotes: &QuoteSet) -> Result<Self> {
        if quotes.quotes.is_empty() {
            return Err(Error::config("no quotes"));
        }
        let sorted_unique = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            v
        };
        Ok(Self {
            taus: sorted_unique(quotes.quotes.iter().map(|q| q.tau).collect()),
            ys: sorted_unique(quotes.quotes.iter().map(|q| q.y).collect()),
        })
    }

    /// All `(tau, y)` pairs, maturity-major.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        self.taus
            .iter()
            .flat_map(|&t| self.ys.iter().map(move |&y| (t, y)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.taus.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.taus.len(), self.ys.len())
    }

    fn bracket(points: &[f64], x: f64) -> (usize, usize, f64) {
        let last = points.len() - 1;
        if last == 0 || x <= points[0] {
            return (0, 0, 0.0);
        }
        if x >= points[last] {
            return (last, last, 0.0);
        }
        let hi = points.partition_point(|&p| p <= x).min(last);
        let lo = hi - 1;
        let t = (x - points[lo]) / (points[hi] - points[lo]);
        (lo, hi, t)
    }

    /// Extend lattice values to the full grid: constant beyond the strike
    /// range, constant below the first maturity, bilinear inside.
    pub fn interpolate(&self, coarse: &Array2<f64>, grid: &Grid) -> Result<VolSurface> {
        if coarse.dim() != self.shape() {
            return Err(Error::config(format!(
                "coarse values {:?} do not match lattice {:?}",
                coarse.dim(),
                self.shape()
            )));
        }
        let rows: Vec<_> = grid.taus().into_iter().map(|t| Self::bracket(&self.taus, t)).collect();
        let cols: Vec<_> = grid.ys().into_iter().map(|y| Self::bracket(&self.ys, y)).collect();
        Ok(VolSurface(Array2::from_shape_fn(
            (grid.n_levels(), grid.n_nodes()),
            |(i, k)| {
                let (i0, i1, s) = rows[i];
                let (k0, k1, t) = cols[k];
                (1.0 - s) * ((1.0 - t) * coarse[(i0, k0)] + t * coarse[(i0, k1)])
                    + s * ((1.0 - t) * coarse[(i1, k0)] + t * coarse[(i1, k1)])
            },
        )))
    }

    /// Transpose of [`QuoteLattice::interpolate`], mapping a gradient on the
    /// grid back to the lattice.
    pub fn interpolate_transpose(&self, fine: &Array2<f64>, grid: &Grid) -> Array2<f64> {
        let rows: Vec<_> = grid.taus().into_iter().map(|t| Self::bracket(&self.taus, t)).collect();
        let cols: Vec<_> = grid.ys().into_iter().map(|y| Self::bracket(&self.ys, y)).collect();
        let mut out = Array2::zeros(self.shape());
        for (i, &(i0, i1, s)) in rows.iter().enumerate() {
            for (k, &(k0, k1, t)) in cols.iter().enumerate() {
                let g = fine[(i, k)];
                if g == 0.0 {
                    continue;
                }
                out[(i0, k0)] += (1.0 - s) * (1.0 - t) * g;
                out[(i0, k1)] += (1.0 - s) * t * g;
                out[(i1, k0)] += s * (1.0 - t) * g;
                out[(i1, k1)] += s * t * g;
            }
        }
        out
    }

    /// Sample `f(tau, y)` at the lattice nodes.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        Array2::from_shape_fn(self.shape(), |(i, k)| f(self.taus[i], self.ys[k]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Market,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub tau: f64,
    pub y: f64,
    pub price: f64,
    pub implied_vol: Option<f64>,
}

/// Normalized call quotes with their origin and noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteSet {
    pub quotes: Vec<Quote>,
    pub provenance: Provenance,
    /// Relative noise level `||noise|| / ||clean||`, if known.
    pub delta: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Noise {
    None,
    Gaussian { delta: f64 },
}

fn coord_key(tau: f64, y: f64) -> (i64, i64) {
    ((tau * 1e9).round() as i64, (y * 1e9).round() as i64)
}

impl QuoteSet {
    /// Check arbitrage bounds and uniqueness.
    pub fn validate(&self, r: f64) -> Result<()> {
        let mut seen = HashSet::new();
        for q in &self.quotes {
            let (lo, hi) = call_bounds(q.y, q.tau, r);
            if !(q.price > lo - 1e-9 && q.price < hi) {
                return Err(Error::domain(format!(
                    "quote {} at (tau {}, y {}) outside ({lo}, {hi})",
                    q.price, q.tau, q.y
                )));
            }
            if !seen.insert(coord_key(q.tau, q.y)) {
                return Err(Error::config(format!("duplicate quote at (tau {}, y {})", q.tau, q.y)));
            }
        }
        Ok(())
    }

    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.quotes.iter().map(|q| (q.tau, q.y)).collect()
    }

    pub fn prices(&self) -> Vec<f64> {
        self.quotes.iter().map(|q| q.price).collect()
    }

    pub fn norm(&self) -> f64 {
        self.quotes.iter().map(|q| q.price * q.price).sum::<f64>().sqrt()
    }

    pub fn observations(&self, grid: &Grid) -> Result<Observations> {
        Observations::from_coords(&self.coords(), self.prices(), grid)
    }

    /// Fill in implied vols where the price admits one.
    pub fn with_implied_vols(mut self, r: f64) -> Self {
        for q in &mut self.quotes {
            q.implied_vol = implied_vol(q.price, q.y, q.tau, r).ok();
        }
        self
    }
}

/// Price quotes at `nodes` under `(a, phi)`, optionally perturbed by scaled
/// Gaussian noise.
pub fn make_quotes(
    model: &PideModel,
    a: &VolSurface,
    phi: &TailFunction,
    nodes: &[(f64, f64)],
    noise: Noise,
    seed: u64,
) -> Result<QuoteSet> {
    let g = &model.grid;
    let mut indices = Vec::with_capacity(nodes.len());
    let mut offenders = Vec::new();
    for &(t, y) in nodes {
        match (g.level_index(t), g.node_index(y)) {
            (Ok(i), Ok(k)) => indices.push((i, k)),
            _ => offenders.push(format!("({t}, {y})")),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::config(format!("quote nodes off the grid: {}", offenders.join(", "))));
    }
    let u = model.solve(a, phi)?;
    let clean: Vec<f64> = indices.iter().map(|&(i, k)| u.at(i, k)).collect();
    let r = model.market.r;
    let (prices, delta, seed) = match noise {
        Noise::None => (clean, None, None),
        Noise::Gaussian { delta } => {
            if !(delta >= 0.0) {
                return Err(Error::domain(format!("noise level must be nonnegative, got {delta}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f64> = (0..clean.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cn = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let bounds: Vec<(f64, f64)> = nodes.iter().map(|&(t, y)| call_bounds(y, t, r)).collect();
            let perturb = |scale: f64| -> Vec<f64> {
                clean
                    .iter()
                    .zip(&z)
                    .zip(&bounds)
                    .map(|((c, e), &(lo, hi))| (c + scale * e).clamp(lo, hi - 1e-12))
                    .collect()
            };
            let target = delta * cn;
            let mut scale = if zn > 0.0 { target / zn } else { 0.0 };
            let mut noisy = perturb(scale);
            // clamping eats part of the noise near the bounds; rescale until the
            // realized level matches
            for _ in 0..50 {
                let realized = noisy.iter().zip(&clean).map(|(n, c)| (n - c).powi(2)).sum::<f64>().sqrt();
                if realized == 0.0 || (realized - target).abs() <= 1e-10 * target {
                    break;
                }
                scale *= target / realized;
                noisy = perturb(scale);
            }
            (noisy, Some(delta), Some(seed))
        }
    };
    Ok(QuoteSet {
        quotes: nodes
            .iter()
            .zip(prices)
            .map(|(&(tau, y), price)| Quote {
                tau,
                y,
                price,
                implied_vol: None,
            })
            .collect(),
        provenance: Provenance::Synthetic,
        delta,
        seed,
    })
}
