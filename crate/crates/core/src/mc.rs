//! Monte Carlo for lookback options under local volatility with compound
//! Poisson jumps.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, MarketParams};
use crate::levy_tail::JumpDensity;
use crate::surface::VolSurface;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerJump,
    EulerDupire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub scheme: Scheme,
    pub seed: u64,
    pub maturities: Vec<f64>,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            n_paths: 10_000,
            scheme: Scheme::EulerJump,
            seed: 20_170_401,
            maturities: vec![0.1, 0.2, 0.3, 0.5],
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.n_paths == 0 {
            return Err(Error::config("need at least one step and one path"));
        }
        if self.maturities.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::config("maturities must be positive"));
        }
        Ok(())
    }
}

/// Local volatility `sigma(t, y)` read off a surface by bilinear
/// interpolation, constant beyond the grid.
#[derive(Debug, Clone)]
pub struct LocalVol {
    grid: Grid,
    sigma: Array2<f64>,
}

impl LocalVol {
    pub fn new(a: &VolSurface, grid: &Grid) -> Self {
        Self {
            grid: *grid,
            sigma: a.sigma(),
        }
    }

    pub fn at(&self, t: f64, y: f64) -> f64 {
        let g = &self.grid;
        let ft = (t / g.dtau()).clamp(0.0, g.n_steps() as f64);
        let fy = ((y - g.y_min()) / g.dy()).clamp(0.0, (g.n_nodes() - 1) as f64);
        let i0 = (ft.floor() as usize).min(g.n_steps().saturating_sub(1));
        let k0 = (fy.floor() as usize).min(g.n_nodes() - 2);
        let (s, w) = (ft - i0 as f64, fy - k0 as f64);
        let i1 = (i0 + 1).min(g.n_steps());
        let v = &self.sigma;
        (1.0 - s) * ((1.0 - w) * v[(i0, k0)] + w * v[(i0, k0 + 1)])
            + s * ((1.0 - w) * v[(i1, k0)] + w * v[(i1, k0 + 1)])
    }
}

/// Inverse-CDF sampler for jump sizes, uniform within each lattice cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpSampler {
    pub intensity: f64,
    edges: Vec<f64>,
    cdf: Vec<f64>,
    /// `E[e^J] - 1` under the sampled law.
    pub mean_relative_jump: f64,
}

impl JumpSampler {
    pub fn new(nu: &JumpDensity, grid: &Grid) -> Result<Self> {
        let intensity = nu.intensity();
        if !intensity.is_finite() || intensity < 0.0 {
            return Err(Error::domain(format!("jump intensity must be finite, got {intensity}")));
        }
        let h = grid.dy();
        let mut cdf = Vec::with_capacity(nu.nu.len() + 1);
        let mut edges = Vec::with_capacity(nu.nu.len() + 1);
        cdf.push(0.0);
        edges.push(grid.y(0) - 0.5 * h);
        let mut acc = 0.0;
        let mut mgf = 0.0;
        // uniform on [y - h/2, y + h/2] has E[e^J] = e^y sinh(h/2) / (h/2)
        let cell_mgf = (0.5 * h).sinh() / (0.5 * h);
        for (k, &m) in nu.nu.iter().enumerate() {
            acc += m;
            mgf += m * grid.y(k).exp() * cell_mgf;
            cdf.push(acc);
            edges.push(grid.y(k) + 0.5 * h);
        }
        if intensity > 0.0 {
            for c in &mut cdf {
                *c /= intensity;
            }
        }
        let mean_relative_jump = if intensity > 0.0 { mgf / intensity - 1.0 } else { 0.0 };
        Ok(Self {
            intensity,
            edges,
            cdf,
            mean_relative_jump,
        })
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// Jump size for a uniform draw `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        let hi = self.cdf.partition_point(|&c| c <= u).clamp(1, self.cdf.len() - 1);
        let lo = hi - 1;
        let width = self.cdf[hi] - self.cdf[lo];
        let s = if width > 0.0 { (u - self.cdf[lo]) / width } else { 0.5 };
        self.edges[lo] + s.clamp(0.0, 1.0) * (self.edges[hi] - self.edges[lo])
    }

    /// Compensator `lambda (E[e^J] - 1)`.
    pub fn compensator(&self) -> f64 {
        self.intensity * self.mean_relative_jump
    }
}

/// Per-path terminal value and running extrema over the monitoring dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub tau: f64,
    pub terminal: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.terminal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminal.is_empty()
    }
}

/// Simulate paths to maturity `tau` with `cfg.n_steps` log-Euler steps.
/// Path `l` draws from stream `l` of the seeded generator, so results do not
/// depend on scheduling.
pub fn simulate_paths(
    a: &VolSurface,
    nu: &JumpDensity,
    grid: &Grid,
    cfg: &PathConfig,
    market: &MarketParams,
    tau: f64,
) -> Result<Ensemble> {
    cfg.validate()?;
    if !(tau > 0.0) {
        return Err(Error::config(format!("maturity must be positive, got {tau}")));
    }
    let vol = LocalVol::new(a, grid);
    let jumps = match cfg.scheme {
        Scheme::EulerJump => JumpSampler::new(nu, grid)?,
        Scheme::EulerDupire => JumpSampler::new(&JumpDensity::zero(grid), grid)?,
    };
    let n = cfg.n_steps;
    let dt = tau / n as f64;
    let sqdt = dt.sqrt();
    let r = market.r;
    let s0 = market.s0;
    let kappa = jumps.compensator();
    let arrivals = if jumps.intensity > 0.0 {
        Some(Poisson::new(jumps.intensity * dt).map_err(|e| Error::domain(e.to_string()))?)
    } else {
        None
    };
    let paths: Vec<(f64, f64, f64)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(l as u64);
            let mut x = 0.0f64;
            let (mut lo, mut hi) = (0.0f64, 0.0f64);
            for k in 0..n {
                let t = k as f64 * dt;
                let sigma = vol.at(t, x);
                let z: f64 = StandardNormal.sample(&mut rng);
                x += (r - 0.5 * sigma * sigma - kappa) * dt + sigma * sqdt * z;
                if let Some(p) = &arrivals {
                    let count = p.sample(&mut rng) as u64;
                    for _ in 0..count {
                        x += jumps.quantile(rng.gen::<f64>());
                    }
                }
                lo = lo.min(x);
                hi = hi.max(x);
            }
            (s0 * x.exp(), s0 * lo.exp(), s0 * hi.exp())
        })
        .collect();
    let mut ens = Ensemble {
        tau,
        terminal: Vec::with_capacity(paths.len()),
        min: Vec::with_capacity(paths.len()),
        max: Vec::with_capacity(paths.len()),
    };
    for (t, lo, hi) in paths {
        ens.terminal.push(t);
        ens.min.push(lo);
        ens.max.push(hi);
    }
    Ok(ens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookbackKind {
    /// `max(0, S_T - min S)`.
    Call,
    /// `max(0, max S)`, the put payoff as printed.
    PutVerbatim,
    /// `max(0, max S - S_T)`.
    PutVsTerminal,
}

/// Mean and standard error, summed pairwise in fixed order.
pub fn mean_and_error(samples: &[f64]) -> (f64, f64) {
    fn pairwise(v: &[f64]) -> f64 {
        if v.len() <= 64 {
            v.iter().sum()
        } else {
            let (a, b) = v.split_at(v.len() / 2);
            pairwise(a) + pairwise(b)
        }
    }
    let n = samples.len() as f64;
    let mean = pairwise(samples) / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = samples.iter().map(|x| (x - mean).powi(2)).collect();
    let var = pairwise(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Discounted lookback price and its standard error.
pub fn lookback_price(kind: LookbackKind, ens: &Ensemble, r: f64) -> Result<(f64, f64)> {
    if ens.is_empty() || ens.min.len() != ens.len() || ens.max.len() != ens.len() {
        return Err(Error::config("ensemble extrema do not match its terminal values"));
    }
    let payoffs: Vec<f64> = (0..ens.len())
        .map(|l| match kind {
            LookbackKind::Call => (ens.terminal[l] - ens.min[l]).max(0.0),
            LookbackKind::PutVerbatim => ens.max[l].max(0.0),
            LookbackKind::PutVsTerminal => (ens.max[l] - ens.terminal[l]).max(0.0),
        })
        .collect();
    let (m, se) = mean_and_error(&payoffs);
    let disc = (-r * ens.tau).exp();
    Ok((disc * m, disc * se))
}

/// Local volatility and jump measure of one model.
#[derive(Debug, Clone, Copy)]
pub struct ModelSpec<'a> {
    pub vol: &'a VolSurface,
    pub nu: &'a JumpDensity,
    pub scheme: Scheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub label: String,
    pub prices: Vec<f64>,
    pub std_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookbackTable {
    pub kind: LookbackKind,
    pub maturities: Vec<f64>,
    /// Jump model, Dupire model, truth.
    pub rows: Vec<PriceRow>,
    /// `|model - truth| / truth` for the jump and Dupire rows.
    pub errors: Vec<Vec<f64>>,
}

impl LookbackTable {
    pub fn truth(&self) -> &PriceRow {
        &self.rows[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookbackTables {
    pub call: LookbackTable,
    pub put: LookbackTable,
    pub put_verbatim: LookbackTable,
    /// The jump model's call error beats the Dupire model's at every maturity.
    pub call_ranking_holds: bool,
}

/// Lookback calls and puts under the calibrated jump model, a pure local
/// volatility model and the true model.
pub fn lookback_tables(
    jumps: ModelSpec<'_>,
    dupire: ModelSpec<'_>,
    truth: ModelSpec<'_>,
    grid: &Grid,
    cfg: &PathConfig,
    market: &MarketParams,
) -> Result<LookbackTables> {
    let kinds = [LookbackKind::Call, LookbackKind::PutVsTerminal, LookbackKind::PutVerbatim];
    let mut prices = vec![vec![(Vec::new(), Vec::new()); 3]; kinds.len()];
    for (m, spec) in [jumps, dupire, truth].iter().enumerate() {
        let run = PathConfig {
            scheme: spec.scheme,
            ..cfg.clone()
        };
        for &tau in &cfg.maturities {
            let ens = simulate_paths(spec.vol, spec.nu, grid, &run, market, tau)?;
            for (q, &kind) in kinds.iter().enumerate() {
                let (p, se) = lookback_price(kind, &ens, market.r)?;
                prices[q][m].0.push(p);
                prices[q][m].1.push(se);
            }
        }
    }
    let labels = ["Jumps", "Dupire", "True"];
    let mut tables = kinds.iter().zip(prices).map(|(&kind, rows)| {
        let rows: Vec<PriceRow> = rows
            .into_iter()
            .zip(labels)
            .map(|((prices, std_errors), label)| PriceRow {
                label: label.to_string(),
                prices,
                std_errors,
            })
            .collect();
        let errors = rows[..2]
            .iter()
            .map(|row| {
                row.prices
                    .iter()
                    .zip(&rows[2].prices)
                    .map(|(p, t)| (p - t).abs() / t)
                    .collect()
            })
            .collect();
        LookbackTable {
            kind,
            maturities: cfg.maturities.clone(),
            rows,
            errors,
        }
    });
    let call = tables.next().ok_or_else(|| Error::config("missing call table"))?;
    let put = tables.next().ok_or_else(|| Error::config("missing put table"))?;
    let put_verbatim = tables.next().ok_or_else(|| Error::config("missing put table"))?;
    let call_ranking_holds = call.errors[0].iter().zip(&call.errors[1]).all(|(j, d)| j < d);
    Ok(LookbackTables {
        call,
        put,
        put_verbatim,
        call_ranking_holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::bs_price;
    use crate::synthetic::{reference_jump_density, reference_vol_surface};

    fn grid() -> Grid {
        Grid::symmetric(1.0, 5.0, 0.005, 0.025).unwrap()
    }

    #[test]
    fn sampler_cdf_shape() {
        let g = grid();
        let (nu, _) = reference_jump_density(&g);
        let s = JumpSampler::new(&nu, &g).unwrap();
        assert!(s.cdf().windows(2).all(|w| w[1] >= w[0]));
        assert!((s.cdf().last().unwrap() - 1.0).abs() < 1e-12);
        assert!((s.intensity - nu.intensity()).abs() < 1e-15);
        // the empty center cell leaves a flat stretch of the CDF at one half
        assert!(s.quantile(0.5).abs() <= 0.0125 + 1e-12);
        assert!((s.quantile(0.3) + s.quantile(0.7)).abs() < 1e-9);
        assert!(s.quantile(0.0) >= -5.0125 && s.quantile(0.999_999) <= 5.0125);
    }

    #[test]
    fn sampled_jump_moments() {
        let g = grid();
        let (nu, _) = reference_jump_density(&g);
        let s = JumpSampler::new(&nu, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| s.quantile(rng.gen())).collect();
        let (m, se) = mean_and_error(&draws);
        assert!(m.abs() < 4.0 * se);
        let (m2, se2) = mean_and_error(&draws.iter().map(|x| x * x).collect::<Vec<_>>());
        // unit Gaussian minus its center cell, plus the within-cell spread
        assert!((m2 - 1.0).abs() < 4.0 * se2 + 1e-3, "{m2}");
        let (e, see) = mean_and_error(&draws.iter().map(|x| x.exp()).collect::<Vec<_>>());
        assert!((e - 1.0 - s.mean_relative_jump).abs() < 4.0 * see);
    }

    #[test]
    fn martingale_without_jumps() {
        let g = grid();
        let a = VolSurface::constant(&g, 0.02);
        let mkt = MarketParams::new(0.03, 1.0).unwrap();
        let cfg = PathConfig {
            n_paths: 100_000,
            scheme: Scheme::EulerDupire,
            ..Default::default()
        };
        let ens = simulate_paths(&a, &JumpDensity::zero(&g), &g, &cfg, &mkt, 0.5).unwrap();
        let (m, se) = mean_and_error(&ens.terminal);
        assert!((m - (0.03f64 * 0.5).exp()).abs() < 3.0 * se);
        let payoff: Vec<f64> = ens.terminal.iter().map(|s| (s - 1.0).max(0.0)).collect();
        let (c, sec) = mean_and_error(&payoff);
        let call = (-0.015f64).exp() * c;
        let bs = bs_price(0.0, 0.5, 0.2, 0.03);
        assert!((call - bs).abs() < 3.0 * sec, "{call} {bs} {sec}");
    }

    #[test]
    fn martingale_with_reference_parameters() {
        let g = grid();
        let a = reference_vol_surface(&g);
        let (nu, _) = reference_jump_density(&g);
        let cfg = PathConfig {
            n_paths: 50_000,
            ..Default::default()
        };
        let ens = simulate_paths(&a, &nu, &g, &cfg, &MarketParams::default(), 0.4).unwrap();
        let (m, se) = mean_and_error(&ens.terminal);
        assert!((m - 1.0).abs() < 3.0 * se, "{m} {se}");
    }

    #[test]
    fn frozen_paths_have_zero_call() {
        let g = grid();
        let a = VolSurface::constant(&g, 0.0);
        let cfg = PathConfig {
            n_paths: 100,
            ..Default::default()
        };
        let ens = simulate_paths(&a, &JumpDensity::zero(&g), &g, &cfg, &MarketParams::default(), 0.3).unwrap();
        assert_eq!(lookback_price(LookbackKind::Call, &ens, 0.0).unwrap().0, 0.0);
        assert_eq!(lookback_price(LookbackKind::PutVsTerminal, &ens, 0.0).unwrap().0, 0.0);
        assert_eq!(lookback_price(LookbackKind::PutVerbatim, &ens, 0.0).unwrap().0, 1.0);
    }

    #[test]
    fn reruns_are_identical() {
        let g = grid();
        let a = reference_vol_surface(&g);
        let (nu, _) = reference_jump_density(&g);
        let cfg = PathConfig {
            n_paths: 2000,
            ..Default::default()
        };
        let e1 = simulate_paths(&a, &nu, &g, &cfg, &MarketParams::default(), 0.2).unwrap();
        let e2 = simulate_paths(&a, &nu, &g, &cfg, &MarketParams::default(), 0.2).unwrap();
        assert_eq!(serde_json::to_string(&e1).unwrap(), serde_json::to_string(&e2).unwrap());
    }

    #[test]
    fn coarser_monitoring_lowers_the_call() {
        let g = grid();
        let a = reference_vol_surface(&g);
        let (nu, _) = reference_jump_density(&g);
        let fine = PathConfig::default();
        let coarse = PathConfig {
            n_steps: 10,
            ..Default::default()
        };
        let mkt = MarketParams::default();
        let (pf, sf) = lookback_price(LookbackKind::Call, &simulate_paths(&a, &nu, &g, &fine, &mkt, 0.3).unwrap(), 0.0).unwrap();
        let (pc, _) = lookback_price(LookbackKind::Call, &simulate_paths(&a, &nu, &g, &coarse, &mkt, 0.3).unwrap(), 0.0).unwrap();
        assert!(pc <= pf + sf, "{pc} {pf}");
    }

    #[test]
    fn error_shrinks_with_paths() {
        // without jumps; rare unit-scale jumps make the small-sample error
        // estimate itself unreliable
        let g = grid();
        let a = reference_vol_surface(&g);
        let (nu, _) = reference_jump_density(&g);
        let mkt = MarketParams::default();
        let se = |n: usize| {
            let cfg = PathConfig {
                n_paths: n,
                scheme: Scheme::EulerDupire,
                ..Default::default()
            };
            lookback_price(LookbackKind::Call, &simulate_paths(&a, &nu, &g, &cfg, &mkt, 0.1).unwrap(), 0.0)
                .unwrap()
                .1
        };
        let (s3, s4, s5) = (se(1000), se(10_000), se(100_000));
        for ratio in [s3 / s4, s4 / s5] {
            assert!((ratio / 10f64.sqrt() - 1.0).abs() < 0.2, "{ratio}");
        }
    }

    #[test]
    fn identical_models_give_zero_errors() {
        let g = grid();
        let a = reference_vol_surface(&g);
        let (nu, _) = reference_jump_density(&g);
        let spec = ModelSpec {
            vol: &a,
            nu: &nu,
            scheme: Scheme::EulerJump,
        };
        let cfg = PathConfig {
            n_paths: 500,
            maturities: vec![0.1, 0.2],
            ..Default::default()
        };
        let t = lookback_tables(spec, spec, spec, &g, &cfg, &MarketParams::default()).unwrap();
        assert!(t.call.errors.iter().flatten().all(|e| *e == 0.0));
        assert!(t.put.errors.iter().flatten().all(|e| *e == 0.0));
        assert!(!t.call_ranking_holds);
    }
}
