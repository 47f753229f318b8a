//! End-to-end pipelines shared by the command line and the acceptance runs.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analytic::{carr_madan_price, compare, implied_vol, Comparison};
use crate::error::{Error, Result};
use crate::grid::{Grid, MarketParams};
use crate::io::{RunConfig, TailParamSpec, TailPenaltyKind};
use crate::levy_tail::{recover_density, tail_from_density, JumpDensity, Recovery, RecoveryOptions, TailFunction};
use crate::pide::{PideModel, WeightMode};
use crate::regularization::{descend, Descent, DescentOptions, Penalty, StopReason, TikhonovObjective};
use crate::splitting::{split_calibrate, SplitConfig, SplitState, SplitStop, TailParametrization};
use crate::surface::VolSurface;
use crate::synthetic::{
    make_quotes, reference_jump_density, reference_vol_surface, prior_jump_density, Noise, QuoteLattice, QuoteSet,
};

/// Constant local variance of the constant-volatility experiments.
pub const FLAT_VARIANCE: f64 = 0.0113;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Constant volatility with Gaussian jumps, near-the-money quotes.
    #[serde(rename = "table1")]
    Flat,
    /// Smile volatility with Gaussian jumps, near-the-money quotes.
    #[serde(rename = "sec71")]
    Smile,
    /// Smile volatility with Gaussian jumps, quotes deep into the money.
    #[serde(rename = "sec73")]
    Wide,
}

/// Model parameters and the quotes they generate.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub vol: VolSurface,
    pub nu: JumpDensity,
    pub tail: TailFunction,
    pub lattice: QuoteLattice,
    pub quotes: QuoteSet,
}

pub fn model(cfg: &RunConfig, grid: &Grid) -> PideModel {
    PideModel::new(*grid, cfg.market, cfg.weight_mode)
}

pub fn synthesize(preset: Preset, cfg: &RunConfig, grid: &Grid) -> Result<Synthetic> {
    let (vol, lattice) = match preset {
        Preset::Flat => (VolSurface::constant(grid, FLAT_VARIANCE), QuoteLattice::near_money()),
        Preset::Smile => (reference_vol_surface(grid), QuoteLattice::near_money()),
        Preset::Wide => (reference_vol_surface(grid), QuoteLattice::wide()),
    };
    let (nu, _) = reference_jump_density(grid);
    let tail = tail_from_density(&nu, grid)?;
    let noise = match cfg.noise {
        Some(delta) if delta > 0.0 => Noise::Gaussian { delta },
        _ => Noise::None,
    };
    let quotes = make_quotes(&model(cfg, grid), &vol, &tail, &lattice.nodes(), noise, cfg.seed)?
        .with_implied_vols(cfg.market.r);
    Ok(Synthetic {
        vol,
        nu,
        tail,
        lattice,
        quotes,
    })
}

/// Implied vols of the PIDE and of the Fourier oracle at the lattice nodes,
/// both under constant variance `a0` and jump masses `nu`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleComparison {
    pub weight_mode: WeightMode,
    pub comparison: Comparison,
    pub nodes: Vec<(f64, f64)>,
    pub model_vols: Vec<f64>,
    pub oracle_vols: Vec<f64>,
}

pub fn fourier_comparison(
    grid: &Grid,
    market: MarketParams,
    weight_mode: WeightMode,
    a0: f64,
    nu: &JumpDensity,
    lattice: &QuoteLattice,
) -> Result<OracleComparison> {
    let m = PideModel::new(*grid, market, weight_mode);
    let u = m.solve(&VolSurface::constant(grid, a0), &tail_from_density(nu, grid)?)?;
    let sigma = (2.0 * a0).sqrt();
    let (mut nodes, mut model_vols, mut oracle_vols) = (Vec::new(), Vec::new(), Vec::new());
    for &tau in &lattice.taus {
        let i = grid.level_index(tau)?;
        let oracle = carr_madan_price(sigma, nu, grid, tau, &lattice.ys, market.r, 0.75)?;
        for (&y, p) in lattice.ys.iter().zip(oracle) {
            let k = grid.node_index(y)?;
            nodes.push((tau, y));
            oracle_vols.push(implied_vol(p, y, tau, market.r)?);
            model_vols.push(implied_vol(u.at(i, k), y, tau, market.r)?);
        }
    }
    Ok(OracleComparison {
        weight_mode,
        comparison: compare(&model_vols, &oracle_vols)?,
        nodes,
        model_vols,
        oracle_vols,
    })
}

fn vol_options(cfg: &RunConfig) -> DescentOptions {
    let c = &cfg.calibration;
    DescentOptions {
        max_iters: c.vol_iters,
        grad_tol: c.grad_tol,
        residual_tol: c.residual_tol,
        discrepancy: c.delta.map(|d| (d, c.lambda)),
        lower: c.a_lower,
        upper: c.a_upper,
        ..DescentOptions::default()
    }
}

fn objective(
    cfg: &RunConfig,
    grid: &Grid,
    quotes: &QuoteSet,
    lattice: &QuoteLattice,
    tail_penalty: Option<Penalty>,
) -> Result<TikhonovObjective> {
    quotes.validate(cfg.market.r)?;
    let c = &cfg.calibration;
    let prior = Array2::from_elem(lattice.shape(), c.a_prior);
    let alpha_tail = if tail_penalty.is_some() { c.alpha_tail } else { 0.0 };
    let mut obj = TikhonovObjective::new(
        model(cfg, grid),
        quotes.observations(grid)?,
        lattice.clone(),
        c.alpha_vol,
        alpha_tail,
        Penalty::sobolev(prior, c.weights)?,
        tail_penalty,
    )?;
    obj.mode = cfg.adjoint_mode;
    Ok(obj)
}

/// Volatility calibrated with the tail held fixed.
#[derive(Debug, Clone)]
pub struct VolFit {
    pub lattice: QuoteLattice,
    pub descent: Descent,
    pub vol: VolSurface,
    pub converged: bool,
}

fn on_lattice(lattice: &QuoteLattice, x: &[f64]) -> Result<Array2<f64>> {
    Array2::from_shape_vec(lattice.shape(), x.to_vec()).map_err(|e| Error::config(e.to_string()))
}

impl VolFit {
    pub fn coarse(&self) -> Result<Array2<f64>> {
        on_lattice(&self.lattice, &self.descent.x)
    }
}

/// Vol-only Tikhonov calibration on the lattice covering the quotes,
/// started from the constant prior.
pub fn calibrate_vol(cfg: &RunConfig, grid: &Grid, quotes: &QuoteSet, phi: &TailFunction) -> Result<VolFit> {
    let lattice = QuoteLattice::covering(quotes)?;
    let obj = objective(cfg, grid, quotes, &lattice, None)?;
    let x0 = vec![cfg.calibration.a_prior; lattice.len()];
    let descent = descend(&mut obj.vol_block(phi), &x0, &vol_options(cfg))?;
    let converged = matches!(
        descent.stop,
        StopReason::Residual | StopReason::Discrepancy | StopReason::Gradient
    );
    let vol = lattice.interpolate(&on_lattice(&lattice, &descent.x)?, grid)?;
    Ok(VolFit {
        lattice,
        descent,
        vol,
        converged,
    })
}

/// Result of the alternating calibration.
#[derive(Debug, Clone)]
pub struct SplitFit {
    pub objective: TikhonovObjective,
    pub state: SplitState,
    pub vol: VolSurface,
    pub tail: TailFunction,
    pub converged: bool,
}

pub fn split_config(cfg: &RunConfig) -> SplitConfig {
    let c = &cfg.calibration;
    SplitConfig {
        outer_max: c.outer_max,
        residual_tol: c.residual_tol,
        discrepancy: c.delta.map(|d| (d, c.lambda)),
        vol: vol_options(cfg),
        tail: DescentOptions {
            max_iters: c.tail_iters,
            grad_tol: c.grad_tol,
            ..DescentOptions::default()
        },
        ..SplitConfig::default()
    }
}

/// Alternating calibration of volatility and tail, started from the
/// constant variance prior and the tail of `tail_prior`, which also anchors
/// the tail penalty.
pub fn calibrate_split(
    cfg: &RunConfig,
    grid: &Grid,
    quotes: &QuoteSet,
    tail_prior: &TailFunction,
    progress: Option<&mut dyn Write>,
) -> Result<SplitFit> {
    let c = &cfg.calibration;
    let lattice = QuoteLattice::covering(quotes)?;
    let tail_penalty = match c.tail_penalty {
        TailPenaltyKind::L2 => Some(Penalty::l2(tail_prior.phi.clone())),
        TailPenaltyKind::Kl => Some(Penalty::kl(tail_prior.phi.clone())?),
        TailPenaltyKind::None => None,
    };
    let objective = objective(cfg, grid, quotes, &lattice, tail_penalty)?;
    let tail = match c.tail {
        TailParamSpec::Nodal => TailParametrization::nodal(tail_prior),
        TailParamSpec::LogFourier { terms } => TailParametrization::fit_log_fourier(tail_prior, grid, terms)?,
    };
    let init = SplitState::new(Array2::from_elem(lattice.shape(), c.a_prior), tail);
    let state = split_calibrate(&objective, init, &split_config(cfg), progress)?;
    let vol = lattice.interpolate(&state.vol, grid)?;
    let (tail, _) = state.tail.to_phi(grid)?;
    let converged = matches!(
        state.stop,
        Some(SplitStop::Residual | SplitStop::Discrepancy | SplitStop::Stationary)
    );
    Ok(SplitFit {
        objective,
        state,
        vol,
        tail,
        converged,
    })
}

/// Tail of the asymmetric prior jump density.
pub fn prior_tail(grid: &Grid) -> Result<TailFunction> {
    tail_from_density(&prior_jump_density(grid), grid)
}

pub fn recover_nu(cfg: &RunConfig, grid: &Grid, tail: &TailFunction, prior: &JumpDensity) -> Result<Recovery> {
    let opts = RecoveryOptions {
        max_iters: cfg.recovery.max_iters,
        ..RecoveryOptions::default()
    };
    recover_density(tail, prior, cfg.recovery.alpha, grid, &opts)
}
