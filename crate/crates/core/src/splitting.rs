//! Alternating minimization over the volatility and tail blocks.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::levy_tail::TailFunction;
use crate::regularization::{descend, Descent, DescentOptions, Objective, Point, StopReason, TikhonovObjective};

/// Largest admissible log-tail before exponentiation.
pub const LOG_TAIL_CAP: f64 = 50.0;

/// Unknowns of the tail block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TailParametrization {
    /// One value per grid node.
    Nodal { phi: Vec<f64> },
    /// `log phi` on each half-line as a cosine series
    /// `sum_k c_k cos(k pi (y - lo) / (hi - lo))`.
    LogFourier { minus: Vec<f64>, plus: Vec<f64> },
}

impl TailParametrization {
    pub fn nodal(phi: &TailFunction) -> Self {
        Self::Nodal { phi: phi.phi.clone() }
    }

    /// Least-squares fit of `log phi` on the nodes where `phi > 0`.
    pub fn fit_log_fourier(phi: &TailFunction, grid: &Grid, terms: usize) -> Result<Self> {
        if terms == 0 {
            return Err(Error::config("log-Fourier tail needs at least one term"));
        }
        let mut halves = Vec::new();
        for side in [Side::Minus, Side::Plus] {
            let rows: Vec<usize> = (0..grid.n_nodes())
                .filter(|&k| side.contains(grid, k) && phi.phi[k] > 0.0)
                .collect();
            if rows.len() < terms {
                return Err(Error::domain("too few positive tail values to fit"));
            }
            let design = DMatrix::from_fn(rows.len(), terms, |r, c| side.basis(grid, rows[r], c));
            let target = DVector::from_iterator(rows.len(), rows.iter().map(|&k| phi.phi[k].ln()));
            let coeffs = design
                .svd(true, true)
                .solve(&target, 1e-14)
                .map_err(|e| Error::NumericalBreakdown {
                    step: 0,
                    detail: e.to_string(),
                })?;
            halves.push(coeffs.iter().copied().collect::<Vec<_>>());
        }
        let plus = halves.pop().unwrap_or_default();
        let minus = halves.pop().unwrap_or_default();
        Ok(Self::LogFourier { minus, plus })
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Nodal { phi } => phi.clone(),
            Self::LogFourier { minus, plus } => minus.iter().chain(plus).copied().collect(),
        }
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        match self {
            Self::Nodal { .. } => Self::Nodal { phi: p.to_vec() },
            Self::LogFourier { minus, .. } => {
                let (m, q) = p.split_at(minus.len());
                Self::LogFourier {
                    minus: m.to_vec(),
                    plus: q.to_vec(),
                }
            }
        }
    }

    /// Nodal tail and whether the log cap was hit.
    pub fn to_phi(&self, grid: &Grid) -> Result<(TailFunction, bool)> {
        match self {
            Self::Nodal { phi } => Ok((TailFunction::new(phi.clone(), grid)?, false)),
            Self::LogFourier { minus, plus } => {
                let mut capped = false;
                let phi = (0..grid.n_nodes())
                    .map(|k| {
                        let gamma = log_tail(grid, k, minus, plus);
                        capped |= gamma.is_some_and(|g| g > LOG_TAIL_CAP);
                        gamma.map_or(0.0, |g| g.min(LOG_TAIL_CAP).exp())
                    })
                    .collect();
                Ok((TailFunction::new(phi, grid)?, capped))
            }
        }
    }

    /// Pull a gradient with respect to the nodal tail back to the parameters.
    pub fn pullback(&self, grid: &Grid, phi: &TailFunction, grad_phi: &[f64]) -> Vec<f64> {
        match self {
            Self::Nodal { .. } => {
                let mut g = grad_phi.to_vec();
                g[grid.zero_index()] = 0.0;
                g
            }
            Self::LogFourier { minus, plus } => {
                let mut gm = vec![0.0; minus.len()];
                let mut gp = vec![0.0; plus.len()];
                for k in 0..grid.n_nodes() {
                    let Some(side) = Side::of(grid, k) else { continue };
                    if log_tail(grid, k, minus, plus).is_some_and(|g| g > LOG_TAIL_CAP) {
                        continue;
                    }
                    let w = grad_phi[k] * phi.phi[k];
                    let out = match side {
                        Side::Minus => &mut gm,
                        Side::Plus => &mut gp,
                    };
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += w * side.basis(grid, k, c);
                    }
                }
                gm.into_iter().chain(gp).collect()
            }
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match self {
            Self::Nodal { .. } => (0.0, f64::INFINITY),
            Self::LogFourier { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

#[derive(Clone, Copy)]
enum Side {
    Minus,
    Plus,
}

impl Side {
    fn of(grid: &Grid, k: usize) -> Option<Self> {
        use std::cmp::Ordering::*;
        match k.cmp(&grid.zero_index()) {
            Less => Some(Self::Minus),
            Greater => Some(Self::Plus),
            Equal => None,
        }
    }

    fn contains(self, grid: &Grid, k: usize) -> bool {
        matches!((Self::of(grid, k), self), (Some(Self::Minus), Self::Minus) | (Some(Self::Plus), Self::Plus))
    }

    fn basis(self, grid: &Grid, k: usize, c: usize) -> f64 {
        let y = grid.y(k);
        let (lo, hi) = match self {
            Self::Minus => (grid.y_min(), 0.0),
            Self::Plus => (0.0, grid.y_max()),
        };
        (c as f64 * PI * (y - lo) / (hi - lo)).cos()
    }
}

fn log_tail(grid: &Grid, k: usize, minus: &[f64], plus: &[f64]) -> Option<f64> {
    let side = Side::of(grid, k)?;
    let coeffs = match side {
        Side::Minus => minus,
        Side::Plus => plus,
    };
    Some(coeffs.iter().enumerate().map(|(c, v)| v * side.basis(grid, k, c)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Vol,
    Tail,
}

/// Which blocks the outer loop updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blocks {
    #[default]
    Both,
    VolOnly,
    TailOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStop {
    Residual,
    Discrepancy,
    /// Neither block could move: both inner runs ended on the gradient test
    /// without taking a step.
    Stationary,
    OuterMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub outer_max: usize,
    pub residual_tol: Option<f64>,
    /// Relative noise level and factor.
    pub discrepancy: Option<(f64, f64)>,
    pub first: Block,
    pub blocks: Blocks,
    pub vol: DescentOptions,
    pub tail: DescentOptions,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            outer_max: 4,
            residual_tol: Some(0.002),
            discrepancy: None,
            first: Block::Vol,
            blocks: Blocks::Both,
            vol: DescentOptions::vol_box(),
            tail: DescentOptions::default(),
        }
    }
}

/// One line of the progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub iteration: usize,
    pub block: Option<Block>,
    pub residual: f64,
    pub objective: f64,
    pub vol_penalty: f64,
    pub tail_penalty: f64,
    pub inner_iterations: usize,
    pub inner_stop: Option<StopReason>,
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitState {
    /// Volatility values on the objective's quote lattice.
    pub vol: Array2<f64>,
    pub tail: TailParametrization,
    pub outer_iter: usize,
    pub history: Vec<Record>,
    pub stop: Option<SplitStop>,
    /// Some inner run hit its backtracking limit.
    pub stalled: bool,
}

impl SplitState {
    pub fn new(vol: Array2<f64>, tail: TailParametrization) -> Self {
        Self {
            vol,
            tail,
            outer_iter: 0,
            history: Vec::new(),
            stop: None,
            stalled: false,
        }
    }

    pub fn residual(&self) -> Option<f64> {
        self.history.last().map(|r| r.residual)
    }

    pub fn objective(&self) -> Option<f64> {
        self.history.last().map(|r| r.objective)
    }
}

struct TailBlock<'a> {
    obj: &'a TikhonovObjective,
    vol: &'a [f64],
    shape: &'a TailParametrization,
    vol_penalty: f64,
}

impl Objective for TailBlock<'_> {
    fn evaluate(&mut self, p: &[f64]) -> Result<Point> {
        let o = self.obj;
        let g = &o.model.grid;
        let tail = self.shape.with_params(p);
        let (phi, _) = tail.to_phi(g)?;
        let (m, _, mut grad_phi, residual) = o.misfit_gradients(self.vol, &phi)?;
        let mut value = m + o.alpha_vol * self.vol_penalty;
        if let Some(pen) = &o.tail_penalty {
            let (pv, pg) = pen.value_and_grad(&phi.phi)?;
            value += o.alpha_tail * pv;
            for (a, b) in grad_phi.iter_mut().zip(&pg) {
                *a += o.alpha_tail * b;
            }
        }
        Ok(Point {
            value,
            grad: tail.pullback(g, &phi, &grad_phi),
            residual,
        })
    }
}

fn snapshot(
    obj: &TikhonovObjective,
    state: &SplitState,
    iteration: usize,
    block: Option<Block>,
    inner: Option<&Descent>,
) -> Result<Record> {
    let g = &obj.model.grid;
    let (phi, capped) = state.tail.to_phi(g)?;
    let c = state.vol.as_slice().ok_or_else(|| Error::config("vol lattice must be contiguous"))?;
    let (objective, residual) = obj.value(c, &phi)?;
    Ok(Record {
        iteration,
        block,
        residual,
        objective,
        vol_penalty: obj.vol_penalty_value(c)?,
        tail_penalty: obj.tail_penalty_value(&phi)?,
        inner_iterations: inner.map_or(0, |d| d.iterations),
        inner_stop: inner.map(|d| d.stop),
        capped,
    })
}

fn emit(progress: &mut Option<&mut dyn Write>, record: &Record) -> Result<()> {
    if let Some(w) = progress {
        serde_json::to_writer(&mut **w, record)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Alternate inner descents on the two blocks until the residual target,
/// the discrepancy test, stationarity or the outer limit.
pub fn split_calibrate(
    obj: &TikhonovObjective,
    init: SplitState,
    cfg: &SplitConfig,
    mut progress: Option<&mut dyn Write>,
) -> Result<SplitState> {
    if init.vol.dim() != obj.lattice.shape() {
        return Err(Error::config(format!(
            "initial vol {:?} does not match lattice {:?}",
            init.vol.dim(),
            obj.lattice.shape()
        )));
    }
    let mut state = init;
    state.vol = state.vol.as_standard_layout().into_owned();
    state.outer_iter = 0;
    state.stop = None;
    let g = obj.model.grid;
    let start = snapshot(obj, &state, 0, None, None)?;
    emit(&mut progress, &start)?;
    state.history.push(start);

    let done = |state: &SplitState| -> Result<Option<SplitStop>> {
        let res = state.residual().unwrap_or(f64::INFINITY);
        if cfg.residual_tol.is_some_and(|tol| res <= tol) {
            return Ok(Some(SplitStop::Residual));
        }
        if let Some((delta, lambda)) = cfg.discrepancy {
            if delta > 0.0
                && crate::regularization::discrepancy_check(res, delta, lambda)?
                    == crate::regularization::Verdict::Stop
            {
                return Ok(Some(SplitStop::Discrepancy));
            }
        }
        Ok(None)
    };

    let order: Vec<Block> = match (cfg.blocks, cfg.first) {
        (Blocks::VolOnly, _) => vec![Block::Vol],
        (Blocks::TailOnly, _) => vec![Block::Tail],
        (Blocks::Both, Block::Vol) => vec![Block::Vol, Block::Tail],
        (Blocks::Both, Block::Tail) => vec![Block::Tail, Block::Vol],
    };

    let inner_opts = |base: &DescentOptions| DescentOptions {
        residual_tol: match (base.residual_tol, cfg.residual_tol) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        },
        discrepancy: base.discrepancy.or(cfg.discrepancy),
        ..*base
    };

    state.stop = done(&state)?;
    while state.stop.is_none() {
        if state.outer_iter >= cfg.outer_max {
            state.stop = Some(SplitStop::OuterMax);
            break;
        }
        state.outer_iter += 1;
        let mut moved = false;
        for &block in &order {
            let run = match block {
                Block::Vol => {
                    let (phi, _) = state.tail.to_phi(&g)?;
                    let c0 = state.vol.as_slice().unwrap_or_default().to_vec();
                    let d = descend(&mut obj.vol_block(&phi), &c0, &inner_opts(&cfg.vol))?;
                    state.vol = Array2::from_shape_vec(obj.lattice.shape(), d.x.clone())
                        .map_err(|e| Error::config(e.to_string()))?;
                    d
                }
                Block::Tail => {
                    let c = state.vol.as_slice().unwrap_or_default().to_vec();
                    let vol_penalty = obj.vol_penalty_value(&c)?;
                    let shape = state.tail.clone();
                    let (lower, upper) = shape.bounds();
                    let opts = DescentOptions {
                        lower,
                        upper,
                        ..inner_opts(&cfg.tail)
                    };
                    let mut tb = TailBlock {
                        obj,
                        vol: &c,
                        shape: &shape,
                        vol_penalty,
                    };
                    let d = descend(&mut tb, &shape.params(), &opts)?;
                    state.tail = shape.with_params(&d.x);
                    d
                }
            };
            moved |= run.iterations > 0;
            state.stalled |= run.stop == StopReason::Stalled;
            let rec = snapshot(obj, &state, state.outer_iter, Some(block), Some(&run))?;
            let prev = state.objective().unwrap_or(f64::INFINITY);
            if rec.objective > prev * (1.0 + 1e-12) + 1e-300 {
                return Err(Error::NumericalBreakdown {
                    step: state.outer_iter,
                    detail: format!("outer objective rose from {prev} to {}", rec.objective),
                });
            }
            emit(&mut progress, &rec)?;
            state.history.push(rec);
            state.stop = done(&state)?;
            if state.stop.is_some() {
                break;
            }
        }
        if state.stop.is_none() && !moved {
            state.stop = Some(SplitStop::Stationary);
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::Observations;
    use crate::grid::MarketParams;
    use crate::levy_tail::tail_from_density;
    use crate::pide::{PideModel, WeightMode};
    use crate::regularization::{Penalty, SobolevWeights};
    use crate::synthetic::{reference_jump_density, prior_jump_density, QuoteLattice};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::symmetric(0.5, 2.0, 0.025, 0.05).unwrap()
    }

    #[test]
    fn constant_and_zero_coefficients() {
        let g = grid();
        let k: f64 = 0.3;
        let t = TailParametrization::LogFourier {
            minus: vec![k.ln(), 0.0, 0.0],
            plus: vec![k.ln(), 0.0, 0.0],
        };
        let (phi, capped) = t.to_phi(&g).unwrap();
        assert!(!capped);
        for (i, v) in phi.phi.iter().enumerate() {
            let expect = if i == g.zero_index() { 0.0 } else { k };
            assert!((v - expect).abs() < 1e-15);
        }
        let zero = t.with_params(&[0.0; 6]);
        let (phi, _) = zero.to_phi(&g).unwrap();
        assert!(phi.phi.iter().enumerate().all(|(i, v)| i == g.zero_index() || *v == 1.0));
    }

    #[test]
    fn cap_is_flagged() {
        let g = grid();
        let t = TailParametrization::LogFourier {
            minus: vec![60.0, 0.0, 0.0],
            plus: vec![0.0, 0.0, 0.0],
        };
        let (phi, capped) = t.to_phi(&g).unwrap();
        assert!(capped);
        assert_eq!(phi.phi[0], LOG_TAIL_CAP.exp());
    }

    #[test]
    fn fit_reproduces_representable_tail() {
        let g = grid();
        let t = TailParametrization::LogFourier {
            minus: vec![-2.0, 0.3, -0.1],
            plus: vec![-3.0, 0.5, 0.2],
        };
        let (phi, _) = t.to_phi(&g).unwrap();
        let fit = TailParametrization::fit_log_fourier(&phi, &g, 3).unwrap();
        for (a, b) in fit.params().iter().zip(t.params()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_tail_fit_error() {
        let g = Grid::symmetric(1.0, 5.0, 0.005, 0.025).unwrap();
        let (nu, _) = reference_jump_density(&g);
        let phi = tail_from_density(&nu, &g).unwrap();
        let fit = TailParametrization::fit_log_fourier(&phi, &g, 3).unwrap();
        let (back, _) = fit.to_phi(&g).unwrap();
        let dist = crate::regularization::normalized_distance(&back.phi, &phi.phi);
        // three cosines cannot follow a log tail that falls like -y^2/2 into
        // the far wings; the fit error is sizeable but bounded
        assert!(dist > 1e-3 && dist < 1.0, "{dist}");
    }

    #[test]
    fn pullback_matches_differences() {
        let g = grid();
        let t = TailParametrization::LogFourier {
            minus: vec![-2.0, 0.3, -0.1],
            plus: vec![-3.0, 0.5, 0.2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Vec<f64> = (0..g.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| -> f64 {
            let (phi, _) = t.with_params(p).to_phi(&g).unwrap();
            phi.phi.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (phi, _) = t.to_phi(&g).unwrap();
        let grad = t.pullback(&g, &phi, &w);
        let p0 = t.params();
        for c in 0..p0.len() {
            let eps = 1e-6;
            let mut hi = p0.clone();
            hi[c] += eps;
            let mut lo = p0.clone();
            lo[c] -= eps;
            let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
            assert!((fd - grad[c]).abs() < 1e-7 * grad[c].abs().max(1.0), "{c}: {fd} {}", grad[c]);
        }
    }

    fn problem(alpha_tail: f64) -> (TikhonovObjective, Array2<f64>, TailFunction) {
        let g = grid();
        let model = PideModel::new(g, MarketParams::default(), WeightMode::Plain);
        let lattice = QuoteLattice::new(1..=5, -8..=4, 0.1, 0.05);
        let truth = lattice.sample(|t, y| 0.03 + 0.2 * y * y - 0.01 * t);
        let (nu, _) = reference_jump_density(&g);
        let phi = tail_from_density(&nu, &g).unwrap();
        let a = lattice.interpolate(&truth, &g).unwrap();
        let u = model.solve(&a, &phi).unwrap();
        let coords = lattice.nodes();
        let prices = coords
            .iter()
            .map(|&(t, y)| u.at(g.level_index(t).unwrap(), g.node_index(y).unwrap()))
            .collect();
        let obs = Observations::from_coords(&coords, prices, &g).unwrap();
        let pen = Penalty::sobolev(Array2::from_elem(lattice.shape(), 0.08), SobolevWeights::default()).unwrap();
        let prior = tail_from_density(&prior_jump_density(&g), &g).unwrap();
        let obj = TikhonovObjective::new(model, obs, lattice, 1e-4, alpha_tail, pen, Some(Penalty::l2(prior.phi))).unwrap();
        (obj, truth, phi)
    }

    #[test]
    fn fixed_point_stops_at_zero() {
        let (obj, truth, phi) = problem(1e-5);
        let init = SplitState::new(truth, TailParametrization::nodal(&phi));
        let out = split_calibrate(&obj, init, &SplitConfig::default(), None).unwrap();
        assert_eq!(out.outer_iter, 0);
        assert_eq!(out.stop, Some(SplitStop::Residual));
        assert!(out.residual().unwrap() < 1e-14);
    }

    #[test]
    fn outer_objective_never_rises() {
        let (obj, _, _) = problem(1e-5);
        let g = obj.model.grid;
        let prior = tail_from_density(&prior_jump_density(&g), &g).unwrap();
        let tail = TailParametrization::fit_log_fourier(&prior, &g, 3).unwrap();
        let init = SplitState::new(Array2::from_elem(obj.lattice.shape(), 0.08), tail);
        let cfg = SplitConfig {
            outer_max: 3,
            residual_tol: Some(1e-4),
            vol: DescentOptions {
                max_iters: 15,
                ..DescentOptions::vol_box()
            },
            tail: DescentOptions {
                max_iters: 15,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut log = Vec::new();
        let out = split_calibrate(&obj, init, &cfg, Some(&mut log)).unwrap();
        let objs: Vec<f64> = out.history.iter().map(|r| r.objective).collect();
        assert!(objs.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert!(objs.last().unwrap() < &objs[0]);
        let lines: Vec<Record> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, out.history);
    }

    #[test]
    fn restart_from_stationary_output() {
        let (obj, truth, phi) = problem(1e-5);
        let cfg = SplitConfig {
            outer_max: 50,
            residual_tol: None,
            blocks: Blocks::VolOnly,
            vol: DescentOptions {
                max_iters: 2000,
                grad_tol: 1e-12,
                ..DescentOptions::vol_box()
            },
            ..Default::default()
        };
        let start = truth.mapv(|v| v * 1.05);
        let out = split_calibrate(&obj, SplitState::new(start, TailParametrization::nodal(&phi)), &cfg, None).unwrap();
        assert_eq!(out.stop, Some(SplitStop::Stationary));
        let again = split_calibrate(&obj, out.clone(), &cfg, None).unwrap();
        assert!((again.objective().unwrap() - out.objective().unwrap()).abs() < 1e-10);
    }
}
