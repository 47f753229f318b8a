//! Adjoint state and gradients of the quote misfit
//! `f(a, phi) = sum_q (u(tau_q, y_q) - p_q)^2`.
//!
//! The discrete mode transposes the forward time stepping exactly, so its
//! gradients are those of the discrete objective. The continuous mode
//! discretizes the backward adjoint equation
//! `-w_tau = (a w)_yy + (a w)_y + r w_y + J* w + source` on its own and
//! recovers gradients by quadrature.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::levy_tail::TailFunction;
use crate::pide::{dot, PideModel};
use crate::surface::{PriceSurface, VolSurface};
use crate::tridiag;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjointMode {
    #[default]
    Discrete,
    Continuous,
}

impl std::str::FromStr for AdjointMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Self::Discrete),
            "continuous" => Ok(Self::Continuous),
            other => Err(Error::Parse(format!("unknown adjoint mode '{other}'"))),
        }
    }
}

/// Adjoint state on the forward grid. In discrete mode row `i` holds the
/// multiplier of forward step `i` and row 0 is zero; in continuous mode it
/// holds the adjoint density at level `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointSurface {
    pub values: Array2<f64>,
    pub mode: AdjointMode,
}

impl AdjointSurface {
    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(i)
    }
}

/// Quoted prices pinned to grid nodes `(level, node)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    nodes: Vec<(usize, usize)>,
    prices: Vec<f64>,
}

fn check_nodes<'a>(nodes: impl Iterator<Item = &'a (usize, usize)>, grid: &Grid) -> Result<()> {
    let mut seen = HashSet::new();
    for &(i, k) in nodes {
        if i == 0 || i > grid.n_steps() {
            return Err(Error::config(format!("quote level {i} outside 1..={}", grid.n_steps())));
        }
        if k == 0 || k + 1 >= grid.n_nodes() {
            return Err(Error::config(format!("quote node {k} is not an interior node")));
        }
        if !seen.insert((i, k)) {
            return Err(Error::config(format!("duplicate quote at node ({i}, {k})")));
        }
    }
    Ok(())
}

impl Observations {
    pub fn new(nodes: Vec<(usize, usize)>, prices: Vec<f64>, grid: &Grid) -> Result<Self> {
        if nodes.len() != prices.len() {
            return Err(Error::config("node and price counts differ"));
        }
        if nodes.is_empty() {
            return Err(Error::config("no observations"));
        }
        check_nodes(nodes.iter(), grid)?;
        Ok(Self { nodes, prices })
    }

    /// Snap `(tau, y)` coordinates to grid nodes.
    pub fn from_coords(coords: &[(f64, f64)], prices: Vec<f64>, grid: &Grid) -> Result<Self> {
        let nodes = coords
            .iter()
            .map(|&(t, y)| Ok((grid.level_index(t)?, grid.node_index(y)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(nodes, prices, grid)
    }

    /// Read model prices at the quote nodes.
    pub fn sample(&self, u: &PriceSurface) -> Vec<f64> {
        self.nodes.iter().map(|&(i, k)| u.at(i, k)).collect()
    }

    pub fn residual(&self, u: &PriceSurface) -> Residual {
        Residual {
            entries: self
                .nodes
                .iter()
                .zip(&self.prices)
                .map(|(&(i, k), p)| (i, k, u.at(i, k) - p))
                .collect(),
        }
    }

    pub fn nodes(&self) -> &[(usize, usize)] {
        &self.nodes
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `model - observed` at each quote node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub entries: Vec<(usize, usize, f64)>,
}

impl Residual {
    pub fn new(entries: Vec<(usize, usize, f64)>, grid: &Grid) -> Result<Self> {
        check_nodes(entries.iter().map(|(i, k, _)| (*i, *k)).collect::<Vec<_>>().iter(), grid)?;
        Ok(Self { entries })
    }

    /// Sum of squared residuals.
    pub fn misfit(&self) -> f64 {
        self.entries.iter().map(|e| e.2 * e.2).sum()
    }

    pub fn norm(&self) -> f64 {
        self.misfit().sqrt()
    }

    /// `2 * residual` scattered onto the grid.
    fn source(&self, grid: &Grid) -> Array2<f64> {
        let mut s = Array2::zeros((grid.n_levels(), grid.n_nodes()));
        for &(i, k, v) in &self.entries {
            s[(i, k)] += 2.0 * v;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub vol: Array2<f64>,
    pub tail: Vec<f64>,
}

/// Misfit, prices and gradient at one parameter point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub misfit: f64,
    pub prices: PriceSurface,
    pub residual: Residual,
    pub gradient: Gradient,
}

impl PideModel {
    /// Backward solve for the adjoint state driven by `residual`.
    pub fn solve_adjoint(
        &self,
        a: &VolSurface,
        phi: &TailFunction,
        residual: &Residual,
        mode: AdjointMode,
    ) -> Result<AdjointSurface> {
        let g = &self.grid;
        if a.0.dim() != (g.n_levels(), g.n_nodes()) || phi.phi.len() != g.n_nodes() {
            return Err(Error::config("adjoint inputs do not match the grid"));
        }
        let source = residual.source(g);
        let values = match mode {
            AdjointMode::Discrete => self.discrete_adjoint(a, phi, &source)?,
            AdjointMode::Continuous => self.continuous_adjoint(a, phi, &source)?,
        };
        Ok(AdjointSurface { values, mode })
    }

    /// `(C^T lam)_m` for the convolution Jacobian, added into `out` at interior nodes.
    fn add_jump_transpose(&self, psi: &[f64], lam: &[f64], e: &mut [f64], out: &mut [f64]) {
        let g = &self.grid;
        let n = g.n_nodes();
        let shift = -g.j_min();
        // e_p = sum_j lam_j psi_{j-p}
        for (p, ep) in e.iter_mut().enumerate() {
            let off = shift - p as i64;
            let lo = (-off).max(0) as usize;
            let hi = ((n as i64) - off).min(n as i64).max(0) as usize;
            *ep = if lo < hi {
                dot(&lam[lo..hi], &psi[(lo as i64 + off) as usize..(hi as i64 + off) as usize])
            } else {
                0.0
            };
        }
        let st = self.stencil();
        for m in 1..n - 1 {
            out[m] += st.plus * e[m - 1] + st.center * e[m] + st.minus * e[m + 1];
        }
    }

    fn discrete_adjoint(&self, a: &VolSurface, phi: &TailFunction, source: &Array2<f64>) -> Result<Array2<f64>> {
        let g = &self.grid;
        let (n, levels) = (g.n_nodes(), g.n_levels());
        let m = n - 2;
        let (eta, beta, r) = (g.eta(), g.beta(), self.market.r);
        let psi = self.kernel(phi);
        let has_jumps = psi.iter().any(|&v| v != 0.0);

        let mut lam = Array2::zeros((levels, n));
        let mut next = vec![0.0; n];
        let mut full = vec![0.0; n];
        let mut e = vec![0.0; n];
        let (mut sub, mut diag, mut sup, mut rhs) =
            (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let (mut x, mut scratch) = (vec![0.0; m], vec![0.0; m]);

        for i in (1..levels).rev() {
            full.iter_mut().for_each(|v| *v = 0.0);
            for k in 1..n - 1 {
                full[k] = source[(i, k)];
            }
            if i + 1 < levels {
                // explicit half of step i + 1, built from level-i coefficients
                let ai = a.0.row(i);
                for k in 1..n - 1 {
                    let mut acc = next[k] * (1.0 - eta * ai[k]);
                    if k + 1 < n - 1 {
                        acc += next[k + 1] * (0.5 * eta * ai[k + 1] + 0.25 * beta * (ai[k + 1] + r));
                    }
                    if k > 1 {
                        acc += next[k - 1] * (0.5 * eta * ai[k - 1] - 0.25 * beta * (ai[k - 1] + r));
                    }
                    full[k] += acc;
                }
                if has_jumps {
                    self.add_jump_transpose(&psi, &next, &mut e, &mut full);
                }
            }
            let ai = a.0.row(i);
            let coef = |t: usize| {
                let an = ai[t + 1];
                (
                    -0.5 * eta * an - 0.25 * beta * (an + r),
                    1.0 + eta * an,
                    -0.5 * eta * an + 0.25 * beta * (an + r),
                )
            };
            for t in 0..m {
                diag[t] = coef(t).1;
                sub[t] = if t > 0 { coef(t - 1).2 } else { 0.0 };
                sup[t] = if t + 1 < m { coef(t + 1).0 } else { 0.0 };
                rhs[t] = full[t + 1];
            }
            tridiag::solve(&sub, &diag, &sup, &rhs, &mut x, &mut scratch).map_err(|(row, p)| {
                Error::NumericalBreakdown {
                    step: i,
                    detail: format!("adjoint pivot {p:e} in row {row}"),
                }
            })?;
            next.iter_mut().for_each(|v| *v = 0.0);
            next[1..n - 1].copy_from_slice(&x);
            lam.row_mut(i).assign(&ndarray::ArrayView1::from(&next[..]));
        }
        Ok(lam)
    }

    fn continuous_adjoint(&self, a: &VolSurface, phi: &TailFunction, source: &Array2<f64>) -> Result<Array2<f64>> {
        let g = &self.grid;
        let (n, levels) = (g.n_nodes(), g.n_levels());
        let m = n - 2;
        let (eta, beta, r) = (g.eta(), g.beta(), self.market.r);
        let scale = 1.0 / g.dy();
        let psi = self.kernel(phi);
        let has_jumps = psi.iter().any(|&v| v != 0.0);

        // dtau/2 L*_a w at node k: coefficients on (w_{k-1}, w_k, w_{k+1})
        let half_op = |ak: &[f64], k: usize| {
            (
                0.5 * eta * ak[k - 1] - 0.25 * beta * (ak[k - 1] + r),
                -eta * ak[k],
                0.5 * eta * ak[k + 1] + 0.25 * beta * (ak[k + 1] + r),
            )
        };

        let mut w = Array2::zeros((levels, n));
        let mut next = vec![0.0; n];
        let mut full = vec![0.0; n];
        let mut e = vec![0.0; n];
        let (mut sub, mut diag, mut sup, mut rhs) =
            (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let (mut x, mut scratch) = (vec![0.0; m], vec![0.0; m]);

        for i in (0..levels).rev() {
            full.iter_mut().for_each(|v| *v = 0.0);
            for k in 1..n - 1 {
                full[k] = source[(i, k)] * scale;
            }
            if i + 1 < levels {
                let an = a.0.row(i + 1);
                let an = an.as_slice().expect("row-major surface");
                for k in 1..n - 1 {
                    let (cm, c0, cp) = half_op(an, k);
                    full[k] += next[k] + cm * next[k - 1] + c0 * next[k] + cp * next[k + 1];
                }
                if has_jumps {
                    self.add_jump_transpose(&psi, &next, &mut e, &mut full);
                }
            }
            let ai = a.0.row(i);
            let ai = ai.as_slice().expect("row-major surface");
            for t in 0..m {
                let (cm, c0, cp) = half_op(ai, t + 1);
                sub[t] = -cm;
                diag[t] = 1.0 - c0;
                sup[t] = -cp;
                rhs[t] = full[t + 1];
            }
            tridiag::solve(&sub, &diag, &sup, &rhs, &mut x, &mut scratch).map_err(|(row, p)| {
                Error::NumericalBreakdown {
                    step: i,
                    detail: format!("adjoint pivot {p:e} in row {row}"),
                }
            })?;
            next.iter_mut().for_each(|v| *v = 0.0);
            next[1..n - 1].copy_from_slice(&x);
            w.row_mut(i).assign(&ndarray::ArrayView1::from(&next[..]));
        }
        Ok(w)
    }

    /// Gradient of the misfit with respect to the local variance at every node.
    pub fn grad_vol(&self, u: &PriceSurface, w: &AdjointSurface) -> Array2<f64> {
        let g = &self.grid;
        let (n, levels) = (g.n_nodes(), g.n_levels());
        let (eta, beta) = (g.eta(), g.beta());
        // the continuous density is piecewise constant in time, taking its
        // value at the top of each step; dy converts density to nodal weight
        let scale = match w.mode {
            AdjointMode::Discrete => 1.0,
            AdjointMode::Continuous => g.dy(),
        };
        let mut grad = Array2::zeros((levels, n));
        for i in 0..levels {
            let row = u.row(i);
            for k in 1..n - 1 {
                let second = row[k + 1] - 2.0 * row[k] + row[k - 1];
                let first = row[k + 1] - row[k - 1];
                let sens = 0.5 * eta * second - 0.25 * beta * first;
                let here = if i > 0 { w.values[(i, k)] } else { 0.0 };
                let above = if i + 1 < levels { w.values[(i + 1, k)] } else { 0.0 };
                grad[(i, k)] = scale * (here + above) * sens;
            }
        }
        grad
    }

    /// Gradient of the misfit with respect to the nodal tail values.
    pub fn grad_tail(&self, u: &PriceSurface, w: &AdjointSurface) -> Vec<f64> {
        let g = &self.grid;
        let (n, levels) = (g.n_nodes(), g.n_levels());
        let mut acc = vec![0.0; n];
        let mut d = Vec::new();
        let mut add = |lam: &[f64], row: &[f64], weight: f64, d: &mut Vec<f64>| {
            self.jump_differences(row, d);
            for (kk, a) in acc.iter_mut().enumerate() {
                *a += weight * dot(lam, &d[n - 1 - kk..2 * n - 1 - kk]);
            }
        };
        match w.mode {
            AdjointMode::Discrete => {
                for i in 1..levels {
                    let lam = w.values.row(i);
                    let prev = u.row(i - 1);
                    add(lam.as_slice().unwrap(), prev.as_slice().unwrap(), 1.0, &mut d);
                }
            }
            AdjointMode::Continuous => {
                // the jump term is explicit in the forward march, so each step
                // sees prices from its bottom and the density from its top
                for i in 1..levels {
                    let lam = w.values.row(i);
                    let prev = u.row(i - 1);
                    add(lam.as_slice().unwrap(), prev.as_slice().unwrap(), g.dy(), &mut d);
                }
            }
        }
        let weights = self.tail_weights();
        let z = g.zero_index();
        acc.iter()
            .zip(&weights)
            .enumerate()
            .map(|(k, (v, wt))| if k == z { 0.0 } else { v * wt })
            .collect()
    }

    /// Forward solve, residual, adjoint and both gradients.
    pub fn evaluate(
        &self,
        a: &VolSurface,
        phi: &TailFunction,
        obs: &Observations,
        mode: AdjointMode,
    ) -> Result<Evaluation> {
        let prices = self.solve(a, phi)?;
        let residual = obs.residual(&prices);
        let w = self.solve_adjoint(a, phi, &residual, mode)?;
        let gradient = Gradient {
            vol: self.grad_vol(&prices, &w),
            tail: self.grad_tail(&prices, &w),
        };
        Ok(Evaluation {
            misfit: residual.misfit(),
            prices,
            residual,
            gradient,
        })
    }

    /// Misfit only.
    pub fn misfit(&self, a: &VolSurface, phi: &TailFunction, obs: &Observations) -> Result<f64> {
        Ok(obs.residual(&self.solve(a, phi)?).misfit())
    }
}

/// Largest relative disagreement between adjoint directional derivatives
/// and central differences over random unit directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub vol: f64,
    pub tail: f64,
    pub directions: usize,
}

/// Smooth test problem on an `n_steps x (2 half_nodes + 1)` grid over
/// `[0, 1] x [-1, 1]`: quotes from one parameter pair, evaluation at another.
pub fn check_problem(n_steps: usize, half_nodes: usize) -> Result<(PideModel, VolSurface, TailFunction, Observations)> {
    let g = Grid::from_counts(1.0, 1.0, n_steps, half_nodes)?;
    let model = PideModel::new(g, crate::grid::MarketParams::default(), crate::pide::WeightMode::Plain);
    let truth = VolSurface::from_fn(&g, |t, y| 0.03 + 0.01 * (2.0 * y).cos() * (-t).exp());
    let (nu, _) = crate::levy_tail::JumpDensity::from_density(&g, |x| 0.3 * (-3.0 * x * x).exp());
    let phi_true = crate::levy_tail::tail_from_density(&nu, &g)?;
    let u = model.solve(&truth, &phi_true)?;
    let n = g.n_nodes();
    let mut nodes = Vec::new();
    for i in (2..=n_steps).step_by(2) {
        for k in (n / 10..n - n / 10).step_by(3) {
            nodes.push((i, k));
        }
    }
    let prices = nodes.iter().map(|&(i, k)| u.at(i, k)).collect();
    let obs = Observations::new(nodes, prices, &g)?;
    let a = VolSurface::from_fn(&g, |t, y| 0.025 + 0.004 * y + 0.002 * t);
    let phi = TailFunction::new(phi_true.phi.iter().map(|v| 0.7 * v).collect(), &g)?;
    Ok((model, a, phi, obs))
}

impl PideModel {
    /// Relative defect of `<L h, 2 r> = <h, L* r>` for the discrete adjoint,
    /// with `L` the forced linear march and a random interior forcing `h`.
    pub fn pairing_defect(&self, a: &VolSurface, phi: &TailFunction, residual: &Residual, seed: u64) -> Result<f64> {
        use rand::{Rng, SeedableRng};
        let g = &self.grid;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = g.n_nodes();
        let h = Array2::from_shape_fn((g.n_levels(), n), |(i, k)| {
            if i == 0 || k == 0 || k == n - 1 {
                0.0
            } else {
                rng.gen_range(-1.0..1.0)
            }
        });
        let lh = self.solve_forced(a, phi, &h)?;
        let lam = self.solve_adjoint(a, phi, residual, AdjointMode::Discrete)?;
        let lhs: f64 = residual.entries.iter().map(|&(i, k, v)| 2.0 * v * lh[(i, k)]).sum();
        let rhs = (&h * &lam.values).sum();
        Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300))
    }

    /// Compare both gradients with central differences of step `eps`.
    pub fn check_gradients(
        &self,
        a: &VolSurface,
        phi: &TailFunction,
        obs: &Observations,
        mode: AdjointMode,
        directions: usize,
        eps: f64,
        seed: u64,
    ) -> Result<GradientCheck> {
        use rand::{Rng, SeedableRng};
        let ev = self.evaluate(a, phi, obs, mode)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = self.grid.zero_index();
        let rel = |an: f64, fd: f64| ((an - fd) / fd).abs();
        let (mut vol, mut tail) = (0.0f64, 0.0f64);
        for _ in 0..directions {
            let mut h = Array2::from_shape_fn(a.0.dim(), |_| rng.gen_range(-1.0..1.0));
            let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            h /= norm;
            let fp = self.misfit(&VolSurface(&a.0 + &(eps * &h)), phi, obs)?;
            let fm = self.misfit(&VolSurface(&a.0 - &(eps * &h)), phi, obs)?;
            vol = vol.max(rel((&ev.gradient.vol * &h).sum(), (fp - fm) / (2.0 * eps)));

            let mut d: Vec<f64> = (0..phi.phi.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            d[z] = 0.0;
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let shift = |s: f64| TailFunction {
                phi: phi.phi.iter().zip(&d).map(|(p, e)| p + s * e).collect(),
            };
            let fp = self.misfit(a, &shift(eps), obs)?;
            let fm = self.misfit(a, &shift(-eps), obs)?;
            let an: f64 = ev.gradient.tail.iter().zip(&d).map(|(g, e)| g * e).sum();
            tail = tail.max(rel(an, (fp - fm) / (2.0 * eps)));
        }
        Ok(GradientCheck { vol, tail, directions })
    }
}
