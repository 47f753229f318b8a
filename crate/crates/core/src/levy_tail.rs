//! Jump measures on the log-moneyness lattice and their double-exponential
//! tails.
//!
//! For a jump measure `nu` the tail is
//!
//! ```text
//! phi(y) = int_{-inf}^{y} (e^y - e^x) nu(dx)   for y < 0
//! phi(y) = int_{y}^{inf}  (e^x - e^y) nu(dx)   for y > 0
//! ```
//!
//! and turns the jump integral of the pricing equation into a convolution
//! with `u_yy - u_y`. On the lattice, `nu_j` is the mass of the cell
//! `[y_j - dy/2, y_j + dy/2]` and the integrals become the sums
//!
//! ```text
//! phi_j = sum_{l <= j} (e^{y_j} - e^{y_l}) nu_l   for y_j < 0
//! phi_j = sum_{l >= j} (e^{y_l} - e^{y_j}) nu_l   for y_j > 0
//! ```
//!
//! with `phi_0 = 0`. The map `nu -> phi` is compact, so recovering `nu` from a
//! calibrated tail is done by Kullback-Leibler regularized least squares
//! rather than by differentiating `phi`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Cell masses of a jump measure; the zero cell carries no mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpDensity {
    pub nu: Vec<f64>,
}

impl JumpDensity {
    pub fn new(nu: Vec<f64>, grid: &Grid) -> Result<Self> {
        if nu.len() != grid.n_nodes() {
            return Err(Error::config(format!(
                "jump density has {} cells, grid has {} nodes",
                nu.len(),
                grid.n_nodes()
            )));
        }
        if let Some((k, v)) = nu.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain(format!("negative or non-finite jump weight {v} at node {k}")));
        }
        if nu[grid.zero_index()] != 0.0 {
            return Err(Error::domain("jump density must carry no mass at y = 0"));
        }
        Ok(Self { nu })
    }

    pub fn zero(grid: &Grid) -> Self {
        Self {
            nu: vec![0.0; grid.n_nodes()],
        }
    }

    /// Integrate a density over each lattice cell with 3-point Simpson.
    ///
    /// Returns the discrete measure and the mass of the excluded zero cell.
    pub fn from_density(grid: &Grid, density: impl Fn(f64) -> f64) -> (Self, f64) {
        let h = grid.dy();
        let mut nu: Vec<f64> = grid
            .ys()
            .into_iter()
            .map(|y| {
                let (a, b) = (y - 0.5 * h, y + 0.5 * h);
                h / 6.0 * (density(a) + 4.0 * density(y) + density(b))
            })
            .collect();
        let center = std::mem::take(&mut nu[grid.zero_index()]);
        (Self { nu }, center)
    }

    /// Total jump intensity.
    pub fn intensity(&self) -> f64 {
        self.nu.iter().sum()
    }

    /// Compensator `sum_j nu_j (e^{y_j} - 1)`.
    pub fn compensator(&self, grid: &Grid) -> f64 {
        self.nu
            .iter()
            .enumerate()
            .map(|(k, &m)| m * (grid.y(k).exp() - 1.0))
            .sum()
    }

    /// `sum_{y_j > 1} nu_j y_j e^{y_j}`, the discrete integrability moment.
    pub fn exp_moment(&self, grid: &Grid) -> f64 {
        self.nu
            .iter()
            .enumerate()
            .filter(|(k, _)| grid.y(*k) > 1.0)
            .map(|(k, &m)| m * grid.y(k) * grid.y(k).exp())
            .sum()
    }
}

/// Nodal double-exponential tail; the zero node is pinned to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFunction {
    pub phi: Vec<f64>,
}

impl TailFunction {
    pub fn new(mut phi: Vec<f64>, grid: &Grid) -> Result<Self> {
        if phi.len() != grid.n_nodes() {
            return Err(Error::config(format!(
                "tail has {} values, grid has {} nodes",
                phi.len(),
                grid.n_nodes()
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("tail values must be finite"));
        }
        phi[grid.zero_index()] = 0.0;
        Ok(Self { phi })
    }

    pub fn zero(grid: &Grid) -> Self {
        Self {
            phi: vec![0.0; grid.n_nodes()],
        }
    }

    /// Largest violation of positivity and of the monotone shape
    /// (nondecreasing towards zero from the left, nonincreasing after it).
    pub fn shape_violation(&self, grid: &Grid) -> f64 {
        let z = grid.zero_index();
        let mut worst = self.phi.iter().fold(0.0f64, |w, &v| w.max(-v));
        for k in 1..z {
            worst = worst.max(self.phi[k - 1] - self.phi[k]);
        }
        for k in z + 2..self.phi.len() {
            worst = worst.max(self.phi[k] - self.phi[k - 1]);
        }
        worst
    }
}

/// Discrete tail of a lattice jump measure.
pub fn tail_from_density(nu: &JumpDensity, grid: &Grid) -> Result<TailFunction> {
    let n = grid.n_nodes();
    if nu.nu.len() != n {
        return Err(Error::config(format!(
            "jump density has {} cells, grid has {} nodes",
            nu.nu.len(),
            n
        )));
    }
    Ok(TailFunction {
        phi: apply_tail(&nu.nu, grid),
    })
}

/// `T nu` for the linear tail map, via running sums.
pub(crate) fn apply_tail(nu: &[f64], grid: &Grid) -> Vec<f64> {
    let n = nu.len();
    let z = grid.zero_index();
    let e: Vec<f64> = (0..n).map(|k| grid.y(k).exp()).collect();
    let mut phi = vec![0.0; n];
    let (mut m0, mut m1) = (0.0, 0.0);
    for k in 0..z {
        m0 += nu[k];
        m1 += e[k] * nu[k];
        phi[k] = e[k] * m0 - m1;
    }
    let (mut m0, mut m1) = (0.0, 0.0);
    for k in (z + 1..n).rev() {
        m0 += nu[k];
        m1 += e[k] * nu[k];
        phi[k] = m1 - e[k] * m0;
    }
    phi
}

/// `T^T r` for the linear tail map.
#[cfg(test)]
fn apply_tail_transpose(r: &[f64], grid: &Grid) -> Vec<f64> {
    let n = r.len();
    let z = grid.zero_index();
    let e: Vec<f64> = (0..n).map(|k| grid.y(k).exp()).collect();
    let mut out = vec![0.0; n];
    // y_l < 0: sum over l <= j < 0 of (e_j - e_l) r_j
    let (mut s0, mut s1) = (0.0, 0.0);
    for k in (0..z).rev() {
        s0 += r[k];
        s1 += e[k] * r[k];
        out[k] = s1 - e[k] * s0;
    }
    // y_l > 0: sum over 0 < j <= l of (e_l - e_j) r_j
    let (mut s0, mut s1) = (0.0, 0.0);
    for k in z + 1..n {
        s0 += r[k];
        s1 += e[k] * r[k];
        out[k] = e[k] * s0 - s1;
    }
    out
}

/// Dense matrix of the tail map.
pub fn tail_matrix(grid: &Grid) -> DMatrix<f64> {
    let n = grid.n_nodes();
    let z = grid.zero_index();
    DMatrix::from_fn(n, n, |j, l| {
        let (yj, yl) = (grid.y(j), grid.y(l));
        match (j.cmp(&z), l.cmp(&z)) {
            (std::cmp::Ordering::Less, std::cmp::Ordering::Less) if l <= j => yj.exp() - yl.exp(),
            (std::cmp::Ordering::Greater, std::cmp::Ordering::Greater) if l >= j => {
                yl.exp() - yj.exp()
            }
            _ => 0.0,
        }
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecoveryOptions {
    pub max_iters: usize,
    /// Stop when the projected gradient norm falls below this value.
    pub grad_tol: f64,
    /// Lower clamp keeping the divergence finite.
    pub floor: f64,
    pub armijo_c: f64,
    pub shrink: f64,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-13,
            floor: 1e-14,
            armijo_c: 1e-4,
            shrink: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recovery {
    pub density: JumpDensity,
    /// `||T nu - phi|| / ||phi||` (absolute when the target vanishes).
    pub residual: f64,
    pub grad_norm: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct KlFit<'a> {
    t: &'a DMatrix<f64>,
    target: &'a DVector<f64>,
    prior: &'a [f64],
    free: &'a [usize],
    alpha: f64,
}

impl KlFit<'_> {
    fn full(&self, x: &[f64], n: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        for (&k, &xi) in self.free.iter().zip(x) {
            v[k] = xi;
        }
        v
    }

    fn value(&self, x: &[f64]) -> f64 {
        let r = self.t * self.full(x, self.t.ncols()) - self.target;
        let kl: f64 = self
            .free
            .iter()
            .zip(x)
            .map(|(&k, &v)| v * (v / self.prior[k]).ln() - (self.prior[k] - v))
            .sum();
        r.norm_squared() + self.alpha * kl
    }

    fn gradient(&self, x: &[f64]) -> (Vec<f64>, DVector<f64>) {
        let r = self.t * self.full(x, self.t.ncols()) - self.target;
        let g = self.t.tr_mul(&r) * 2.0;
        let grad = self
            .free
            .iter()
            .zip(x)
            .map(|(&k, &v)| g[k] + self.alpha * (v / self.prior[k]).ln())
            .collect();
        (grad, r)
    }
}

/// Recover lattice jump masses from a tail by minimizing
/// `||T nu - phi||^2 + alpha * KL(nu | prior)` over `nu >= floor`.
///
/// Solved by projected Newton with Armijo backtracking; the problem is small
/// and dense, and the tail map is too ill-conditioned for plain gradient steps.
pub fn recover_density(
    phi_target: &TailFunction,
    nu_prior: &JumpDensity,
    alpha: f64,
    grid: &Grid,
    opts: &RecoveryOptions,
) -> Result<Recovery> {
    let n = grid.n_nodes();
    if phi_target.phi.len() != n || nu_prior.nu.len() != n {
        return Err(Error::config("tail, prior and grid sizes disagree"));
    }
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("regularization weight must be positive, got {alpha}")));
    }
    let z = grid.zero_index();
    if let Some(k) = (0..n).find(|&k| k != z && !(nu_prior.nu[k] > 0.0)) {
        return Err(Error::domain(format!(
            "prior must be strictly positive off zero, got {} at node {k}",
            nu_prior.nu[k]
        )));
    }

    let t = tail_matrix(grid);
    let mut target = DVector::from_column_slice(&phi_target.phi);
    target[z] = 0.0;
    let free: Vec<usize> = (0..n).filter(|&k| k != z).collect();
    let fit = KlFit {
        t: &t,
        target: &target,
        prior: &nu_prior.nu,
        free: &free,
        alpha,
    };
    let tt = t.tr_mul(&t);
    let floor = opts.floor;

    let mut x: Vec<f64> = free.iter().map(|&k| nu_prior.nu[k].max(floor)).collect();
    let mut f = fit.value(&x);
    let mut best = (f, x.clone());
    let mut converged = false;
    let mut iterations = 0;
    let mut pg_norm = f64::INFINITY;

    for it in 0..opts.max_iters {
        iterations = it;
        let (g, _) = fit.gradient(&x);
        // Variables pinned at the floor with an outward gradient stay fixed.
        let eps = (floor * 10.0).max(1e-300);
        let active: Vec<bool> = x.iter().zip(&g).map(|(&v, &gi)| v <= floor + eps && gi > 0.0).collect();
        pg_norm = g
            .iter()
            .zip(&active)
            .map(|(gi, &a)| if a { 0.0 } else { gi * gi })
            .sum::<f64>()
            .sqrt();
        if pg_norm <= opts.grad_tol {
            converged = true;
            break;
        }

        let idx: Vec<usize> = (0..x.len()).filter(|&i| !active[i]).collect();
        let m = idx.len();
        let mut h = DMatrix::zeros(m, m);
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                h[(a, b)] = 2.0 * tt[(free[ia], free[ib])];
            }
            h[(a, a)] += alpha / x[ia];
        }
        let rhs = DVector::from_iterator(m, idx.iter().map(|&i| -g[i]));
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                // fall back to a lightly damped system
                let damp = 1e-12 * h.diagonal().max();
                let mut hd = h;
                for d in 0..m {
                    hd[(d, d)] += damp;
                }
                match hd.cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => rhs.clone(),
                }
            }
        };
        let mut dir = vec![0.0; x.len()];
        for (a, &i) in idx.iter().enumerate() {
            dir[i] = step[a];
        }

        let mut t_step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x
                .iter()
                .zip(&dir)
                .map(|(&v, &d)| (v + t_step * d).max(floor))
                .collect();
            let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            let ft = fit.value(&trial);
            if ft <= f + opts.armijo_c * decrease.min(0.0) && ft.is_finite() {
                let rel = (f - ft).abs() / f.abs().max(f64::MIN_POSITIVE);
                x = trial;
                f = ft;
                accepted = true;
                if rel < 1e-15 {
                    converged = true;
                }
                break;
            }
            t_step *= opts.shrink;
        }
        if f < best.0 {
            best = (f, x.clone());
        }
        if !accepted || converged {
            converged = converged || pg_norm <= opts.grad_tol;
            break;
        }
    }

    let (objective, x) = best;
    let nu = fit.full(&x, n);
    let r = &t * &nu - &target;
    let scale = target.norm();
    let residual = if scale > 0.0 { r.norm() / scale } else { r.norm() };
    Ok(Recovery {
        density: JumpDensity {
            nu: nu.iter().copied().collect(),
        },
        residual,
        grad_norm: pg_norm,
        objective,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid() -> Grid {
        Grid::symmetric(1.0, 5.0, 0.005, 0.025).unwrap()
    }

    fn gaussian(x: f64) -> f64 {
        0.1 / (2.0 * std::f64::consts::PI).sqrt() * (-0.5 * x * x).exp()
    }

    #[test]
    fn zero_measure_has_zero_tail() {
        let g = grid();
        let phi = tail_from_density(&JumpDensity::zero(&g), &g).unwrap();
        assert!(phi.phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_tail() {
        let g = grid();
        let mut nu = vec![0.0; g.n_nodes()];
        let l = g.node_index(0.5).unwrap();
        let m = 0.3;
        nu[l] = m;
        let phi = tail_from_density(&JumpDensity::new(nu, &g).unwrap(), &g).unwrap();
        for k in 0..g.n_nodes() {
            let y = g.y(k);
            let expected = if y > 0.0 && y <= 0.5 + 1e-12 {
                m * (0.5f64.exp() - y.exp())
            } else {
                0.0
            };
            assert_relative_eq!(phi.phi[k], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let g = grid();
        let nu = JumpDensity { nu: vec![0.0; 3] };
        assert!(matches!(tail_from_density(&nu, &g), Err(Error::Config(_))));
        assert!(JumpDensity::new(vec![0.0; 3], &g).is_err());
    }

    #[test]
    fn dense_matrix_matches_fast_path() {
        let g = Grid::symmetric(1.0, 1.0, 0.1, 0.1).unwrap();
        let (nu, _) = JumpDensity::from_density(&g, gaussian);
        let t = tail_matrix(&g);
        let dense = &t * DVector::from_column_slice(&nu.nu);
        let fast = apply_tail(&nu.nu, &g);
        for k in 0..g.n_nodes() {
            assert_relative_eq!(dense[k], fast[k], epsilon = 1e-15);
        }
        let r: Vec<f64> = (0..g.n_nodes()).map(|k| (k as f64 * 0.7).sin()).collect();
        let dense_t = t.tr_mul(&DVector::from_column_slice(&r));
        let fast_t = apply_tail_transpose(&r, &g);
        for k in 0..g.n_nodes() {
            assert_relative_eq!(dense_t[k], fast_t[k], epsilon = 1e-13);
        }
    }

    #[test]
    fn recover_rejects_bad_prior() {
        let g = Grid::symmetric(1.0, 1.0, 0.1, 0.1).unwrap();
        let phi = TailFunction::zero(&g);
        let prior = JumpDensity::zero(&g);
        assert!(matches!(
            recover_density(&phi, &prior, 1e-5, &g, &RecoveryOptions::default()),
            Err(Error::Domain(_))
        ));
        let (prior, _) = JumpDensity::from_density(&g, gaussian);
        assert!(recover_density(&phi, &prior, 0.0, &g, &RecoveryOptions::default()).is_err());
    }

    proptest! {
        #[test]
        fn tail_is_linear(a in proptest::collection::vec(0.0f64..1e-2, 41),
                          b in proptest::collection::vec(0.0f64..1e-2, 41)) {
            let g = Grid::symmetric(1.0, 2.0, 0.1, 0.1).unwrap();
            let mut a = a; let mut b = b;
            a[20] = 0.0; b[20] = 0.0;
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let ta = apply_tail(&a, &g);
            let tb = apply_tail(&b, &g);
            let ts = apply_tail(&sum, &g);
            for k in 0..41 {
                prop_assert!((ts[k] - ta[k] - tb[k]).abs() <= 1e-12);
            }
        }

        #[test]
        fn tail_shape_holds_for_nonnegative_measures(a in proptest::collection::vec(0.0f64..1.0, 81)) {
            let g = Grid::symmetric(1.0, 4.0, 0.1, 0.1).unwrap();
            let mut a = a;
            a[g.zero_index()] = 0.0;
            let phi = tail_from_density(&JumpDensity::new(a, &g).unwrap(), &g).unwrap();
            prop_assert!(phi.shape_violation(&g) <= 1e-12);
        }
    }
}
