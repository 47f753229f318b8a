//! Closed-form and transform pricers used as oracles.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grid::{payoff, Grid};
use crate::levy_tail::JumpDensity;
use crate::surface::VolSurface;

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Black-Scholes call with spot 1 and strike `e^y`.
pub fn bs_price(y: f64, tau: f64, sigma: f64, r: f64) -> f64 {
    if tau <= 0.0 {
        return payoff(y);
    }
    let sd = sigma * tau.sqrt();
    if sd <= 0.0 {
        return (1.0 - (y - r * tau).exp()).max(0.0);
    }
    let d1 = (-y + r * tau) / sd + 0.5 * sd;
    let d2 = d1 - sd;
    norm_cdf(d1) - (y - r * tau).exp() * norm_cdf(d2)
}

fn bs_vega(y: f64, tau: f64, sigma: f64, r: f64) -> f64 {
    let sd = sigma * tau.sqrt();
    let d1 = (-y + r * tau) / sd + 0.5 * sd;
    norm_pdf(d1) * tau.sqrt()
}

/// No-arbitrage band `(max(0, 1 - e^{y - r tau}), 1)` for a normalized call.
pub fn call_bounds(y: f64, tau: f64, r: f64) -> (f64, f64) {
    ((1.0 - (y - r * tau).exp()).max(0.0), 1.0)
}

const VOL_LO: f64 = 1e-6;
const VOL_HI: f64 = 5.0;

/// Black-Scholes implied volatility by bisection followed by Newton polish.
pub fn implied_vol(price: f64, y: f64, tau: f64, r: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("maturity must be positive, got {tau}")));
    }
    let (lo_bound, hi_bound) = call_bounds(y, tau, r);
    if !(price > lo_bound) {
        return Err(Error::OutOfRange {
            price,
            bound: "intrinsic value",
        });
    }
    if !(price < hi_bound) {
        return Err(Error::OutOfRange {
            price,
            bound: "spot",
        });
    }
    let (mut lo, mut hi) = (VOL_LO, VOL_HI);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if bs_price(y, tau, mid, r) < price {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut sigma = 0.5 * (lo + hi);
    for _ in 0..3 {
        let vega = bs_vega(y, tau, sigma, r);
        if vega < 1e-300 {
            break;
        }
        let next = sigma - (bs_price(y, tau, sigma, r) - price) / vega;
        if !(VOL_LO..=VOL_HI).contains(&next) {
            break;
        }
        sigma = next;
    }
    Ok(sigma)
}

/// Implied vols on a rectangular set of maturities and log-moneyness values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpliedVolSurface {
    pub taus: Vec<f64>,
    pub ys: Vec<f64>,
    /// `vols[(i, k)]` belongs to `taus[i]`, `ys[k]`.
    pub vols: Array2<f64>,
}

impl ImpliedVolSurface {
    /// Invert `price(tau, y)` at every node.
    pub fn from_prices(
        taus: &[f64],
        ys: &[f64],
        r: f64,
        mut price: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut vols = Array2::zeros((taus.len(), ys.len()));
        for (i, &t) in taus.iter().enumerate() {
            for (k, &y) in ys.iter().enumerate() {
                vols[(i, k)] = implied_vol(price(i, k), y, t, r)?;
            }
        }
        Ok(Self {
            taus: taus.to_vec(),
            ys: ys.to_vec(),
            vols,
        })
    }
}

/// Elementwise error statistics of `model` against `reference`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `||model - reference|| / ||reference||`.
    pub normalized_distance: f64,
    pub mean_abs_rel: f64,
    pub std_abs_rel: f64,
    pub max_abs_rel: f64,
    pub count: usize,
}

pub fn compare(model: &[f64], reference: &[f64]) -> Result<Comparison> {
    if model.len() != reference.len() || model.is_empty() {
        return Err(Error::config("comparison needs two equal, nonempty vectors"));
    }
    let n = model.len() as f64;
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    let rel: Vec<f64> = model
        .iter()
        .zip(reference)
        .map(|(m, r)| {
            diff2 += (m - r).powi(2);
            ref2 += r * r;
            ((m - r) / r).abs()
        })
        .collect();
    let mean = rel.iter().sum::<f64>() / n;
    let var = rel.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(Comparison {
        normalized_distance: (diff2 / ref2).sqrt(),
        mean_abs_rel: mean,
        std_abs_rel: var.sqrt(),
        max_abs_rel: rel.iter().cloned().fold(0.0, f64::max),
        count: rel.len(),
    })
}

/// The single volatility of a constant surface, or an unsupported-configuration error.
pub fn constant_sigma(a: &VolSurface) -> Result<f64> {
    let first = *a
        .0
        .iter()
        .next()
        .ok_or_else(|| Error::config("empty vol surface"))?;
    if a.0.iter().any(|&v| (v - first).abs() > 1e-14 * first.abs().max(1.0)) {
        return Err(Error::Unsupported(
            "Fourier pricing requires a constant volatility".into(),
        ));
    }
    Ok((2.0 * first).sqrt())
}

/// Damping values tried in order by [`carr_madan_price`].
pub const DAMPING_FALLBACKS: [f64; 3] = [0.25, 0.5, 1.5];

/// Lattice jump-diffusion exponent, martingale-corrected.
struct Exponent {
    sigma: f64,
    r: f64,
    jumps: Vec<(f64, f64)>,
    compensator: f64,
}

impl Exponent {
    fn new(sigma: f64, nu: &JumpDensity, grid: &Grid, r: f64) -> Self {
        let jumps: Vec<(f64, f64)> = nu
            .nu
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(k, &w)| (grid.y(k), w))
            .collect();
        let compensator = jumps.iter().map(|(y, w)| w * (y.exp() - 1.0)).sum();
        Self {
            sigma,
            r,
            jumps,
            compensator,
        }
    }

    /// `ln E[e^{i z X_1}]` for complex `z`.
    fn eval(&self, z: Complex64) -> Complex64 {
        let i = Complex64::i();
        let s2 = self.sigma * self.sigma;
        let mut jump = Complex64::new(0.0, 0.0);
        for &(y, w) in &self.jumps {
            jump += w * ((i * z * y).exp() - 1.0);
        }
        i * z * (self.r - 0.5 * s2 - self.compensator) - 0.5 * s2 * z * z + jump
    }
}

/// Trapezoidal sum of the damped-call integrand on `[0, xi_max]` with step `h`,
/// returning normalized prices at each `y`.
fn damped_sum(
    exponent: &Exponent,
    tau: f64,
    ys: &[f64],
    damping: f64,
    h: f64,
    xi_max: f64,
) -> Vec<f64> {
    let i = Complex64::i();
    let n = (xi_max / h).ceil() as usize;
    let disc = (-exponent.r * tau).exp();
    let mut acc = vec![0.0; ys.len()];
    for m in 0..=n {
        let xi = m as f64 * h;
        let z = Complex64::new(xi, -(damping + 1.0));
        let cf = (tau * exponent.eval(z)).exp();
        let denom = Complex64::new(damping * damping + damping - xi * xi, (2.0 * damping + 1.0) * xi);
        let psi = disc * cf / denom;
        let weight = if m == 0 || m == n { 0.5 } else { 1.0 };
        for (a, &y) in acc.iter_mut().zip(ys) {
            *a += weight * (psi * (-i * xi * y).exp()).re;
        }
    }
    ys.iter()
        .zip(acc)
        .map(|(&y, s)| (-damping * y).exp() / std::f64::consts::PI * s * h)
        .collect()
}

/// Frequency cutoff where the Gaussian factor of the integrand is negligible.
fn initial_cutoff(sigma: f64, tau: f64) -> f64 {
    let var = (sigma * sigma * tau).max(1e-6);
    (2.0 * 40.0 / var).sqrt().clamp(50.0, 5000.0)
}

fn plausible(prices: &[f64], ys: &[f64], tau: f64, r: f64) -> bool {
    prices.iter().zip(ys).all(|(&p, &y)| {
        let (lo, hi) = call_bounds(y, tau, r);
        p.is_finite() && p >= lo - 1e-8 && p <= hi + 1e-8
    })
}

/// Prices under constant vol `sigma` and lattice jump measure `nu` by the
/// damped Fourier representation of the call. The frequency grid is refined
/// until successive results differ by less than `1e-8`.
pub fn carr_madan_price(
    sigma: f64,
    nu: &JumpDensity,
    grid: &Grid,
    tau: f64,
    ys: &[f64],
    r: f64,
    damping: f64,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !(tau > 0.0) {
        return Err(Error::domain("Fourier pricing needs sigma > 0 and tau > 0"));
    }
    if nu.nu.len() != grid.n_nodes() {
        return Err(Error::config("jump density does not match grid"));
    }
    let exponent = Exponent::new(sigma, nu, grid, r);
    let mut last_err = None;
    for alpha in std::iter::once(damping).chain(DAMPING_FALLBACKS.iter().copied().filter(|&d| d != damping)) {
        match refine(&exponent, tau, ys, alpha) {
            Some(p) if plausible(&p, ys, tau, r) => return Ok(p),
            Some(_) => last_err = Some(format!("damping {alpha} gave prices outside arbitrage bounds")),
            None => last_err = Some(format!("damping {alpha} did not converge")),
        }
    }
    Err(Error::NumericalBreakdown {
        step: 0,
        detail: last_err.unwrap_or_default(),
    })
}

fn refine(exponent: &Exponent, tau: f64, ys: &[f64], damping: f64) -> Option<Vec<f64>> {
    let mut h = 0.05;
    let mut xi_max = initial_cutoff(exponent.sigma, tau);
    let mut prev = damped_sum(exponent, tau, ys, damping, h, xi_max);
    for _ in 0..6 {
        h *= 0.5;
        xi_max *= 2.0;
        let next = damped_sum(exponent, tau, ys, damping, h, xi_max);
        if next.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let change = next
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prev = next;
        if change < 1e-8 {
            return Some(prev);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deep_in_the_money_limit() {
        assert!((bs_price(-5.0, 1.0, 0.15, 0.0) - (1.0 - (-5.0f64).exp())).abs() < 1e-6);
    }

    #[test]
    fn at_the_money_closed_form() {
        // 2 N(0.075) - 1 by a series independent of erfc
        let x: f64 = 0.075;
        let mut series = 0.0;
        let mut term = x;
        for n in 0..20 {
            series += term / (2 * n + 1) as f64;
            term *= -x * x / (2.0 * (n + 1) as f64);
        }
        let expected = 2.0 * series / (2.0 * std::f64::consts::PI).sqrt();
        assert!((bs_price(0.0, 1.0, 0.15, 0.0) - expected).abs() < 1e-14);
        assert!((expected - 0.059780).abs() < 1e-5);
    }

    #[test]
    fn zero_maturity_is_payoff() {
        assert_eq!(bs_price(-0.3, 0.0, 0.2, 0.0), payoff(-0.3));
    }

    #[test]
    fn implied_vol_rejects_bounds() {
        let lo = call_bounds(-0.2, 1.0, 0.0).0;
        assert!(matches!(
            implied_vol(lo, -0.2, 1.0, 0.0),
            Err(Error::OutOfRange { bound: "intrinsic value", .. })
        ));
        assert!(matches!(
            implied_vol(1.0, -0.2, 1.0, 0.0),
            Err(Error::OutOfRange { bound: "spot", .. })
        ));
    }

    #[test]
    fn comparison_stats() {
        let c = compare(&[1.1, 2.0], &[1.0, 2.0]).unwrap();
        assert!((c.normalized_distance - 0.1 / 5f64.sqrt()).abs() < 1e-15);
        assert!((c.mean_abs_rel - 0.05).abs() < 1e-12);
        assert!((c.std_abs_rel - 0.05).abs() < 1e-12);
        assert!((c.max_abs_rel - 0.1).abs() < 1e-12);
    }

    #[test]
    fn non_constant_vol_is_unsupported() {
        let g = Grid::symmetric(1.0, 1.0, 0.1, 0.1).unwrap();
        let a = VolSurface::from_fn(&g, |t, _| 0.01 + t);
        assert!(matches!(constant_sigma(&a), Err(Error::Unsupported(_))));
        let c = VolSurface::constant(&g, 0.0113);
        assert!((constant_sigma(&c).unwrap() - 0.0226f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fourier_without_jumps_is_black_scholes() {
        let g = Grid::symmetric(1.0, 5.0, 0.005, 0.025).unwrap();
        let nu = JumpDensity::zero(&g);
        let ys: Vec<f64> = (-10..=10).map(|k| 0.05 * k as f64).collect();
        for &(tau, r) in &[(0.1, 0.0), (1.0, 0.0), (0.5, 0.03)] {
            let p = carr_madan_price(0.15, &nu, &g, tau, &ys, r, 0.75).unwrap();
            for (&y, &v) in ys.iter().zip(&p) {
                assert!((v - bs_price(y, tau, 0.15, r)).abs() < 1e-8, "tau {tau} y {y}");
            }
        }
    }

    #[test]
    fn fourier_with_jumps_respects_parity_bound() {
        let g = Grid::symmetric(1.0, 5.0, 0.005, 0.025).unwrap();
        let (nu, _) = JumpDensity::from_density(&g, |x| {
            0.1 / (2.0 * std::f64::consts::PI).sqrt() * (-0.5 * x * x).exp()
        });
        let ys: Vec<f64> = (-10..=10).map(|k| 0.05 * k as f64).collect();
        let p = carr_madan_price(0.15, &nu, &g, 0.3, &ys, 0.02, 0.75).unwrap();
        for (&y, &v) in ys.iter().zip(&p) {
            assert!(v - (1.0 - (y - 0.02 * 0.3f64).exp()) >= -1e-8);
        }
    }

    proptest! {
        #[test]
        fn implied_vol_round_trip(sigma in 0.05f64..1.0, y in -1.0f64..1.0, tau in 0.05f64..2.0) {
            let p = bs_price(y, tau, sigma, 0.0);
            prop_assume!(p > call_bounds(y, tau, 0.0).0 + 1e-12);
            let s = implied_vol(p, y, tau, 0.0).unwrap();
            prop_assert!((bs_price(y, tau, s, 0.0) - p).abs() < 1e-10);
            prop_assert!((s - sigma).abs() < 1e-10 || bs_vega(y, tau, sigma, 0.0) < 1e-6);
        }
    }
}
