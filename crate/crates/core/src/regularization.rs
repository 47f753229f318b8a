//! Tikhonov objective: quote misfit plus convex penalties, a projected
//! gradient descent for one parameter block, and the discrepancy test.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adjoint::{AdjointMode, Observations};
use crate::error::{Error, Result};
use crate::levy_tail::TailFunction;
use crate::pide::PideModel;
use crate::surface::PriceSurface;
use crate::synthetic::QuoteLattice;

/// `sum_q (u_q - p_q)^2`.
pub fn misfit(u: &PriceSurface, obs: &Observations) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::domain("misfit needs at least one quote"));
    }
    Ok(obs.residual(u).misfit())
}

/// `||u - p|| / ||p||`.
pub fn normalized_residual(u: &PriceSurface, obs: &Observations) -> Result<f64> {
    let m = misfit(u, obs)?;
    Ok(m.sqrt() / data_norm(obs)?)
}

pub fn data_norm(obs: &Observations) -> Result<f64> {
    let n = obs.prices().iter().map(|p| p * p).sum::<f64>().sqrt();
    if n > 0.0 {
        Ok(n)
    } else {
        Err(Error::domain("quote prices are all zero"))
    }
}

/// `||x - truth|| / ||truth||`.
pub fn normalized_distance(x: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Weights of `||x - x0||^2 + w_tau ||D_tau x||^2 + w_y ||D_y x||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SobolevWeights {
    pub level: f64,
    pub tau: f64,
    pub y: f64,
}

impl Default for SobolevWeights {
    fn default() -> Self {
        Self {
            level: 1.0,
            tau: 1.0,
            y: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Penalty {
    /// Forward differences on a rectangular array stored row-major,
    /// maturities along rows.
    SobolevVol {
        weights: SobolevWeights,
        prior: Array2<f64>,
    },
    KlTail {
        prior: Vec<f64>,
    },
    L2Tail {
        prior: Vec<f64>,
    },
}

impl Penalty {
    pub fn sobolev(prior: Array2<f64>, weights: SobolevWeights) -> Result<Self> {
        if weights.level < 0.0 || weights.tau < 0.0 || weights.y < 0.0 {
            return Err(Error::config("penalty weights must be nonnegative"));
        }
        Ok(Self::SobolevVol { weights, prior })
    }

    pub fn kl(prior: Vec<f64>) -> Result<Self> {
        if prior.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::domain("KL prior must be nonnegative and finite"));
        }
        Ok(Self::KlTail { prior })
    }

    pub fn l2(prior: Vec<f64>) -> Self {
        Self::L2Tail { prior }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::SobolevVol { prior, .. } => prior.len(),
            Self::KlTail { prior } | Self::L2Tail { prior } => prior.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.len() {
            return Err(Error::config(format!(
                "penalty expects {} values, got {}",
                self.len(),
                x.len()
            )));
        }
        match self {
            Self::SobolevVol { weights, prior } => Ok(sobolev(x, prior, weights)),
            Self::KlTail { prior } => kl(x, prior),
            Self::L2Tail { prior } => {
                let mut value = 0.0;
                let grad = x
                    .iter()
                    .zip(prior)
                    .map(|(a, b)| {
                        value += (a - b).powi(2);
                        2.0 * (a - b)
                    })
                    .collect();
                Ok((value, grad))
            }
        }
    }
}

fn sobolev(x: &[f64], prior: &Array2<f64>, w: &SobolevWeights) -> (f64, Vec<f64>) {
    let (rows, cols) = prior.dim();
    let at = |i: usize, k: usize| i * cols + k;
    let mut value = 0.0;
    let mut grad = vec![0.0; x.len()];
    for (idx, (xv, pv)) in x.iter().zip(prior.iter()).enumerate() {
        let d = xv - pv;
        value += w.level * d * d;
        grad[idx] += 2.0 * w.level * d;
    }
    for i in 0..rows {
        for k in 0..cols {
            if i + 1 < rows {
                let d = x[at(i + 1, k)] - x[at(i, k)];
                value += w.tau * d * d;
                grad[at(i + 1, k)] += 2.0 * w.tau * d;
                grad[at(i, k)] -= 2.0 * w.tau * d;
            }
            if k + 1 < cols {
                let d = x[at(i, k + 1)] - x[at(i, k)];
                value += w.y * d * d;
                grad[at(i, k + 1)] += 2.0 * w.y * d;
                grad[at(i, k)] -= 2.0 * w.y * d;
            }
        }
    }
    (value, grad)
}

fn kl(x: &[f64], prior: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; x.len()];
    for (k, (&v, &p)) in x.iter().zip(prior).enumerate() {
        if p == 0.0 {
            if v != 0.0 {
                return Err(Error::domain(format!("KL argument nonzero off the prior support at {k}")));
            }
            continue;
        }
        if !(v > 0.0) {
            return Err(Error::domain(format!("KL argument must be positive, got {v} at {k}")));
        }
        let l = (v / p).ln();
        value += v * l + p - v;
        grad[k] = l;
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Continue,
    Stop,
}

/// Stop once the residual drops below `lambda * delta`. Residual and noise
/// level must be measured in the same norm.
pub fn discrepancy_check(residual_norm: f64, delta: f64, lambda: f64) -> Result<Verdict> {
    if !(delta >= 0.0) {
        return Err(Error::domain(format!("noise level must be nonnegative, got {delta}")));
    }
    if !(lambda > 1.0) {
        return Err(Error::domain(format!("discrepancy factor must exceed 1, got {lambda}")));
    }
    Ok(if residual_norm < lambda * delta {
        Verdict::Stop
    } else {
        Verdict::Continue
    })
}

/// Objective value, gradient and normalized data residual at a point.
#[derive(Debug, Clone)]
pub struct Point {
    pub value: f64,
    pub grad: Vec<f64>,
    pub residual: f64,
}

pub trait Objective {
    fn evaluate(&mut self, x: &[f64]) -> Result<Point>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Stop when the normalized residual falls below this.
    pub residual_tol: Option<f64>,
    /// Relative noise level and factor for the discrepancy test.
    pub discrepancy: Option<(f64, f64)>,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    pub lower: f64,
    pub upper: f64,
    /// First trial step; defaults to one that moves the largest entry by 1%.
    pub initial_step: Option<f64>,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-8,
            residual_tol: None,
            discrepancy: None,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_backtracks: 50,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            initial_step: None,
        }
    }
}

impl DescentOptions {
    pub fn vol_box() -> Self {
        Self {
            lower: 0.005,
            upper: 0.125,
            ..Self::default()
        }
    }

    fn project(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Residual,
    Discrepancy,
    Gradient,
    MaxIters,
    Stalled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Descent {
    pub x: Vec<f64>,
    pub value: f64,
    pub residual: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
    /// Objective after each accepted step, starting with the initial point.
    pub values: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projected gradient descent with Barzilai-Borwein trial steps and Armijo
/// backtracking.
pub fn descend(obj: &mut impl Objective, x0: &[f64], opts: &DescentOptions) -> Result<Descent> {
    let mut x: Vec<f64> = x0.iter().map(|&v| opts.project(v)).collect();
    let mut pt = obj.evaluate(&x)?;
    let mut evaluations = 1;
    let mut values = vec![pt.value];
    let projected_grad = |x: &[f64], g: &[f64]| -> f64 {
        norm(&x.iter().zip(g).map(|(&xv, &gv)| xv - opts.project(xv - gv)).collect::<Vec<_>>())
    };
    let mut step = opts.initial_step.unwrap_or_else(|| {
        let gmax = pt.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
        if gmax > 0.0 {
            0.01 * xmax / gmax
        } else {
            1.0
        }
    });
    let mut iterations = 0;
    let stop = loop {
        if opts.residual_tol.is_some_and(|tol| pt.residual < tol) {
            break StopReason::Residual;
        }
        if let Some((delta, lambda)) = opts.discrepancy {
            if delta > 0.0 && discrepancy_check(pt.residual, delta, lambda)? == Verdict::Stop {
                break StopReason::Discrepancy;
            }
        }
        if projected_grad(&x, &pt.grad) < opts.grad_tol {
            break StopReason::Gradient;
        }
        if iterations >= opts.max_iters {
            break StopReason::MaxIters;
        }
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&pt.grad).map(|(&v, &g)| opts.project(v - step * g)).collect();
            let decrease: f64 = trial.iter().zip(&x).zip(&pt.grad).map(|((t, v), g)| g * (t - v)).sum();
            if decrease == 0.0 {
                break;
            }
            let next = obj.evaluate(&trial)?;
            evaluations += 1;
            if next.value.is_finite() && next.value <= pt.value + opts.armijo_c * decrease {
                accepted = Some((trial, next));
                break;
            }
            step *= opts.shrink;
        }
        let Some((trial, next)) = accepted else {
            break StopReason::Stalled;
        };
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(next.grad.iter().zip(&pt.grad)).map(|(s, (g1, g0))| s * (g1 - g0)).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        step = if sy > 0.0 { ss / sy } else { 2.0 * step };
        x = trial;
        pt = next;
        values.push(pt.value);
        iterations += 1;
    };
    Ok(Descent {
        grad_norm: projected_grad(&x, &pt.grad),
        x,
        value: pt.value,
        residual: pt.residual,
        iterations,
        evaluations,
        stop,
        values,
    })
}

/// Quote misfit plus weighted penalties on the two parameter blocks. The
/// volatility is parametrized by its values on a quote lattice and extended
/// to the pricing grid by [`QuoteLattice::interpolate`].
#[derive(Debug, Clone)]
pub struct TikhonovObjective {
    pub model: PideModel,
    pub obs: Observations,
    pub lattice: QuoteLattice,
    pub alpha_vol: f64,
    pub alpha_tail: f64,
    pub vol_penalty: Penalty,
    pub tail_penalty: Option<Penalty>,
    pub mode: AdjointMode,
    data_norm: f64,
}

impl TikhonovObjective {
    pub fn new(
        model: PideModel,
        obs: Observations,
        lattice: QuoteLattice,
        alpha_vol: f64,
        alpha_tail: f64,
        vol_penalty: Penalty,
        tail_penalty: Option<Penalty>,
    ) -> Result<Self> {
        if !(alpha_vol >= 0.0) || !(alpha_tail >= 0.0) {
            return Err(Error::config("regularization weights must be nonnegative"));
        }
        if vol_penalty.len() != lattice.len() {
            return Err(Error::config(format!(
                "vol penalty has {} values, lattice has {}",
                vol_penalty.len(),
                lattice.len()
            )));
        }
        if let Some(p) = &tail_penalty {
            if p.len() != model.grid.n_nodes() {
                return Err(Error::config("tail penalty does not match the grid"));
            }
        }
        let data_norm = data_norm(&obs)?;
        Ok(Self {
            model,
            obs,
            lattice,
            alpha_vol,
            alpha_tail,
            vol_penalty,
            tail_penalty,
            mode: AdjointMode::Discrete,
            data_norm,
        })
    }

    pub fn data_norm(&self) -> f64 {
        self.data_norm
    }

    fn coarse(&self, c: &[f64]) -> Result<Array2<f64>> {
        Array2::from_shape_vec(self.lattice.shape(), c.to_vec()).map_err(|e| Error::config(e.to_string()))
    }

    pub fn vol_penalty_value(&self, c: &[f64]) -> Result<f64> {
        Ok(self.vol_penalty.value_and_grad(c)?.0)
    }

    pub fn tail_penalty_value(&self, phi: &TailFunction) -> Result<f64> {
        match &self.tail_penalty {
            Some(p) => Ok(p.value_and_grad(&phi.phi)?.0),
            None => Ok(0.0),
        }
    }

    /// Full objective and normalized residual at `(c, phi)`.
    pub fn value(&self, c: &[f64], phi: &TailFunction) -> Result<(f64, f64)> {
        let a = self.lattice.interpolate(&self.coarse(c)?, &self.model.grid)?;
        let m = self.model.misfit(&a, phi, &self.obs)?;
        let v = m + self.alpha_vol * self.vol_penalty_value(c)? + self.alpha_tail * self.tail_penalty_value(phi)?;
        Ok((v, m.sqrt() / self.data_norm))
    }

    /// Misfit, its gradients and the normalized residual.
    pub(crate) fn misfit_gradients(
        &self,
        c: &[f64],
        phi: &TailFunction,
    ) -> Result<(f64, Vec<f64>, Vec<f64>, f64)> {
        let g = &self.model.grid;
        let a = self.lattice.interpolate(&self.coarse(c)?, g)?;
        let ev = self.model.evaluate(&a, phi, &self.obs, self.mode)?;
        let gc = self.lattice.interpolate_transpose(&ev.gradient.vol, g);
        Ok((
            ev.misfit,
            gc.into_raw_vec(),
            ev.gradient.tail,
            ev.misfit.sqrt() / self.data_norm,
        ))
    }

    /// The objective as a function of the vol block with the tail frozen.
    pub fn vol_block<'a>(&'a self, phi: &'a TailFunction) -> VolBlock<'a> {
        VolBlock { obj: self, phi }
    }
}

pub struct VolBlock<'a> {
    obj: &'a TikhonovObjective,
    phi: &'a TailFunction,
}

impl Objective for VolBlock<'_> {
    fn evaluate(&mut self, c: &[f64]) -> Result<Point> {
        let o = self.obj;
        let (m, mut grad, _, residual) = o.misfit_gradients(c, self.phi)?;
        let (pv, pg) = o.vol_penalty.value_and_grad(c)?;
        for (g, p) in grad.iter_mut().zip(&pg) {
            *g += o.alpha_vol * p;
        }
        Ok(Point {
            value: m + o.alpha_vol * pv + o.alpha_tail * o.tail_penalty_value(self.phi)?,
            grad,
            residual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, MarketParams};
    use crate::pide::WeightMode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check(p: &Penalty, x: &[f64], eps: f64) -> f64 {
        let (_, g) = p.value_and_grad(x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let h: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let shift = |s: f64| -> Vec<f64> { x.iter().zip(&h).map(|(a, b)| a + s * eps * b).collect() };
            let f = |s: f64| p.value_and_grad(&shift(s)).unwrap().0;
            let fd = (8.0 * (f(1.0) - f(-1.0)) - (f(2.0) - f(-2.0))) / (12.0 * eps);
            let an: f64 = g.iter().zip(&h).map(|(a, b)| a * b).sum();
            worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
        }
        worst
    }

    #[test]
    fn misfit_examples() {
        let g = Grid::from_counts(1.0, 1.0, 4, 4).unwrap();
        let mut u = PriceSurface(Array2::zeros((5, 9)));
        u.0[(1, 4)] = 0.5;
        let obs = Observations::new(vec![(1, 4)], vec![0.3], &g).unwrap();
        assert!((misfit(&u, &obs).unwrap() - 0.04).abs() < 1e-15);
        let same = Observations::new(vec![(1, 4)], vec![0.5], &g).unwrap();
        assert_eq!(misfit(&u, &same).unwrap(), 0.0);
    }

    #[test]
    fn penalties_vanish_at_prior() {
        let prior = Array2::from_shape_fn((3, 4), |(i, k)| 0.05 + 0.01 * i as f64 - 0.002 * k as f64);
        let x = prior.clone().into_raw_vec();
        // the difference terms act on x itself, so only a flat prior is a zero
        let flat = Array2::from_elem((3, 4), 0.07);
        for (p, x) in [
            (Penalty::sobolev(flat.clone(), SobolevWeights::default()).unwrap(), flat.clone().into_raw_vec()),
            (Penalty::kl(x.clone()).unwrap(), x.clone()),
            (Penalty::l2(x.clone()), x.clone()),
        ] {
            let (v, g) = p.value_and_grad(&x).unwrap();
            assert!(v.abs() < 1e-15);
            assert!(g.iter().all(|v| v.abs() < 1e-15));
        }
        let (v, _) = Penalty::sobolev(prior, SobolevWeights::default()).unwrap().value_and_grad(&x).unwrap();
        assert!((v - (8.0 * 1e-4 + 100.0 * 9.0 * 4e-6)).abs() < 1e-15);
    }

    #[test]
    fn sobolev_constant_shift() {
        let prior = Array2::from_elem((4, 5), 0.08);
        let p = Penalty::sobolev(prior.clone(), SobolevWeights::default()).unwrap();
        let x: Vec<f64> = prior.iter().map(|v| v + 0.01).collect();
        assert!((p.value_and_grad(&x).unwrap().0 - 20.0 * 1e-4).abs() < 1e-15);
    }

    #[test]
    fn kl_closed_form() {
        let prior = vec![0.1, 0.2, 0.0, 0.05];
        let x: Vec<f64> = prior.iter().map(|v| 2.0 * v).collect();
        let v = Penalty::kl(prior.clone()).unwrap().value_and_grad(&x).unwrap().0;
        let expect: f64 = prior.iter().map(|p| p * (2.0 * 2f64.ln() - 1.0)).sum();
        assert!((v - expect).abs() < 1e-15);
        let bad = vec![0.1, -0.2, 0.0, 0.05];
        assert!(Penalty::kl(prior).unwrap().value_and_grad(&bad).is_err());
    }

    #[test]
    fn penalty_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = Array2::from_shape_fn((6, 7), |_| rng.gen_range(0.02..0.1));
        let x: Vec<f64> = (0..42).map(|_| rng.gen_range(0.02..0.1)).collect();
        let flat = prior.clone().into_raw_vec();
        let sob = fd_check(&Penalty::sobolev(prior, SobolevWeights::default()).unwrap(), &x, 1e-2);
        let kl = fd_check(&Penalty::kl(flat.clone()).unwrap(), &x, 1e-4);
        let l2 = fd_check(&Penalty::l2(flat), &x, 1e-2);
        assert!(sob < 1e-8 && kl < 1e-8 && l2 < 1e-8, "{sob} {kl} {l2}");
    }

    #[test]
    fn discrepancy_examples() {
        assert_eq!(discrepancy_check(0.5, 0.1, 3.0).unwrap(), Verdict::Continue);
        assert_eq!(discrepancy_check(0.2, 0.1, 3.0).unwrap(), Verdict::Stop);
        assert_eq!(discrepancy_check(0.0, 0.0, 3.0).unwrap(), Verdict::Continue);
        assert!(discrepancy_check(0.2, -0.1, 3.0).is_err());
    }

    struct Quadratic {
        center: Vec<f64>,
        scale: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn evaluate(&mut self, x: &[f64]) -> Result<Point> {
            let mut value = 0.0;
            let grad = x
                .iter()
                .zip(&self.center)
                .zip(&self.scale)
                .map(|((x, c), s)| {
                    value += s * (x - c).powi(2);
                    2.0 * s * (x - c)
                })
                .collect();
            Ok(Point {
                value,
                grad,
                residual: value.sqrt(),
            })
        }
    }

    #[test]
    fn descent_on_box_constrained_quadratic() {
        let mut q = Quadratic {
            center: vec![0.2, -0.3, 0.05, 0.1],
            scale: vec![1.0, 10.0, 100.0, 1000.0],
        };
        let opts = DescentOptions {
            lower: 0.0,
            upper: 0.15,
            max_iters: 500,
            grad_tol: 1e-12,
            ..Default::default()
        };
        let d = descend(&mut q, &[0.1; 4], &opts).unwrap();
        assert_eq!(d.stop, StopReason::Gradient);
        let expect = [0.15, 0.0, 0.05, 0.1];
        for (x, e) in d.x.iter().zip(expect) {
            assert!((x - e).abs() < 1e-9, "{:?}", d.x);
        }
        assert!(d.values.windows(2).all(|w| w[1] <= w[0]));
    }

    proptest! {
        #[test]
        fn descent_never_increases(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let mut q = Quadratic {
                center: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                scale: (0..n).map(|_| 10f64.powf(rng.gen_range(-2.0..3.0))).collect(),
            };
            let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let opts = DescentOptions { max_iters: 60, lower: -0.5, upper: 0.5, ..Default::default() };
            let d = descend(&mut q, &x0, &opts).unwrap();
            prop_assert!(d.values.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    fn small_problem(alpha: f64) -> (TikhonovObjective, Vec<f64>, TailFunction) {
        let g = Grid::symmetric(0.5, 2.0, 0.025, 0.05).unwrap();
        let model = PideModel::new(g, MarketParams::default(), WeightMode::Plain);
        let lattice = QuoteLattice::new(1..=5, -6..=6, 0.1, 0.05);
        let truth = lattice.sample(|t, y| 0.04 + 0.02 * y * y / 0.09 - 0.01 * t);
        let phi = TailFunction::zero(&g);
        let a = lattice.interpolate(&truth, &g).unwrap();
        let u = model.solve(&a, &phi).unwrap();
        let nodes: Vec<(usize, usize)> = lattice
            .nodes()
            .iter()
            .map(|&(t, y)| (g.level_index(t).unwrap(), g.node_index(y).unwrap()))
            .collect();
        let prices = nodes.iter().map(|&(i, k)| u.at(i, k)).collect();
        let obs = Observations::new(nodes, prices, &g).unwrap();
        let prior = Array2::from_elem(lattice.shape(), 0.08);
        let pen = Penalty::sobolev(prior, SobolevWeights::default()).unwrap();
        let obj = TikhonovObjective::new(model, obs, lattice, alpha, 0.0, pen, None).unwrap();
        (obj, truth.into_raw_vec(), phi)
    }

    #[test]
    fn exact_start_stops_immediately() {
        let (obj, truth, phi) = small_problem(1e-4);
        let opts = DescentOptions {
            residual_tol: Some(0.01),
            ..DescentOptions::vol_box()
        };
        let d = descend(&mut obj.vol_block(&phi), &truth, &opts).unwrap();
        assert_eq!(d.iterations, 0);
        assert_eq!(d.stop, StopReason::Residual);
        assert!(d.residual < 1e-14);
    }

    #[test]
    fn vol_block_gradient_matches_differences() {
        let (obj, truth, phi) = small_problem(1e-3);
        let c: Vec<f64> = truth.iter().map(|v| v * 1.1 + 0.002).collect();
        let mut block = obj.vol_block(&phi);
        let p = block.evaluate(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..3 {
            let h: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = 1e-6;
            let at = |s: f64| -> Vec<f64> { c.iter().zip(&h).map(|(a, b)| a + s * eps * b).collect() };
            let fd = (block.evaluate(&at(1.0)).unwrap().value - block.evaluate(&at(-1.0)).unwrap().value) / (2.0 * eps);
            let an: f64 = p.grad.iter().zip(&h).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() < 1e-5 * an.abs(), "{fd} {an}");
        }
    }

    #[test]
    fn strong_regularization_returns_prior() {
        let (obj, truth, phi) = small_problem(1e6);
        let opts = DescentOptions {
            max_iters: 500,
            ..DescentOptions::vol_box()
        };
        let d = descend(&mut obj.vol_block(&phi), &truth, &opts).unwrap();
        let prior = vec![0.08; truth.len()];
        assert!(normalized_distance(&d.x, &prior) < 1e-3, "{:?}", d.stop);
    }

    #[test]
    fn small_calibration_reduces_residual() {
        let (obj, truth, phi) = small_problem(1e-6);
        let start = vec![0.08; truth.len()];
        let opts = DescentOptions {
            residual_tol: Some(0.005),
            max_iters: 400,
            ..DescentOptions::vol_box()
        };
        let d = descend(&mut obj.vol_block(&phi), &start, &opts).unwrap();
        assert_eq!(d.stop, StopReason::Residual, "{} after {}", d.residual, d.iterations);
        assert!(d.values.windows(2).all(|w| w[1] <= w[0]));
    }
}
