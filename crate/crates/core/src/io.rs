//! Run configuration and flat-file formats.
//!
//! Quotes are CSV with columns `tau,y,price[,implied_vol][,weight]`.
//! Surfaces are dense CSV: a `# grid ...` line, a header of `y` values, then
//! one row per maturity. Nodal vectors (tails, jump masses) are `y,value`.
//! Floats are written in shortest round-trip form.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointMode;
use crate::analytic::call_bounds;
use crate::error::{Error, Result};
use crate::grid::{log_moneyness, Grid, MarketParams};
use crate::mc::PathConfig;
use crate::pide::WeightMode;
use crate::regularization::SobolevWeights;
use crate::synthetic::{Provenance, Quote, QuoteSet};

pub const VERSION: &str = concat!("jumpcal ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub tau_max: f64,
    pub y_max: f64,
    pub dtau: f64,
    pub dy: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            tau_max: 1.0,
            y_max: 5.0,
            dtau: 0.005,
            dy: 0.025,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        Grid::symmetric(self.tau_max, self.y_max, self.dtau, self.dy)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailPenaltyKind {
    #[default]
    L2,
    Kl,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum TailParamSpec {
    Nodal,
    LogFourier { terms: usize },
}

impl Default for TailParamSpec {
    fn default() -> Self {
        Self::LogFourier { terms: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    pub alpha_vol: f64,
    pub alpha_tail: f64,
    pub weights: SobolevWeights,
    /// Constant prior and starting value of the local variance.
    pub a_prior: f64,
    pub a_lower: f64,
    pub a_upper: f64,
    pub tail_penalty: TailPenaltyKind,
    pub tail: TailParamSpec,
    pub residual_tol: Option<f64>,
    /// Relative noise level; enables the discrepancy test.
    pub delta: Option<f64>,
    pub lambda: f64,
    pub outer_max: usize,
    pub vol_iters: usize,
    pub tail_iters: usize,
    pub grad_tol: f64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            alpha_vol: 1e-4,
            alpha_tail: 1e-5,
            weights: SobolevWeights::default(),
            a_prior: 0.08,
            a_lower: 0.005,
            a_upper: 0.125,
            tail_penalty: TailPenaltyKind::L2,
            tail: TailParamSpec::default(),
            residual_tol: Some(0.002),
            delta: None,
            lambda: 3.0,
            outer_max: 4,
            vol_iters: 300,
            tail_iters: 300,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverySpec {
    pub alpha: f64,
    pub max_iters: usize,
}

impl Default for RecoverySpec {
    fn default() -> Self {
        Self {
            alpha: 1e-5,
            max_iters: 500,
        }
    }
}

/// Every option of every workflow, validated before any solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub market: MarketParams,
    pub weight_mode: WeightMode,
    pub adjoint_mode: AdjointMode,
    pub calibration: CalibrationSpec,
    pub recovery: RecoverySpec,
    pub paths: PathConfig,
    pub seed: u64,
    /// Relative Gaussian noise added to synthetic quotes.
    pub noise: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            market: MarketParams::default(),
            weight_mode: WeightMode::default(),
            adjoint_mode: AdjointMode::default(),
            calibration: CalibrationSpec::default(),
            recovery: RecoverySpec::default(),
            paths: PathConfig::default(),
            seed: 7,
            noise: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<Grid> {
        let grid = self.grid.build()?;
        MarketParams::new(self.market.r, self.market.s0)?;
        let c = &self.calibration;
        if !(c.alpha_vol >= 0.0 && c.alpha_tail >= 0.0) {
            return Err(Error::config("regularization weights must be nonnegative"));
        }
        if !(c.weights.level >= 0.0 && c.weights.tau >= 0.0 && c.weights.y >= 0.0) {
            return Err(Error::config("penalty weights must be nonnegative"));
        }
        if !(c.a_lower > 0.0 && c.a_lower < c.a_upper) {
            return Err(Error::config("need 0 < a_lower < a_upper"));
        }
        if !(c.a_prior >= c.a_lower && c.a_prior <= c.a_upper) {
            return Err(Error::config("a_prior outside the variance box"));
        }
        if !(c.lambda > 1.0) {
            return Err(Error::config("discrepancy factor must exceed 1"));
        }
        if c.delta.is_some_and(|d| !(d >= 0.0)) || self.noise.is_some_and(|d| !(d >= 0.0)) {
            return Err(Error::config("noise levels must be nonnegative"));
        }
        if let TailParamSpec::LogFourier { terms: 0 } = c.tail {
            return Err(Error::config("log-Fourier tail needs at least one term"));
        }
        if !(self.recovery.alpha >= 0.0) {
            return Err(Error::config("recovery weight must be nonnegative"));
        }
        self.paths.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} '{field}'")))
}

pub fn write_quotes(path: &Path, quotes: &QuoteSet) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let with_iv = quotes.quotes.iter().any(|q| q.implied_vol.is_some());
    if with_iv {
        w.write_record(["tau", "y", "price", "implied_vol"])?;
    } else {
        w.write_record(["tau", "y", "price"])?;
    }
    for q in &quotes.quotes {
        let mut rec = vec![fmt(q.tau), fmt(q.y), fmt(q.price)];
        if with_iv {
            rec.push(q.implied_vol.map(fmt).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_quotes(path: &Path, provenance: Provenance) -> Result<QuoteSet> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(ct), Some(cy), Some(cp)) = (col("tau"), col("y"), col("price")) else {
        return Err(Error::Parse("quote file needs tau, y and price columns".into()));
    };
    let civ = col("implied_vol");
    let cw = col("weight");
    if let Some(extra) = headers
        .iter()
        .find(|h| !matches!(h.trim(), "tau" | "y" | "price" | "implied_vol" | "weight"))
    {
        return Err(Error::Parse(format!("unknown quote column '{extra}'")));
    }
    let mut quotes = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        if let Some(c) = cw {
            let w = parse_f64(&rec[c], "weight", line)?;
            if w != 1.0 {
                return Err(Error::Unsupported(format!("line {line}: quote weights other than 1")));
            }
        }
        let implied_vol = match civ.map(|c| rec[c].trim()) {
            Some("") | None => None,
            Some(v) => Some(parse_f64(v, "implied_vol", line)?),
        };
        quotes.push(Quote {
            tau: parse_f64(&rec[ct], "tau", line)?,
            y: parse_f64(&rec[cy], "y", line)?,
            price: parse_f64(&rec[cp], "price", line)?,
            implied_vol,
        });
    }
    Ok(QuoteSet {
        quotes,
        provenance,
        delta: None,
        seed: None,
    })
}

/// Dense surface with its grid in the first line.
pub fn write_surface(path: &Path, grid: &Grid, values: &Array2<f64>) -> Result<()> {
    if values.dim() != (grid.n_levels(), grid.n_nodes()) {
        return Err(Error::config("surface does not match the grid"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "# grid tau_max={} y_min={} y_max={} dtau={} dy={}",
        fmt(grid.tau_max()),
        fmt(grid.y_min()),
        fmt(grid.y_max()),
        fmt(grid.dtau()),
        fmt(grid.dy())
    )?;
    let header: Vec<String> = std::iter::once("tau".to_string()).chain(grid.ys().into_iter().map(fmt)).collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, row) in values.rows().into_iter().enumerate() {
        let line: Vec<String> = std::iter::once(fmt(grid.tau(i))).chain(row.iter().map(|&v| fmt(v))).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_surface(path: &Path) -> Result<(Grid, Array2<f64>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| Error::Parse("empty surface file".into()))??;
    let spec = first
        .strip_prefix("# grid ")
        .ok_or_else(|| Error::Parse("surface file must start with '# grid'".into()))?;
    let mut fields = BTreeMap::new();
    for kv in spec.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad grid field '{kv}'")))?;
        fields.insert(k, parse_f64(v, k, 1)?);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Parse(format!("grid line lacks {k}")));
    let grid = Grid::new(get("tau_max")?, get("y_min")?, get("y_max")?, get("dtau")?, get("dy")?)?;
    lines.next().ok_or_else(|| Error::Parse("surface file lacks its header".into()))??;
    let mut values = Array2::zeros((grid.n_levels(), grid.n_nodes()));
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i >= grid.n_levels() {
            return Err(Error::Parse("surface file has too many rows".into()));
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != grid.n_nodes() + 1 {
            return Err(Error::Parse(format!("line {}: expected {} columns", i + 3, grid.n_nodes() + 1)));
        }
        for (k, c) in cells[1..].iter().enumerate() {
            values[(i, k)] = parse_f64(c, "value", i + 3)?;
        }
        rows += 1;
    }
    if rows != grid.n_levels() {
        return Err(Error::Parse(format!("surface file has {rows} rows, grid needs {}", grid.n_levels())));
    }
    Ok((grid, values))
}

/// `y,value` pairs over the grid nodes.
pub fn write_nodal(path: &Path, grid: &Grid, values: &[f64]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["y", "value"])?;
    for (k, v) in values.iter().enumerate() {
        w.write_record([fmt(grid.y(k)), fmt(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Values of a `y,value` file, checked against the grid nodes.
pub fn read_nodal(path: &Path, grid: &Grid) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut values = Vec::with_capacity(grid.n_nodes());
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse(format!("line {}: expected y,value", k + 2)));
        }
        let y = parse_f64(&rec[0], "y", k + 2)?;
        if k >= grid.n_nodes() || (y - grid.y(k)).abs() > 1e-9 {
            return Err(Error::Parse(format!("line {}: y = {y} is not grid node {k}", k + 2)));
        }
        values.push(parse_f64(&rec[1], "value", k + 2)?);
    }
    if values.len() != grid.n_nodes() {
        return Err(Error::Parse(format!("expected {} nodes, found {}", grid.n_nodes(), values.len())));
    }
    Ok(values)
}

/// Artifact index written next to the CSV outputs of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub version: String,
    pub config: RunConfig,
    pub files: BTreeMap<String, String>,
    pub summary: serde_json::Value,
    pub history: serde_json::Value,
    /// The run did not meet its stopping target.
    pub flagged: bool,
}

impl Bundle {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            version: VERSION.to_string(),
            config: config.clone(),
            files: BTreeMap::new(),
            summary: serde_json::Value::Null,
            history: serde_json::Value::Null,
            flagged: false,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// A market row that failed conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub line: usize,
    pub reason: String,
}

/// Convert `strike,days,price` rows (absolute prices, calendar days to
/// expiry, ACT/365) into normalized quotes. Rows that break the arbitrage
/// bounds are dropped and returned.
pub fn import_market_quotes(path: &Path, market: &MarketParams) -> Result<(QuoteSet, Vec<Rejected>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(ck), Some(cd), Some(cp)) = (col("strike"), col("days"), col("price")) else {
        return Err(Error::Parse("market file needs strike, days and price columns".into()));
    };
    let mut quotes = Vec::new();
    let mut rejected = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let strike = parse_f64(&rec[ck], "strike", line)?;
        let days = parse_f64(&rec[cd], "days", line)?;
        let price = parse_f64(&rec[cp], "price", line)?;
        let tau = days / 365.0;
        if !(tau > 0.0) {
            rejected.push(Rejected {
                line,
                reason: format!("nonpositive maturity {days} days"),
            });
            continue;
        }
        let y = log_moneyness(strike, market.s0)?;
        let normalized = price / market.s0;
        let (lo, hi) = call_bounds(y, tau, market.r);
        if !(normalized > lo - 1e-9 && normalized < hi) {
            rejected.push(Rejected {
                line,
                reason: format!("price {normalized} outside ({lo}, {hi})"),
            });
            continue;
        }
        quotes.push(Quote {
            tau,
            y,
            price: normalized,
            implied_vol: None,
        });
    }
    Ok((
        QuoteSet {
            quotes,
            provenance: Provenance::Market,
            delta: None,
            seed: None,
        },
        rejected,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn config_defaults_validate() {
        let cfg = RunConfig::default();
        let g = cfg.validate().unwrap();
        assert_eq!(g.n_nodes(), 401);
        assert_eq!(g.n_levels(), 201);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"grid": {"dtau": 0.01, "bogus": 1}}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"colour": 1}"#);
        assert!(err.is_err());
        let ok: RunConfig = serde_json::from_str(r#"{"grid": {"dtau": 0.01}, "weight_mode": "paper"}"#).unwrap();
        assert_eq!(ok.grid.dtau, 0.01);
        assert_eq!(ok.weight_mode, WeightMode::Paper);
    }

    #[test]
    fn invalid_config_is_caught() {
        let mut cfg = RunConfig::default();
        cfg.calibration.lambda = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.calibration.a_prior = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn quote_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.csv");
        let qs = QuoteSet {
            quotes: vec![
                Quote {
                    tau: 0.1,
                    y: -0.05,
                    price: 0.1 / 3.0,
                    implied_vol: Some(0.2),
                },
                Quote {
                    tau: 0.2,
                    y: 0.05,
                    price: std::f64::consts::E / 100.0,
                    implied_vol: None,
                },
            ],
            provenance: Provenance::Synthetic,
            delta: None,
            seed: None,
        };
        write_quotes(&p, &qs).unwrap();
        let back = read_quotes(&p, Provenance::Synthetic).unwrap();
        assert_eq!(back, qs);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("tau,y,price,implied_vol\n") && !text.contains('\r'));
    }

    #[test]
    fn quote_weights_other_than_one_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.csv");
        std::fs::write(&p, "tau,y,price,weight\n0.1,0,0.05,1\n").unwrap();
        assert_eq!(read_quotes(&p, Provenance::Market).unwrap().quotes.len(), 1);
        std::fs::write(&p, "tau,y,price,weight\n0.1,0,0.05,2\n").unwrap();
        assert!(read_quotes(&p, Provenance::Market).is_err());
    }

    proptest! {
        #[test]
        fn surface_round_trip_is_lossless(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = Grid::symmetric(0.5, 1.0, 0.1, 0.25).unwrap();
            let v = Array2::from_shape_fn((g.n_levels(), g.n_nodes()), |_| rng.gen::<f64>() * 10f64.powi(rng.gen_range(-12..3)));
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.csv");
            write_surface(&p, &g, &v).unwrap();
            let (g2, v2) = read_surface(&p).unwrap();
            prop_assert_eq!(g2, g);
            prop_assert_eq!(v2, v);
        }
    }

    #[test]
    fn nodal_round_trip() {
        let g = Grid::symmetric(0.5, 1.0, 0.1, 0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let v: Vec<f64> = (0..g.n_nodes()).map(|k| (k as f64).sqrt() / 7.0).collect();
        write_nodal(&p, &g, &v).unwrap();
        assert_eq!(read_nodal(&p, &g).unwrap(), v);
        let other = Grid::symmetric(0.5, 1.0, 0.1, 0.5).unwrap();
        assert!(read_nodal(&p, &other).is_err());
    }

    #[test]
    fn market_import_converts_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "strike,days,price\n100,73,5\n110,73,0.5\n90,73,5\n100,0,3\n").unwrap();
        let mkt = MarketParams::new(0.0, 100.0).unwrap();
        let (qs, rejected) = import_market_quotes(&p, &mkt).unwrap();
        assert_eq!(qs.quotes.len(), 2);
        assert!((qs.quotes[0].tau - 0.2).abs() < 1e-15);
        assert!((qs.quotes[1].y - 1.1f64.ln()).abs() < 1e-15);
        assert!((qs.quotes[1].price - 0.005).abs() < 1e-15);
        assert_eq!(rejected.iter().map(|r| r.line).collect::<Vec<_>>(), vec![4, 5]);
    }
}
