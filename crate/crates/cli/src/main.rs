use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use jumpcal::analytic::{carr_madan_price, compare, constant_sigma, implied_vol};
use jumpcal::io::{
    import_market_quotes, read_nodal, read_quotes, read_surface, write_nodal, write_quotes, write_surface, Bundle,
    RunConfig,
};
use jumpcal::mc::{lookback_tables, ModelSpec, Scheme};
use jumpcal::synthetic::{reference_jump_density, reference_vol_surface, prior_jump_density, Provenance, Quote, QuoteSet};
use jumpcal::workflow::{self, Preset};
use jumpcal::{AdjointMode, Error, Grid, JumpDensity, TailFunction, VolSurface};

/// Forward PIDE pricing and calibration of local volatility with jumps.
#[derive(Parser)]
#[command(name = "jumpcal", version)]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Also write per-figure CSVs under `plots/`.
    #[arg(long, global = true)]
    emit_plots: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward equation for a vol surface and a tail.
    Price {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        tail: PathBuf,
        /// Largest |y| written to the implied-vol file.
        #[arg(long, default_value_t = 0.5)]
        max_abs_y: f64,
    },
    /// Calibrate the local volatility with the tail held fixed.
    CalibrateVol {
        #[arg(long)]
        quotes: PathBuf,
        /// Fixed tail; zero (pure local volatility) when absent.
        #[arg(long)]
        tail: Option<PathBuf>,
        #[arg(long)]
        residual_tol: Option<f64>,
    },
    /// Alternating calibration of volatility and tail, then jump recovery.
    CalibrateSplit {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        quotes: Option<PathBuf>,
        /// Generate the quotes from a synthetic preset.
        #[arg(long)]
        preset: Option<PresetArg>,
        /// Tail prior and starting point; the built-in asymmetric prior when absent.
        #[arg(long)]
        tail_prior: Option<PathBuf>,
    },
    /// Recover jump masses from a tail.
    RecoverNu {
        #[arg(long)]
        tail: PathBuf,
        /// Prior jump masses; the built-in asymmetric prior when absent.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Write synthetic surfaces, densities and quotes.
    Synth {
        #[arg(long)]
        preset: PresetArg,
    },
    /// Lookback prices under a calibrated model, a pure local vol model and the truth.
    McExotics {
        /// Bundle written by calibrate-split.
        #[arg(long)]
        bundle: PathBuf,
        /// Pure local volatility surface; calibrated from the bundle's quotes when absent.
        #[arg(long)]
        dupire: Option<PathBuf>,
    },
    /// Black-Scholes implied vols of a quote file or a price surface.
    ImpliedVol {
        #[arg(long)]
        prices: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        max_abs_y: f64,
    },
    /// Fourier prices under constant volatility and lattice jumps.
    OracleFourier {
        /// Constant vol surface.
        #[arg(long)]
        vol: PathBuf,
        /// Jump masses.
        #[arg(long)]
        nu: PathBuf,
        /// Quote file giving the nodes to price.
        #[arg(long)]
        nodes: PathBuf,
        /// Price surface to compare against in implied vol.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Compare adjoint gradients with finite differences.
    CheckGradients(CheckArgs),
    /// Convert `strike,days,price` market rows into normalized quotes.
    QuotesImport {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        s0: f64,
        #[arg(long, default_value_t = 0.0)]
        r: f64,
    },
}

#[derive(Args)]
struct CheckArgs {
    /// Time steps x nodes.
    #[arg(long, default_value = "20x41")]
    grid: String,
    #[arg(long, default_value_t = 5)]
    directions: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Discrete)]
    mode: ModeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    #[value(name = "table1")]
    Flat,
    #[value(name = "sec71")]
    Smile,
    #[value(name = "sec73")]
    Wide,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Flat => Preset::Flat,
            PresetArg::Smile => Preset::Smile,
            PresetArg::Wide => Preset::Wide,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Discrete,
    Continuous,
}

/// A workflow finished without meeting its stopping target.
#[derive(Debug)]
struct NotConverged(String);

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "did not converge: {}", self.0)
    }
}

impl std::error::Error for NotConverged {}

struct Ctx {
    cfg: RunConfig,
    grid: Grid,
    out: PathBuf,
    plots: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn plot_path(&self, name: &str) -> anyhow::Result<PathBuf> {
        let dir = self.out.join("plots");
        fs::create_dir_all(&dir)?;
        Ok(dir.join(name))
    }

    fn check_grid(&self, other: &Grid, what: &str) -> anyhow::Result<()> {
        if other != &self.grid {
            return Err(Error::Config(format!("{what} was written on a different grid")).into());
        }
        Ok(())
    }

    fn read_vol(&self, path: &Path) -> anyhow::Result<VolSurface> {
        let (g, values) = read_surface(path).with_context(|| format!("reading {}", path.display()))?;
        self.check_grid(&g, "vol surface")?;
        Ok(VolSurface::new(values, &self.grid)?)
    }

    fn read_tail(&self, path: &Path) -> anyhow::Result<TailFunction> {
        let v = read_nodal(path, &self.grid).with_context(|| format!("reading {}", path.display()))?;
        Ok(TailFunction::new(v, &self.grid)?)
    }

    fn read_nu(&self, path: &Path) -> anyhow::Result<JumpDensity> {
        let v = read_nodal(path, &self.grid).with_context(|| format!("reading {}", path.display()))?;
        Ok(JumpDensity::new(v, &self.grid)?)
    }

    fn bundle(&self) -> Bundle {
        Bundle::new(&self.cfg)
    }

    fn write_bundle(&self, name: &str, bundle: &Bundle) -> anyhow::Result<()> {
        bundle.write(&self.path(name))?;
        Ok(())
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> anyhow::Result<()> {
        let mut w = BufWriter::new(fs::File::create(self.path(name))?);
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NotConverged>().is_some() {
        return 4;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NumericalBreakdown { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let grid = cfg.validate()?;
    fs::create_dir_all(&cli.out)?;
    let mut ctx = Ctx {
        cfg,
        grid,
        out: cli.out,
        plots: cli.emit_plots,
    };
    match cli.command {
        Command::Price { vol, tail, max_abs_y } => price(&ctx, &vol, &tail, max_abs_y),
        Command::CalibrateVol {
            quotes,
            tail,
            residual_tol,
        } => {
            if residual_tol.is_some() {
                ctx.cfg.calibration.residual_tol = residual_tol;
            }
            calibrate_vol(&ctx, &quotes, tail.as_deref())
        }
        Command::CalibrateSplit {
            quotes,
            preset,
            tail_prior,
        } => calibrate_split(&ctx, quotes.as_deref(), preset.map(Preset::from), tail_prior.as_deref()),
        Command::RecoverNu { tail, prior } => recover_nu(&ctx, &tail, prior.as_deref()),
        Command::Synth { preset } => synth(&ctx, preset.into()),
        Command::McExotics { bundle, dupire } => mc_exotics(&ctx, &bundle, dupire.as_deref()),
        Command::ImpliedVol { prices, max_abs_y } => implied_vols(&ctx, &prices, max_abs_y),
        Command::OracleFourier {
            vol,
            nu,
            nodes,
            against,
        } => oracle_fourier(&ctx, &vol, &nu, &nodes, against.as_deref()),
        Command::CheckGradients(args) => check_gradients(&args),
        Command::QuotesImport { market, s0, r } => quotes_import(&ctx, &market, s0, r),
    }
}

/// Implied vols at the grid nodes with `tau > 0` and `|y| <= max_abs_y`.
fn surface_smile(ctx: &Ctx, prices: &ndarray::Array2<f64>, max_abs_y: f64) -> QuoteSet {
    let g = &ctx.grid;
    let mut quotes = Vec::new();
    for i in 1..g.n_levels() {
        for k in 0..g.n_nodes() {
            let y = g.y(k);
            if y.abs() <= max_abs_y + 1e-12 {
                quotes.push(Quote {
                    tau: g.tau(i),
                    y,
                    price: prices[(i, k)],
                    implied_vol: None,
                });
            }
        }
    }
    QuoteSet {
        quotes,
        provenance: Provenance::Synthetic,
        delta: None,
        seed: None,
    }
    .with_implied_vols(ctx.cfg.market.r)
}

fn price(ctx: &Ctx, vol: &Path, tail: &Path, max_abs_y: f64) -> anyhow::Result<()> {
    let a = ctx.read_vol(vol)?;
    let phi = ctx.read_tail(tail)?;
    let u = workflow::model(&ctx.cfg, &ctx.grid).solve(&a, &phi)?;
    write_surface(&ctx.path("prices.csv"), &ctx.grid, &u.0)?;
    let smile = surface_smile(ctx, &u.0, max_abs_y);
    write_quotes(&ctx.path("implied_vol.csv"), &smile)?;
    if ctx.plots {
        write_quotes(&ctx.plot_path("smiles.csv")?, &smile)?;
    }
    let mut bundle = ctx.bundle();
    bundle.files.insert("prices".into(), "prices.csv".into());
    bundle.files.insert("implied_vol".into(), "implied_vol.csv".into());
    bundle.summary = json!({ "invariant_violation": u.invariant_violation(&ctx.grid) });
    ctx.write_bundle("price.json", &bundle)
}

fn implied_vols(ctx: &Ctx, prices: &Path, max_abs_y: f64) -> anyhow::Result<()> {
    let first = fs::read_to_string(prices)?.lines().next().unwrap_or_default().to_string();
    let quotes = if first.starts_with("# grid") {
        let (g, values) = read_surface(prices)?;
        ctx.check_grid(&g, "price surface")?;
        surface_smile(ctx, &values, max_abs_y)
    } else {
        read_quotes(prices, Provenance::Market)?.with_implied_vols(ctx.cfg.market.r)
    };
    let failed = quotes.quotes.iter().filter(|q| q.implied_vol.is_none()).count();
    if failed > 0 {
        eprintln!("{failed} prices admit no implied vol; left blank");
    }
    write_quotes(&ctx.path("implied_vol.csv"), &quotes)?;
    if ctx.plots {
        write_quotes(&ctx.plot_path("smiles.csv")?, &quotes)?;
    }
    Ok(())
}

fn oracle_fourier(ctx: &Ctx, vol: &Path, nu: &Path, nodes: &Path, against: Option<&Path>) -> anyhow::Result<()> {
    let sigma = constant_sigma(&ctx.read_vol(vol)?)?;
    let nu = ctx.read_nu(nu)?;
    let nodes = read_quotes(nodes, Provenance::Synthetic)?;
    let r = ctx.cfg.market.r;
    let mut quotes = Vec::with_capacity(nodes.quotes.len());
    for q in &nodes.quotes {
        let p = carr_madan_price(sigma, &nu, &ctx.grid, q.tau, &[q.y], r, 0.75)?[0];
        quotes.push(Quote {
            tau: q.tau,
            y: q.y,
            price: p,
            implied_vol: implied_vol(p, q.y, q.tau, r).ok(),
        });
    }
    let oracle = QuoteSet {
        quotes,
        provenance: Provenance::Synthetic,
        delta: None,
        seed: None,
    };
    write_quotes(&ctx.path("fourier.csv"), &oracle)?;
    if let Some(path) = against {
        let (g, u) = read_surface(path)?;
        ctx.check_grid(&g, "price surface")?;
        let (mut model, mut reference) = (Vec::new(), Vec::new());
        for q in &oracle.quotes {
            let i = g.level_index(q.tau)?;
            let k = g.node_index(q.y)?;
            if let (Some(o), Ok(m)) = (q.implied_vol, implied_vol(u[(i, k)], q.y, q.tau, r)) {
                model.push(m);
                reference.push(o);
            }
        }
        let c = compare(&model, &reference)?;
        println!("{}", serde_json::to_string(&c)?);
        ctx.write_json("fourier_comparison.json", &c)?;
    }
    Ok(())
}

fn synth(ctx: &Ctx, preset: Preset) -> anyhow::Result<()> {
    let s = workflow::synthesize(preset, &ctx.cfg, &ctx.grid)?;
    write_surface(&ctx.path("vol.csv"), &ctx.grid, &s.vol.0)?;
    write_nodal(&ctx.path("nu.csv"), &ctx.grid, &s.nu.nu)?;
    write_nodal(&ctx.path("tail.csv"), &ctx.grid, &s.tail.phi)?;
    write_quotes(&ctx.path("quotes.csv"), &s.quotes)?;
    if ctx.plots {
        write_vol_slices(ctx, &s.vol)?;
        write_tail_curve(ctx, &s.tail, Some(&s.nu))?;
    }
    let mut bundle = ctx.bundle();
    for (k, f) in [("vol", "vol.csv"), ("nu", "nu.csv"), ("tail", "tail.csv"), ("quotes", "quotes.csv")] {
        bundle.files.insert(k.into(), f.into());
    }
    bundle.summary = json!({ "preset": preset, "quotes": s.quotes.quotes.len() });
    ctx.write_bundle("synth.json", &bundle)
}

/// Local volatility `sigma(tau, y)` at every grid node with `|y| <= 1`.
fn write_vol_slices(ctx: &Ctx, vol: &VolSurface) -> anyhow::Result<()> {
    let g = &ctx.grid;
    let sigma = vol.sigma();
    let mut w = BufWriter::new(fs::File::create(ctx.plot_path("vol_slices.csv")?)?);
    writeln!(w, "tau,y,sigma")?;
    for i in 0..g.n_levels() {
        for k in (0..g.n_nodes()).filter(|&k| g.y(k).abs() <= 1.0 + 1e-12) {
            writeln!(w, "{},{},{}", g.tau(i), g.y(k), sigma[(i, k)])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_tail_curve(ctx: &Ctx, tail: &TailFunction, nu: Option<&JumpDensity>) -> anyhow::Result<()> {
    let g = &ctx.grid;
    let mut w = BufWriter::new(fs::File::create(ctx.plot_path("tail.csv")?)?);
    writeln!(w, "y,phi,nu")?;
    for k in 0..g.n_nodes() {
        let n = nu.map(|n| n.nu[k].to_string()).unwrap_or_default();
        writeln!(w, "{},{},{}", g.y(k), tail.phi[k], n)?;
    }
    w.flush()?;
    Ok(())
}

fn calibrate_vol(ctx: &Ctx, quotes: &Path, tail: Option<&Path>) -> anyhow::Result<()> {
    let quotes = read_quotes(quotes, Provenance::Market)?;
    let phi = match tail {
        Some(p) => ctx.read_tail(p)?,
        None => TailFunction::zero(&ctx.grid),
    };
    let fit = workflow::calibrate_vol(&ctx.cfg, &ctx.grid, &quotes, &phi)?;
    write_surface(&ctx.path("vol.csv"), &ctx.grid, &fit.vol.0)?;
    if ctx.plots {
        write_vol_slices(ctx, &fit.vol)?;
    }
    let d = &fit.descent;
    let mut bundle = ctx.bundle();
    bundle.files.insert("vol".into(), "vol.csv".into());
    bundle.summary = json!({
        "residual": d.residual,
        "iterations": d.iterations,
        "stop": d.stop,
        "grad_norm": d.grad_norm,
        "lattice": fit.lattice,
    });
    bundle.history = json!(d.values);
    bundle.flagged = !fit.converged;
    ctx.write_bundle("calibrate_vol.json", &bundle)?;
    println!("residual {} after {} iterations ({:?})", d.residual, d.iterations, d.stop);
    if !fit.converged {
        return Err(NotConverged(format!("vol descent stopped on {:?}", d.stop)).into());
    }
    Ok(())
}

fn calibrate_split(
    ctx: &Ctx,
    quotes: Option<&Path>,
    preset: Option<Preset>,
    tail_prior: Option<&Path>,
) -> anyhow::Result<()> {
    let quotes = match (quotes, preset) {
        (Some(p), _) => read_quotes(p, Provenance::Market)?,
        (None, Some(preset)) => workflow::synthesize(preset, &ctx.cfg, &ctx.grid)?.quotes,
        (None, None) => bail!(Error::Config("need --quotes or --preset".into())),
    };
    let (prior_tail, prior_nu) = match tail_prior {
        Some(p) => (ctx.read_tail(p)?, prior_jump_density(&ctx.grid)),
        None => (workflow::prior_tail(&ctx.grid)?, prior_jump_density(&ctx.grid)),
    };
    write_quotes(&ctx.path("quotes.csv"), &quotes)?;
    let mut log = BufWriter::new(fs::File::create(ctx.path("progress.jsonl"))?);
    let fit = workflow::calibrate_split(&ctx.cfg, &ctx.grid, &quotes, &prior_tail, Some(&mut log))?;
    log.flush()?;
    write_surface(&ctx.path("vol.csv"), &ctx.grid, &fit.vol.0)?;
    write_nodal(&ctx.path("tail.csv"), &ctx.grid, &fit.tail.phi)?;
    let recovery = workflow::recover_nu(&ctx.cfg, &ctx.grid, &fit.tail, &prior_nu)?;
    write_nodal(&ctx.path("nu.csv"), &ctx.grid, &recovery.density.nu)?;
    ctx.write_json("history.json", &fit.state.history)?;
    if ctx.plots {
        write_vol_slices(ctx, &fit.vol)?;
        write_tail_curve(ctx, &fit.tail, Some(&recovery.density))?;
    }
    let mut bundle = ctx.bundle();
    for (k, f) in [
        ("quotes", "quotes.csv"),
        ("vol", "vol.csv"),
        ("tail", "tail.csv"),
        ("nu", "nu.csv"),
        ("history", "history.json"),
        ("progress", "progress.jsonl"),
    ] {
        bundle.files.insert(k.into(), f.into());
    }
    let residual = fit.state.residual();
    bundle.summary = json!({
        "residual": residual,
        "outer_iterations": fit.state.outer_iter,
        "stop": fit.state.stop,
        "stalled": fit.state.stalled,
        "tail": fit.state.tail,
        "recovery": {
            "residual": recovery.residual,
            "iterations": recovery.iterations,
            "converged": recovery.converged,
        },
    });
    bundle.history = serde_json::to_value(&fit.state.history)?;
    bundle.flagged = !fit.converged;
    ctx.write_bundle("calibrate_split.json", &bundle)?;
    println!(
        "residual {} after {} outer iterations ({:?})",
        residual.unwrap_or(f64::NAN),
        fit.state.outer_iter,
        fit.state.stop
    );
    if !fit.converged {
        return Err(NotConverged(format!("splitting stopped on {:?}", fit.state.stop)).into());
    }
    Ok(())
}

fn recover_nu(ctx: &Ctx, tail: &Path, prior: Option<&Path>) -> anyhow::Result<()> {
    let phi = ctx.read_tail(tail)?;
    let prior = match prior {
        Some(p) => ctx.read_nu(p)?,
        None => prior_jump_density(&ctx.grid),
    };
    let rec = workflow::recover_nu(&ctx.cfg, &ctx.grid, &phi, &prior)?;
    write_nodal(&ctx.path("nu.csv"), &ctx.grid, &rec.density.nu)?;
    if ctx.plots {
        write_tail_curve(ctx, &phi, Some(&rec.density))?;
    }
    let mut bundle = ctx.bundle();
    bundle.files.insert("nu".into(), "nu.csv".into());
    bundle.summary = json!({
        "residual": rec.residual,
        "objective": rec.objective,
        "iterations": rec.iterations,
        "converged": rec.converged,
    });
    bundle.flagged = !rec.converged;
    ctx.write_bundle("recover_nu.json", &bundle)?;
    println!("tail residual {} after {} iterations", rec.residual, rec.iterations);
    if !rec.converged {
        return Err(NotConverged("jump recovery hit its iteration limit".into()).into());
    }
    Ok(())
}

fn mc_exotics(ctx: &Ctx, bundle_path: &Path, dupire: Option<&Path>) -> anyhow::Result<()> {
    let calibrated = Bundle::read(bundle_path)?;
    let dir = bundle_path.parent().unwrap_or(Path::new("."));
    let file = |key: &str| -> anyhow::Result<PathBuf> {
        let name = calibrated
            .files
            .get(key)
            .ok_or_else(|| Error::Config(format!("bundle lists no '{key}' file")))?;
        Ok(dir.join(name))
    };
    let vol = ctx.read_vol(&file("vol")?)?;
    let nu = ctx.read_nu(&file("nu")?)?;
    let dupire_vol = match dupire {
        Some(p) => ctx.read_vol(p)?,
        None => {
            let quotes = read_quotes(&file("quotes")?, Provenance::Market)?;
            let fit = workflow::calibrate_vol(&ctx.cfg, &ctx.grid, &quotes, &TailFunction::zero(&ctx.grid))?;
            write_surface(&ctx.path("dupire_vol.csv"), &ctx.grid, &fit.vol.0)?;
            fit.vol
        }
    };
    let no_jumps = JumpDensity::zero(&ctx.grid);
    let true_vol = reference_vol_surface(&ctx.grid);
    let (true_nu, _) = reference_jump_density(&ctx.grid);
    let tables = lookback_tables(
        ModelSpec {
            vol: &vol,
            nu: &nu,
            scheme: Scheme::EulerJump,
        },
        ModelSpec {
            vol: &dupire_vol,
            nu: &no_jumps,
            scheme: Scheme::EulerDupire,
        },
        ModelSpec {
            vol: &true_vol,
            nu: &true_nu,
            scheme: Scheme::EulerJump,
        },
        &ctx.grid,
        &ctx.cfg.paths,
        &ctx.cfg.market,
    )?;
    let mut bundle = ctx.bundle();
    for (name, table) in [
        ("lookback_call", &tables.call),
        ("lookback_put", &tables.put),
        ("lookback_put_verbatim", &tables.put_verbatim),
    ] {
        let prices = format!("{name}_prices.csv");
        let errors = format!("{name}_errors.csv");
        let mut w = BufWriter::new(fs::File::create(ctx.path(&prices))?);
        writeln!(w, "model,{}", join(&table.maturities))?;
        for row in &table.rows {
            writeln!(w, "{},{}", row.label, join(&row.prices))?;
            writeln!(w, "{} SE,{}", row.label, join(&row.std_errors))?;
        }
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(ctx.path(&errors))?);
        writeln!(w, "model,{}", join(&table.maturities))?;
        for (row, errs) in table.rows.iter().zip(&table.errors) {
            writeln!(w, "{},{}", row.label, join(errs))?;
        }
        w.flush()?;
        bundle.files.insert(format!("{name}_prices"), prices);
        bundle.files.insert(format!("{name}_errors"), errors);
    }
    bundle.summary = serde_json::to_value(&tables)?;
    ctx.write_bundle("mc_exotics.json", &bundle)?;
    println!("jump model beats local vol on calls at every maturity: {}", tables.call_ranking_holds);
    Ok(())
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn check_gradients(args: &CheckArgs) -> anyhow::Result<()> {
    let (steps, nodes) = args
        .grid
        .split_once('x')
        .and_then(|(s, n)| Some((s.parse::<usize>().ok()?, n.parse::<usize>().ok()?)))
        .filter(|&(s, n)| s > 0 && n >= 3 && n % 2 == 1)
        .ok_or_else(|| Error::Config(format!("grid must be STEPSxNODES with an odd node count, got '{}'", args.grid)))?;
    let (model, a, phi, obs) = jumpcal::adjoint::check_problem(steps, nodes / 2)?;
    let (mode, gate) = match args.mode {
        ModeArg::Discrete => (AdjointMode::Discrete, 1e-4),
        ModeArg::Continuous => (AdjointMode::Continuous, 1e-2),
    };
    let check = model.check_gradients(&a, &phi, &obs, mode, args.directions, args.eps, args.seed)?;
    let pass = check.vol < gate && check.tail < gate;
    println!("grad_vol max relative error {:.3e}", check.vol);
    println!("grad_tail max relative error {:.3e}", check.tail);
    println!("{} (gate {gate:e})", if pass { "PASS" } else { "FAIL" });
    if !pass {
        return Err(Error::NumericalBreakdown {
            step: 0,
            detail: "adjoint gradients disagree with finite differences".into(),
        }
        .into());
    }
    Ok(())
}

fn quotes_import(ctx: &Ctx, market: &Path, s0: f64, r: f64) -> anyhow::Result<()> {
    let params = jumpcal::MarketParams::new(r, s0)?;
    let (quotes, rejected) = import_market_quotes(market, &params)?;
    for rej in &rejected {
        eprintln!("rejected line {}: {}", rej.line, rej.reason);
    }
    println!("{} quotes imported, {} rejected", quotes.quotes.len(), rejected.len());
    write_quotes(&ctx.path("quotes.csv"), &quotes.with_implied_vols(r))?;
    ctx.write_json("rejected.json", &rejected)
}
