//! Batch front door: `mdspde <command> --config run.toml [flags]`.
//!
//! Every command validates the whole configuration first, writes its result
//! files and a `manifest.json` into the output directory, and prints its
//! primary JSON report on stdout. Exit codes: 0 on success, 2 when the model
//! fails the structural hypotheses, 1 on any other error.

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{Format, ModelSection, OutputSection, RegimeSection, RunConfig, RunSection};

use crate::averaging::{sample_invariant, solve_averaged, InvariantPolicy};
use crate::dynamics::{run_slow_fast, simulate_slow_fast, zero_state, ControlSpec, Regime, RegimeParams, SimOptions};
use crate::error::{Error, Result};
use crate::kolmogorov::{psi2_matrix, Psi2Config};
use crate::mdp_rate::{
    control_cost, optimal_controls, rate_functional_with, solve_limit_equation, AveragedOperators, QPolicy, SmoothPath,
};
use crate::model::ModelSpec;
use crate::occupation::{build_occupation, decoupling_test, DecouplingConfig};
use crate::rare_event::{
    averaged_reference, estimate_importance_with, estimate_plain_with, mdp_asymptote, EventSpec, Method, SearchConfig,
};
use crate::spectral::Field;
use crate::stats::mean_se;

/// Environment variable consulted when neither `--seed` nor `run.seed` is set.
pub const SEED_ENV: &str = "MDSPDE_SEED";

#[derive(Debug, Parser)]
#[command(name = "mdspde", version, about = "Moderate deviations for slow-fast stochastic reaction-diffusion systems")]
#[command(subcommand_required = true)]
struct Cli {
    /// Worker threads (defaults to the number of logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the structural hypotheses and print the derived constants.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the slow-fast system and compare it with the averaged path.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Solve the averaged equation from the zero state.
    Average {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Sample the invariant measure of the frozen fast equation.
    Invariant {
        #[command(flatten)]
        common: Common,
        /// Frozen slow state as comma-separated coefficients (zero by default).
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Estimate the Poisson-equation matrix on the leading modes.
    Psi2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        /// Use the regime's discount `c(ε)` instead of zero.
        #[arg(long)]
        discounted: bool,
    },
    /// Evaluate the rate functional of a path.
    Rate {
        #[command(flatten)]
        common: Common,
        /// `zero` or `linear:mode=K,slope=S` (ψ(t) = S·t·e_K).
        #[arg(long)]
        psi: String,
    },
    /// Build the optimal controls of a path and check their cost.
    Controls {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        psi: String,
    },
    /// Build the occupation measure of one path and run the decoupling test.
    Occupation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 4)]
        modes: usize,
        #[arg(long)]
        horizon: Option<f64>,
        /// Use windows of width `δ` instead of `Δ(ε)`.
        #[arg(long)]
        negative_control: bool,
    },
    /// Estimate an event probability by plain or importance sampling.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// `terminal_norm:R`, `sup_norm:R` or `terminal_mode:K,R`.
        #[arg(long)]
        event: EventSpec,
        #[arg(long, default_value = "plain")]
        method: MethodArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        /// Importance-sampling target; the minimizing path of the asymptote search by default.
        #[arg(long)]
        psi: Option<String>,
        #[arg(long)]
        energy_cap: Option<f64>,
    },
    /// Minimize the rate over linear paths reaching an event.
    Asymptote {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        event: EventSpec,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Plain,
    Is,
}

/// Target path given on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsiArg {
    Zero,
    /// `ψ(t) = slope·t·e_mode`, mode 1-based.
    Linear {
        mode: usize,
        slope: f64,
    },
}

impl std::str::FromStr for PsiArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed path {s:?} (expected zero or linear:mode=K,slope=S)"));
        if s.trim() == "zero" {
            return Ok(Self::Zero);
        }
        let args = s.trim().strip_prefix("linear:").ok_or_else(bad)?;
        let (mut mode, mut slope) = (None, None);
        for kv in args.split(',') {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            match k.trim() {
                "mode" => mode = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
                "slope" => slope = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        match (mode, slope) {
            (Some(mode), Some(slope)) if mode >= 1 && slope.is_finite() => Ok(Self::Linear { mode, slope }),
            _ => Err(bad()),
        }
    }
}

impl PsiArg {
    pub fn build(&self, model: &ModelSpec, t_end: f64, dt: f64) -> Result<SmoothPath> {
        match *self {
            Self::Zero => SmoothPath::zero(&model.slow, t_end, dt),
            Self::Linear { mode, slope } => {
                if mode > model.modes() {
                    return Err(Error::InvalidInput(format!("path mode {mode} outside 1..={}", model.modes())));
                }
                SmoothPath::linear(&model.slow, mode - 1, slope * t_end, t_end, dt)
            }
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'a str,
    config: &'a str,
    config_sha256: String,
    seed: u64,
    n: Option<usize>,
    files: &'a [String],
}

/// State shared by all commands after the configuration is resolved.
struct Ctx {
    cfg: RunConfig,
    text: String,
    model: ModelSpec,
    regime: RegimeParams,
    seed: u64,
    out: PathBuf,
    files: Vec<String>,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let (mut cfg, text) = RunConfig::load(&common.config)?;
        if let Some(r) = common.regime {
            cfg.regime.regime = r;
            if r == Regime::R1 {
                cfg.regime.gamma = None;
            }
        }
        if let Some(e) = common.epsilon {
            cfg.regime.epsilon = e;
        }
        if let Some(g) = common.gamma {
            cfg.regime.gamma = Some(g);
        }
        let model = cfg.model()?;
        let regime = cfg.regime()?;
        let seed = match (common.seed, cfg.run.seed) {
            (Some(s), _) | (None, Some(s)) => s,
            _ => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?,
                Err(_) => 0,
            },
        };
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
        fs::create_dir_all(&out)?;
        Ok(Self { cfg, text, model, regime, seed, out, files: Vec::new() })
    }

    fn sim_dt(&self, flag: Option<f64>) -> f64 {
        flag.or(self.cfg.run.dt).unwrap_or_else(|| self.regime.max_dt())
    }

    fn q_policy(&self) -> QPolicy {
        let mut p = QPolicy::for_model(&self.model).with_seed(self.seed);
        p.q_samples = self.cfg.run.q_samples;
        p.psi2.mc_paths = self.cfg.run.psi2_paths;
        p.invariant.count = self.cfg.run.invariant_samples;
        p
    }

    fn invariant_policy(&self) -> InvariantPolicy {
        InvariantPolicy { count: self.cfg.run.invariant_samples, ..InvariantPolicy::default() }.with_seed(self.seed)
    }

    fn write_file(&mut self, name: &str, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(self.out.join(name))?);
        fill(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        if self.cfg.wants(Format::Csv) {
            self.write_file(name, fill)?;
        }
        Ok(())
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        if self.cfg.wants(Format::Json) {
            let text = to_pretty(value);
            self.write_file(name, |w| Ok(writeln!(w, "{text}")?))?;
        }
        Ok(())
    }

    fn finish(&mut self, command: &str, argv: &[String], n: Option<usize>) -> Result<()> {
        let hash = Sha256::digest(self.text.as_bytes());
        let manifest = Manifest {
            command,
            argv,
            version: env!("CARGO_PKG_VERSION"),
            config: &self.text,
            config_sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
            seed: self.seed,
            n,
            files: &self.files,
        };
        let text = to_pretty(&manifest);
        fs::write(self.out.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn tagged(stem: &str, seed: u64, n: usize, ext: &str) -> String {
    format!("{stem}_seed{seed}_n{n}.{ext}")
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(w) = cli.workers {
        // fails harmlessly when the global pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build_global();
    }
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(report) => {
            // a closed pipe on stdout is not an error of the run
            let _ = writeln!(std::io::stdout().lock(), "{}", to_pretty(&report));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Hypothesis(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(command: Command, argv: &[String]) -> Result<Value> {
    match command {
        Command::Validate { common } => {
            let mut ctx = Ctx::new(&common)?;
            let report = ctx.model.validate_hypotheses();
            let value = json!({ "report": report, "failures": report.failures() });
            ctx.json("hypotheses.json", &value)?;
            ctx.finish("validate", argv, None)?;
            report.require()?;
            Ok(value)
        }
        Command::Simulate { common, n, dt } => {
            let mut ctx = Ctx::new(&common)?;
            let v = simulate(&mut ctx, n, dt)?;
            ctx.finish("simulate", argv, Some(n))?;
            Ok(v)
        }
        Command::Average { common, dt } => {
            let mut ctx = Ctx::new(&common)?;
            let v = average(&mut ctx, dt)?;
            ctx.finish("average", argv, None)?;
            Ok(v)
        }
        Command::Invariant { common, x, n } => {
            let mut ctx = Ctx::new(&common)?;
            let n = n.unwrap_or(ctx.cfg.run.invariant_samples);
            let v = invariant(&mut ctx, x.as_deref(), n)?;
            ctx.finish("invariant", argv, Some(n))?;
            Ok(v)
        }
        Command::Psi2 { common, m, paths, t_max, dt, discounted } => {
            let mut ctx = Ctx::new(&common)?;
            let base = Psi2Config::for_model(&ctx.model);
            let cfg = Psi2Config {
                m: m.unwrap_or(base.m),
                mc_paths: paths.unwrap_or(base.mc_paths),
                t_max: t_max.or(base.t_max),
                dt: dt.unwrap_or(base.dt),
                seed: ctx.seed,
            };
            let v = psi2(&mut ctx, &cfg, discounted)?;
            ctx.finish("psi2", argv, Some(cfg.mc_paths))?;
            Ok(v)
        }
        Command::Rate { common, psi } => {
            let psi: PsiArg = psi.parse()?;
            let mut ctx = Ctx::new(&common)?;
            let v = rate(&mut ctx, &psi, false)?;
            ctx.finish("rate", argv, Some(ctx.cfg.run.q_samples))?;
            Ok(v)
        }
        Command::Controls { common, psi } => {
            let psi: PsiArg = psi.parse()?;
            let mut ctx = Ctx::new(&common)?;
            let v = rate(&mut ctx, &psi, true)?;
            ctx.finish("controls", argv, Some(ctx.cfg.run.q_samples))?;
            Ok(v)
        }
        Command::Occupation { common, dt, modes, horizon, negative_control } => {
            let mut ctx = Ctx::new(&common)?;
            let v = occupation(&mut ctx, dt, modes, horizon, negative_control)?;
            ctx.finish("occupation", argv, Some(1))?;
            Ok(v)
        }
        Command::Estimate { common, event, method, n, dt, psi, energy_cap } => {
            let psi = psi.map(|p| p.parse::<PsiArg>()).transpose()?;
            let mut ctx = Ctx::new(&common)?;
            let n = n.unwrap_or(ctx.cfg.run.paths);
            let v = estimate(&mut ctx, &event, method, n, dt, psi, energy_cap)?;
            ctx.finish("estimate", argv, Some(n))?;
            Ok(v)
        }
        Command::Asymptote { common, event } => {
            let mut ctx = Ctx::new(&common)?;
            ctx.model.validate_hypotheses().require()?;
            let a = mdp_asymptote(&ctx.model, &ctx.regime, &event, &search_config(&ctx))?;
            let v = json!({
                "event": event,
                "regime": ctx.regime,
                "asymptote": a,
            });
            let name = tagged("asymptote", ctx.seed, ctx.cfg.run.q_samples, "json");
            ctx.json(&name, &v)?;
            ctx.finish("asymptote", argv, Some(ctx.cfg.run.q_samples))?;
            Ok(v)
        }
    }
}

fn search_config(ctx: &Ctx) -> SearchConfig {
    SearchConfig {
        t_end: ctx.cfg.run.t_end,
        dt: ctx.cfg.run.psi_dt,
        policy: ctx.q_policy(),
        ..SearchConfig::for_model(&ctx.model)
    }
}

fn simulate(ctx: &mut Ctx, n: usize, dt: Option<f64>) -> Result<Value> {
    if n == 0 {
        return Err(Error::InvalidInput("--n must be positive".into()));
    }
    ctx.model.validate_hypotheses().require()?;
    let (model, regime, seed, t_end) = (&ctx.model, &ctx.regime, ctx.seed, ctx.cfg.run.t_end);
    let dt = ctx.sim_dt(dt);
    let xbar = averaged_reference(model, t_end, dt, seed)?;
    let (x0, y0) = zero_state(model);
    let control = ControlSpec::zero();
    let keep = ctx.cfg.wants(Format::Csv) || ctx.cfg.wants(Format::Binary);
    let runs = (0..n as u64)
        .into_par_iter()
        .map(|p| {
            let mut sup = 0.0f64;
            let mut rows: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
            let opts = SimOptions { stream: p, ..Default::default() };
            let out = run_slow_fast(model, regime, &control, &x0, &y0, t_end, dt, seed, opts, |s| {
                let d: f64 = s.x.iter().zip(&xbar.x[s.step].coeffs).map(|(a, b)| (a - b).powi(2)).sum();
                sup = sup.max(d.sqrt());
                if keep {
                    rows.push((s.t, s.x.to_vec(), s.y.to_vec()));
                }
            })?;
            Ok((sup, rows, out.dt))
        })
        .collect::<Result<Vec<_>>>()?;
    let sups: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let err = mean_se(&sups);
    if ctx.cfg.wants(Format::Csv) {
        let name = tagged("simulate", seed, n, "csv");
        ctx.write_file(&name, |w| {
            writeln!(w, "path,t,component,mode,value")?;
            for (p, (_, rows, _)) in runs.iter().enumerate() {
                for (name, pick) in [("x", 1usize), ("y", 2)] {
                    for row in rows {
                        let coeffs = if pick == 1 { &row.1 } else { &row.2 };
                        for (k, v) in coeffs.iter().enumerate() {
                            writeln!(w, "{p},{},{name},{},{v:e}", row.0, k + 1)?;
                        }
                    }
                }
            }
            Ok(())
        })?;
    }
    if ctx.cfg.wants(Format::Binary) {
        // one bundle per path, concatenated; each record is self-delimiting
        let name = tagged("simulate", seed, n, "bin");
        let model = &ctx.model;
        let bundles = (0..n as u64)
            .map(|p| {
                crate::dynamics::simulate_slow_fast_with(
                    model,
                    &ctx.regime,
                    &control,
                    &x0,
                    &y0,
                    t_end,
                    dt,
                    seed,
                    SimOptions { stream: p, ..Default::default() },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        ctx.write_file(&name, |w| {
            for b in &bundles {
                b.write_binary(&mut *w)?;
            }
            Ok(())
        })?;
    }
    let v = json!({
        "epsilon": ctx.regime.epsilon,
        "regime": ctx.regime,
        "t_end": t_end,
        "dt": runs[0].2,
        "n": n,
        "seed": seed,
        "sup_error_mean": err.mean,
        "sup_error_se": if err.se.is_nan() { 0.0 } else { err.se },
        "sup_errors": sups,
    });
    ctx.json(&tagged("simulate", seed, n, "json"), &v)?;
    Ok(v)
}

fn average(ctx: &mut Ctx, dt: Option<f64>) -> Result<Value> {
    ctx.model.validate_hypotheses().require_dissipative()?;
    let dt = dt.or(ctx.cfg.run.dt).unwrap_or(ctx.cfg.run.psi_dt);
    let policy = ctx.invariant_policy();
    let xbar = solve_averaged(&ctx.model, &ctx.model.slow.zeros(), ctx.cfg.run.t_end, dt, &policy)?;
    let (seed, n) = (ctx.seed, policy.count);
    ctx.csv(&tagged("average", seed, n, "csv"), |w| xbar.write_csv(w))?;
    let last = xbar.x.last().expect("non-empty path");
    let v = json!({
        "t_end": xbar.t_end(),
        "dt": xbar.dt,
        "seed": seed,
        "invariant_samples": n,
        "terminal": last.coeffs,
        "terminal_norm": last.norm(),
    });
    ctx.json(&tagged("average", seed, n, "json"), &v)?;
    Ok(v)
}

fn parse_field(model: &ModelSpec, text: Option<&str>) -> Result<Field> {
    let Some(text) = text else {
        return Ok(model.slow.zeros());
    };
    let mut coeffs = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad coefficient {v:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if coeffs.len() > model.modes() {
        return Err(Error::InvalidInput(format!("{} coefficients for {} modes", coeffs.len(), model.modes())));
    }
    coeffs.resize(model.modes(), 0.0);
    model.slow.field(coeffs)
}

fn invariant(ctx: &mut Ctx, x: Option<&str>, n: usize) -> Result<Value> {
    ctx.model.validate_hypotheses().require_dissipative()?;
    let x = parse_field(&ctx.model, x)?;
    let dt = InvariantPolicy::default().dt;
    let inv = sample_invariant(&ctx.model, &x, n, None, None, dt, ctx.seed)?;
    let seed = ctx.seed;
    ctx.csv(&tagged("invariant", seed, n, "csv"), |w| inv.write_csv(w))?;
    let per_mode: Vec<Value> = (0..ctx.model.modes())
        .map(|k| {
            let vals = inv.mode_values(k);
            let m = mean_se(&vals);
            let var = vals.iter().map(|v| (v - m.mean).powi(2)).sum::<f64>() / (vals.len().max(2) - 1) as f64;
            json!({ "mode": k + 1, "mean": m.mean, "variance": var })
        })
        .collect();
    let v = json!({
        "frozen_x": x.coeffs,
        "samples": inv.len(),
        "chains": inv.chains,
        "burn_in": inv.burn_in,
        "thinning": inv.thinning,
        "seed": seed,
        "modes": per_mode,
    });
    ctx.json(&tagged("invariant", seed, n, "json"), &v)?;
    Ok(v)
}

fn psi2(ctx: &mut Ctx, cfg: &Psi2Config, discounted: bool) -> Result<Value> {
    ctx.model.validate_hypotheses().require_dissipative()?;
    let (x, y) = zero_state(&ctx.model);
    let discount = if discounted { ctx.regime.c_eps } else { 0.0 };
    let mat = psi2_matrix(&ctx.model, &x, &y, cfg, discount)?;
    let (seed, n) = (ctx.seed, cfg.mc_paths);
    ctx.csv(&tagged("psi2", seed, n, "csv"), |w| mat.write_csv(w))?;
    let rows: Vec<Vec<f64>> = mat.entries.row_iter().map(|r| r.iter().copied().collect()).collect();
    let v = json!({
        "m": mat.dim(),
        "discount": mat.discount,
        "t_max": mat.t_max,
        "dt": mat.dt,
        "mc_paths": mat.mc_paths,
        "tail_bound": mat.tail_bound,
        "norm": mat.norm(),
        "se_norm": mat.se_norm(),
        "seed": seed,
        "entries": rows,
    });
    ctx.json(&tagged("psi2", seed, n, "json"), &v)?;
    Ok(v)
}

fn rate(ctx: &mut Ctx, psi: &PsiArg, with_controls: bool) -> Result<Value> {
    ctx.model.validate_hypotheses().require()?;
    let (t_end, dt) = (ctx.cfg.run.t_end, ctx.cfg.run.psi_dt);
    let path = psi.build(&ctx.model, t_end, dt)?;
    let policy = ctx.q_policy();
    let xbar = solve_averaged(&ctx.model, &ctx.model.slow.zeros(), t_end, dt, &policy.invariant)?;
    let ops = AveragedOperators::build(&ctx.model, &ctx.regime, &xbar, &policy)?;
    let report = rate_functional_with(&ctx.model, &ops, &path)?;
    let (seed, n) = (ctx.seed, policy.q_samples);
    if !with_controls {
        ctx.csv(&tagged("rate", seed, n, "csv"), |w| {
            writeln!(w, "t,weighted_residual,residual_norm")?;
            for (t, a, b) in &report.per_t {
                writeln!(w, "{t},{a:e},{b:e}")?;
            }
            Ok(())
        })?;
        let v = serde_json::to_value(&report).expect("report serializes");
        ctx.json(&tagged("rate", seed, n, "json"), &v)?;
        return Ok(v);
    }
    let spec = optimal_controls(&ctx.model, &ops, &path)?.into_spec();
    let cost = control_cost(&ctx.model, &spec, &xbar, &policy.invariant)?;
    let limit = solve_limit_equation(&ctx.model, &ops, &spec, t_end, dt)?;
    let sup_err = path.psi.iter().zip(&limit.path.psi).map(|(a, b)| a.sub(b).norm()).fold(0.0, f64::max);
    ctx.csv(&tagged("controls", seed, n, "csv"), |w| {
        writeln!(w, "t,mode,psi,limit")?;
        for ((t, a), b) in path.times.iter().zip(&path.psi).zip(&limit.path.psi) {
            for (k, (p, q)) in a.coeffs.iter().zip(&b.coeffs).enumerate() {
                writeln!(w, "{t},{},{p:e},{q:e}", k + 1)?;
            }
        }
        Ok(())
    })?;
    let v = json!({
        "regime": report.regime,
        "gamma": report.gamma,
        "S": report.s,
        "control_cost": cost.mean,
        "control_cost_se": cost.se,
        "cost_gap": cost.mean - report.s,
        "mild_residual": limit.mild_residual,
        "limit_sup_error": sup_err,
        "seed": seed,
    });
    ctx.json(&tagged("controls", seed, n, "json"), &v)?;
    Ok(v)
}

fn occupation(
    ctx: &mut Ctx,
    dt: Option<f64>,
    modes: usize,
    horizon: Option<f64>,
    negative_control: bool,
) -> Result<Value> {
    ctx.model.validate_hypotheses().require()?;
    let mut regime = ctx.regime;
    if negative_control {
        regime = regime.with_delta_occ(regime.delta)?;
    }
    let seed = ctx.seed;
    let horizon = horizon.unwrap_or(ctx.cfg.run.t_end);
    // the kernel at t reads the fast path on [t, t + Δ]
    let t_end = horizon + regime.delta_occ;
    let dt = ctx.sim_dt(dt);
    let xbar = averaged_reference(&ctx.model, t_end, dt, seed)?;
    let (x0, y0) = zero_state(&ctx.model);
    let bundle = simulate_slow_fast(&ctx.model, &regime, &ControlSpec::zero(), &x0, &y0, t_end, dt, seed)?;
    let occ = build_occupation(&bundle, &regime, Some(horizon))?;
    let cfg = DecouplingConfig { mu_samples: ctx.cfg.run.invariant_samples, ..DecouplingConfig::default() };
    let report = decoupling_test(&occ, &ctx.model, &regime, &xbar, modes.min(ctx.model.modes()), seed, &cfg)?;
    ctx.csv(&tagged("occupation", seed, 1, "csv"), |w| occ.write_csv(w))?;
    let v = json!({
        "delta_occ": regime.delta_occ,
        "horizon": horizon,
        "negative_control": negative_control,
        "pass_rate": report.pass_rate(),
        "failures": report.failures(),
        "report": report,
    });
    ctx.json(&tagged("decoupling", seed, 1, "json"), &v)?;
    Ok(v)
}

fn estimate(
    ctx: &mut Ctx,
    event: &EventSpec,
    method: MethodArg,
    n: usize,
    dt: Option<f64>,
    psi: Option<PsiArg>,
    energy_cap: Option<f64>,
) -> Result<Value> {
    let (t_end, seed) = (ctx.cfg.run.t_end, ctx.seed);
    let dt = ctx.sim_dt(dt);
    ctx.model.validate_hypotheses().require()?;
    let xbar = averaged_reference(&ctx.model, t_end, dt, seed)?;
    let est = match method {
        MethodArg::Plain => estimate_plain_with(&ctx.model, &ctx.regime, event, n, t_end, dt, seed, &xbar)?,
        MethodArg::Is => {
            let target = match psi {
                Some(p) => p.build(&ctx.model, t_end, ctx.cfg.run.psi_dt)?,
                None => mdp_asymptote(&ctx.model, &ctx.regime, event, &search_config(ctx))?.path,
            };
            let policy = ctx.q_policy();
            estimate_importance_with(
                &ctx.model,
                &ctx.regime,
                event,
                &target,
                n,
                t_end,
                dt,
                seed,
                &xbar,
                &policy,
                energy_cap,
            )?
        }
    };
    let stem = match est.method {
        Method::Plain => "estimate_plain",
        Method::Importance => "estimate_is",
    };
    let v = json!({
        "event": event,
        "epsilon": ctx.regime.epsilon,
        "h": ctx.regime.h,
        "dt": dt,
        "se": est.se(),
        "estimate": est,
    });
    ctx.json(&tagged(stem, seed, n, "json"), &v)?;
    Ok(v)
}

/// Reads a manifest written by an earlier run.
pub fn read_manifest(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("manifest: {e}")))
}
