//! Plain and importance-sampling estimates of moderate-deviation
//! probabilities `P(η^ε ∈ A)`, and the rate asymptote they track.
//!
//! The importance sampler drives the system with the optimal controls of a
//! target path. All supported events are symmetric under `η ↦ −η`, so paths
//! are drawn from the equal mixture of the shifts towards `ψ` and `−ψ`
//! (alternating by stream) and weighted by `dP/dQ̄` of the mixture.

use std::f64::consts::LN_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{solve_averaged, InvariantPolicy};
use crate::dynamics::{run_slow_fast, time_grid, zero_state, ControlSpec, PathBundle, RegimeParams, SimOptions};
use crate::error::{invalid, Error, Result};
use crate::mdp_rate::{optimal_controls, rate_functional_with, AveragedOperators, QPolicy, SmoothPath};
use crate::model::ModelSpec;
use crate::stats::{log_sum_exp, mean_se};

/// Events on `η`, all with level `r ≥ 0`. Modes are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventSpec {
    /// `‖η(T)‖ ≥ r`.
    TerminalNorm { r: f64 },
    /// `sup_t ‖η(t)‖ ≥ r`.
    SupNorm { r: f64 },
    /// `|⟨η(T), e_mode⟩| ≥ r`.
    TerminalMode { mode: usize, r: f64 },
}

impl EventSpec {
    pub fn level(&self) -> f64 {
        match *self {
            Self::TerminalNorm { r } | Self::SupNorm { r } | Self::TerminalMode { r, .. } => r,
        }
    }

    fn check(&self, model: &ModelSpec) -> Result<()> {
        let r = self.level();
        if !(r >= 0.0 && r.is_finite()) {
            return invalid(format!("event level must be finite and non-negative, got {r}"));
        }
        if let Self::TerminalMode { mode, .. } = *self {
            if mode == 0 || mode > model.modes() {
                return invalid(format!("event mode {mode} outside 1..={}", model.modes()));
            }
        }
        Ok(())
    }

    fn hit(&self, terminal: &[f64], sup: f64) -> bool {
        match *self {
            Self::TerminalNorm { r } => terminal.iter().map(|v| v * v).sum::<f64>().sqrt() >= r,
            Self::SupNorm { r } => sup >= r,
            Self::TerminalMode { mode, r } => terminal[mode - 1].abs() >= r,
        }
    }
}

impl std::str::FromStr for EventSpec {
    type Err = Error;

    /// `terminal_norm:R`, `sup_norm:R` or `terminal_mode:K,R`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s.split_once(':').ok_or_else(|| Error::InvalidInput(format!("malformed event {s:?}")))?;
        let num =
            |v: &str| v.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad number {v:?} in event")));
        match kind.trim() {
            "terminal_norm" => Ok(Self::TerminalNorm { r: num(args)? }),
            "sup_norm" => Ok(Self::SupNorm { r: num(args)? }),
            "terminal_mode" => {
                let (k, r) =
                    args.split_once(',').ok_or_else(|| Error::InvalidInput("terminal_mode needs K,R".into()))?;
                let mode = k.trim().parse::<usize>().map_err(|_| Error::InvalidInput(format!("bad mode {k:?}")))?;
                Ok(Self::TerminalMode { mode, r: num(r)? })
            }
            other => invalid(format!("unknown event kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "is")]
    Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub p_hat: f64,
    #[serde(rename = "rel_err")]
    pub relative_error: f64,
    pub n: usize,
    pub method: Method,
    /// `−log(p̂)/h²`, to be compared with the rate asymptote.
    pub exponent_diag: f64,
    pub second_moment: f64,
    pub seed: u64,
    pub hits: usize,
    /// One-sided 95% upper confidence bound on `p`.
    pub ci_upper: f64,
    /// Paths on which the energy cap scaled the controls down.
    pub clipped: usize,
    /// Mean likelihood ratio over all paths; one in expectation.
    pub mean_weight: f64,
    pub mean_weight_se: f64,
}

impl Estimate {
    /// Standard error `p̂·rel_err`.
    pub fn se(&self) -> f64 {
        self.p_hat * self.relative_error
    }
}

/// Per-path output: weight and whether the event happened.
#[derive(Debug, Clone, Copy)]
struct PathResult {
    weight: f64,
    hit: bool,
    clipped: bool,
}

fn summarize(results: &[PathResult], method: Method, seed: u64, regime: &RegimeParams, balanced: bool) -> Estimate {
    let n = results.len();
    let vals: Vec<f64> = results.iter().map(|r| if r.hit { r.weight } else { 0.0 }).collect();
    let p_hat = if balanced && n >= 2 {
        // equal mixture over the two stream parities
        let part = |par: usize| -> f64 {
            let v: Vec<f64> = vals.iter().skip(par).step_by(2).copied().collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        0.5 * (part(0) + part(1))
    } else {
        vals.iter().sum::<f64>() / n as f64
    };
    let second_moment = vals.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let hits = results.iter().filter(|r| r.hit).count();
    let relative_error = if p_hat > 0.0 {
        ((second_moment / (p_hat * p_hat) - 1.0).max(0.0)).sqrt() / (n as f64).sqrt()
    } else {
        f64::INFINITY
    };
    let ci_upper = if hits == 0 {
        1.0 - 0.05f64.powf(1.0 / n as f64)
    } else {
        p_hat * (1.0 + 1.6448536269514722 * relative_error)
    };
    let weights: Vec<f64> = results.iter().map(|r| r.weight).collect();
    let w = mean_se(&weights);
    Estimate {
        p_hat,
        relative_error,
        n,
        method,
        exponent_diag: -p_hat.ln() / (regime.h * regime.h),
        second_moment,
        seed,
        hits,
        ci_upper,
        clipped: results.iter().filter(|r| r.clipped).count(),
        mean_weight: w.mean,
        mean_weight_se: if w.se.is_nan() { 0.0 } else { w.se },
    }
}

/// `X̄` on the simulation grid, started from the zero state.
pub fn averaged_reference(model: &ModelSpec, t_end: f64, dt: f64, seed: u64) -> Result<PathBundle> {
    solve_averaged(model, &model.slow.zeros(), t_end, dt, &InvariantPolicy::default().with_seed(seed))
}

/// Runs one path from the zero state and records the event outcome.
#[allow(clippy::too_many_arguments)]
fn one_path(
    model: &ModelSpec,
    regime: &RegimeParams,
    control: &ControlSpec,
    event: &EventSpec,
    xbar: &PathBundle,
    t_end: f64,
    dt: f64,
    seed: u64,
    stream: u64,
) -> Result<(bool, crate::dynamics::PathOutcome)> {
    let (x0, y0) = zero_state(model);
    let scale = 1.0 / regime.eta_scale();
    let n = model.modes();
    let mut eta = vec![0.0; n];
    let mut sup = 0.0f64;
    let track_sup = matches!(event, EventSpec::SupNorm { .. });
    let opts = SimOptions { stream, ..Default::default() };
    let out = run_slow_fast(model, regime, control, &x0, &y0, t_end, dt, seed, opts, |s| {
        let last = s.step + 1 == xbar.len();
        if track_sup || last {
            let xb = &xbar.x[s.step].coeffs;
            for k in 0..n {
                eta[k] = (s.x[k] - xb[k]) * scale;
            }
            if track_sup {
                sup = sup.max(eta.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
    })?;
    Ok((event.hit(&eta, sup), out))
}

fn check_run(model: &ModelSpec, event: &EventSpec, n: usize, t_end: f64, dt: f64, xbar: &PathBundle) -> Result<()> {
    model.validate_hypotheses().require()?;
    event.check(model)?;
    if n == 0 {
        return invalid("need at least one path");
    }
    let (steps, _) = time_grid(t_end, dt)?;
    if xbar.len() != steps + 1 || (xbar.t_end() - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::GridMismatch(format!(
            "reference has {} points, simulation needs {}",
            xbar.len(),
            steps + 1
        )));
    }
    Ok(())
}

/// Crude Monte Carlo over `n` uncontrolled paths.
pub fn estimate_plain(
    model: &ModelSpec,
    regime: &RegimeParams,
    event: &EventSpec,
    n: usize,
    t_end: f64,
    dt: f64,
    seed: u64,
) -> Result<Estimate> {
    let xbar = averaged_reference(model, t_end, dt, seed)?;
    estimate_plain_with(model, regime, event, n, t_end, dt, seed, &xbar)
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_plain_with(
    model: &ModelSpec,
    regime: &RegimeParams,
    event: &EventSpec,
    n: usize,
    t_end: f64,
    dt: f64,
    seed: u64,
    xbar: &PathBundle,
) -> Result<Estimate> {
    check_run(model, event, n, t_end, dt, xbar)?;
    let control = ControlSpec::zero();
    let results = (0..n as u64)
        .into_par_iter()
        .map(|p| {
            let (hit, _) = one_path(model, regime, &control, event, xbar, t_end, dt, seed, p)?;
            Ok(PathResult { weight: 1.0, hit, clipped: false })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&results, Method::Plain, seed, regime, false))
}

/// Importance sampling with the optimal controls of `±psi_target`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_importance(
    model: &ModelSpec,
    regime: &RegimeParams,
    event: &EventSpec,
    psi_target: &SmoothPath,
    n: usize,
    t_end: f64,
    dt: f64,
    seed: u64,
) -> Result<Estimate> {
    let xbar = averaged_reference(model, t_end, dt, seed)?;
    let policy = QPolicy::for_model(model).with_seed(seed);
    estimate_importance_with(model, regime, event, psi_target, n, t_end, dt, seed, &xbar, &policy, None)
}

/// As [`estimate_importance`], with the reference path, operator policy and
/// an optional energy cap supplied by the caller.
#[allow(clippy::too_many_arguments)]
pub fn estimate_importance_with(
    model: &ModelSpec,
    regime: &RegimeParams,
    event: &EventSpec,
    psi_target: &SmoothPath,
    n: usize,
    t_end: f64,
    dt: f64,
    seed: u64,
    xbar: &PathBundle,
    policy: &QPolicy,
    energy_cap: Option<f64>,
) -> Result<Estimate> {
    check_run(model, event, n, t_end, dt, xbar)?;
    if (psi_target.t_end() - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return invalid(format!("target path ends at {}, simulation at {t_end}", psi_target.t_end()));
    }
    let psi_dt = psi_target.dt();
    let xbar_psi = if (psi_dt - xbar.dt).abs() <= 1e-12 * psi_dt {
        xbar.clone()
    } else {
        solve_averaged(model, &model.slow.zeros(), t_end, psi_dt, &policy.invariant)?
    };
    let ops = AveragedOperators::build(model, regime, &xbar_psi, policy)?;
    let neg = SmoothPath::new(psi_target.times.clone(), psi_target.psi.iter().map(|p| p.scaled(-1.0)).collect())?;
    let mut controls =
        [optimal_controls(model, &ops, psi_target)?.into_spec(), optimal_controls(model, &ops, &neg)?.into_spec()];
    if let Some(cap) = energy_cap {
        for c in &mut controls {
            *c = c.clone().with_energy_cap(cap)?;
        }
    }
    let results = (0..n as u64)
        .into_par_iter()
        .map(|p| {
            let control = &controls[(p % 2) as usize];
            let (hit, out) = one_path(model, regime, control, event, xbar, t_end, dt, seed, p)?;
            // log dP/dQ of the other component along the same path; the two shifts are opposite
            let own = out.log_weight;
            let other = -own + out.shift_sq;
            let log_w = -log_sum_exp([-own - LN_2, -other - LN_2]);
            Ok(PathResult { weight: log_w.exp(), hit, clipped: out.clipped })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&results, Method::Importance, seed, regime, true))
}

/// Settings of the asymptote search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchConfig {
    pub t_end: f64,
    pub dt: f64,
    /// The search runs over `c ∈ [r, factor·r]`.
    pub factor: f64,
    pub tol: f64,
    /// Modes tried for norm events.
    pub max_modes: usize,
    pub policy: QPolicy,
}

impl SearchConfig {
    pub fn for_model(model: &ModelSpec) -> Self {
        Self { t_end: 1.0, dt: 1e-3, factor: 4.0, tol: 1e-10, max_modes: 4, policy: QPolicy::for_model(model) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Asymptote {
    /// `inf S` over the search family.
    pub inf_s: f64,
    /// `−h²·inf S`, the predicted `log p`.
    pub exponent: f64,
    pub c: f64,
    /// 1-based mode of the minimizing path.
    pub mode: usize,
    #[serde(skip)]
    pub path: SmoothPath,
}

/// Minimizes `S_i` over `ψ_c(t) = c·(t/T)·e_k` with `c ≥ r` by golden-section search.
pub fn mdp_asymptote(
    model: &ModelSpec,
    regime: &RegimeParams,
    event: &EventSpec,
    search: &SearchConfig,
) -> Result<Asymptote> {
    event.check(model)?;
    let r = event.level();
    let modes: Vec<usize> = match *event {
        EventSpec::TerminalMode { mode, .. } => vec![mode],
        EventSpec::TerminalNorm { .. } => (1..=search.max_modes.clamp(1, model.modes())).collect(),
        EventSpec::SupNorm { .. } => return invalid("the asymptote search supports terminal events only"),
    };
    if r == 0.0 {
        let path = SmoothPath::zero(&model.slow, search.t_end, search.dt)?;
        return Ok(Asymptote { inf_s: 0.0, exponent: 0.0, c: 0.0, mode: modes[0], path });
    }
    if !(search.factor > 1.0) {
        return Err(Error::SearchBracket(format!("factor {} must exceed one", search.factor)));
    }
    let xbar = solve_averaged(model, &model.slow.zeros(), search.t_end, search.dt, &search.policy.invariant)?;
    let ops = AveragedOperators::build(model, regime, &xbar, &search.policy)?;
    let mut best: Option<Asymptote> = None;
    for mode in modes {
        let s_of = |c: f64| -> Result<f64> {
            let p = SmoothPath::linear(&model.slow, mode - 1, c, search.t_end, search.dt)?;
            Ok(rate_functional_with(model, &ops, &p)?.s)
        };
        let (lo, hi) = (r, search.factor * r);
        let c = golden_section(&s_of, lo, hi, search.tol * r)?;
        if hi - c <= 10.0 * search.tol * r {
            return Err(Error::SearchBracket(format!("minimum at the upper end c = {c} of [{lo}, {hi}]")));
        }
        let s = s_of(c)?;
        if best.as_ref().is_none_or(|b| s < b.inf_s) {
            let path = SmoothPath::linear(&model.slow, mode - 1, c, search.t_end, search.dt)?;
            best = Some(Asymptote { inf_s: s, exponent: -regime.h * regime.h * s, c, mode, path });
        }
    }
    best.ok_or_else(|| Error::SearchBracket("no mode searched".into()))
}

fn golden_section(f: &impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    // compare the interior estimate with the endpoints of the final bracket
    let mid = 0.5 * (a + b);
    let cands = [(a, f(a)?), (mid, f(mid)?), (b, f(b)?)];
    Ok(cands.iter().min_by(|x, y| x.1.total_cmp(&y.1)).expect("three candidates").0)
}
