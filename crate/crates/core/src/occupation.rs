//! Occupation measures `P^{ε,Δ}` of controlled trajectories and the
//! decoupling test of their `y`-marginals against `μ^{X̄(t)}`.
//!
//! The measure puts mass `dt·ds/Δ` on `(u₁(s), u₂(s), Y(s), t)` for
//! `s ∈ [t, t + Δ]`. Controls vanish past the horizon; past the end of the
//! bundle `Y` is held at its last value.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::averaging::sample_invariant_chains;
use crate::dynamics::{interp_index, lerp_into, PathBundle, RegimeParams};
use crate::error::{invalid, Error, Result};
use crate::model::ModelSpec;
use crate::rng::derive_seed;
use crate::spectral::Field;
use crate::stats::{batch_mean_se, batch_var_se, normal_cdf, MeanSe};

const TAG_DECOUPLE: u64 = 0x0CC0_0001;

/// Default bound on the number of stored `(t, s)` cells.
pub const MAX_CELLS: usize = 1_000_000;

/// One `(t, s)` cell of the discrete double integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub t: f64,
    pub s: f64,
    /// Bundle grid index holding `Y(s)` (clamped to the last point).
    pub index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupationMeasure {
    pub cells: Vec<Cell>,
    /// Cells of each `t` node, with its time weight.
    pub slices: Vec<(Range<usize>, f64)>,
    pub delta: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Spacing of the stored `s` nodes in grid steps.
    pub stride: usize,
    y: Vec<Field>,
    u1: Vec<Field>,
    u2: Vec<Field>,
    zero_u1: Field,
    zero_u2: Field,
}

impl OccupationMeasure {
    pub fn total_weight(&self) -> f64 {
        self.cells.iter().map(|c| c.weight).sum()
    }

    /// `P^{ε,Δ}(· × [0, t])`.
    pub fn time_marginal(&self, t: f64) -> f64 {
        self.cells.iter().filter(|c| c.t <= t + 1e-12).map(|c| c.weight).sum()
    }

    pub fn y(&self, c: &Cell) -> &Field {
        &self.y[c.index]
    }

    /// `(u₁(s), u₂(s))`, zero past the horizon.
    pub fn u(&self, c: &Cell) -> (&Field, &Field) {
        if c.s > self.horizon + 1e-12 {
            (&self.zero_u1, &self.zero_u2)
        } else {
            (&self.u1[c.index], &self.u2[c.index])
        }
    }

    /// CSV `t,s,mode,y_value,u1_value,u2_value,weight` (modes 1-based).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,s,mode,y_value,u1_value,u2_value,weight")?;
        for c in &self.cells {
            let (u1, u2) = self.u(c);
            let y = self.y(c);
            for k in 0..y.len() {
                writeln!(
                    w,
                    "{},{},{},{:e},{:e},{:e},{:e}",
                    c.t,
                    c.s,
                    k + 1,
                    y.coeffs[k],
                    u1.coeffs[k],
                    u2.coeffs[k],
                    c.weight
                )?;
            }
        }
        Ok(())
    }
}

/// `P^{ε,Δ}` on `[0, horizon]` (the bundle end when absent), `Δ = regime.delta_occ`.
pub fn build_occupation(bundle: &PathBundle, regime: &RegimeParams, horizon: Option<f64>) -> Result<OccupationMeasure> {
    build_occupation_with(bundle, regime, horizon, MAX_CELLS)
}

pub fn build_occupation_with(
    bundle: &PathBundle,
    regime: &RegimeParams,
    horizon: Option<f64>,
    max_cells: usize,
) -> Result<OccupationMeasure> {
    let n = bundle.len();
    if n < 2 || bundle.y.len() != n {
        return invalid("bundle must contain the fast trajectory");
    }
    if bundle.u1.len() != n || bundle.u2.len() != n {
        return invalid("bundle must contain the controls");
    }
    let dt = bundle.dt;
    let delta = regime.delta_occ;
    if delta < 2.0 * dt * (1.0 - 1e-9) {
        return invalid(format!("window {delta} is shorter than two time steps ({dt})"));
    }
    let t_end = bundle.t_end();
    let horizon = horizon.unwrap_or(t_end);
    if !(horizon > 0.0) || horizon > t_end * (1.0 + 1e-12) {
        return invalid(format!("horizon {horizon} outside (0, {t_end}]"));
    }
    let nt = ((horizon / dt) * (1.0 - 1e-12)).ceil() as usize;
    let span = (delta / dt).round().max(2.0) as usize;
    let stride = ((nt + 1) * (span + 1)).div_ceil(max_cells.max(1)).max(1).min(span / 2);
    let ns = span.div_ceil(stride);

    let mut cells = Vec::with_capacity((nt + 1) * (ns + 1));
    let mut slices = Vec::with_capacity(nt + 1);
    for i in 0..=nt {
        let node = |j: usize| (j as f64 * dt).min(horizon);
        let t = node(i);
        let tw = 0.5 * (if i == 0 { 0.0 } else { t - node(i - 1) } + if i == nt { 0.0 } else { node(i + 1) - t });
        // s nodes i, i+stride, ..., last one at i+span; trapezoid, then normalized to one
        let start = cells.len();
        let mut total = 0.0;
        for j in 0..=ns {
            let off = (j * stride).min(span);
            let h_left = if j == 0 { 0.0 } else { (off - ((j - 1) * stride).min(span)) as f64 };
            let h_right = if j == ns { 0.0 } else { (((j + 1) * stride).min(span) - off) as f64 };
            let sw = 0.5 * (h_left + h_right);
            total += sw;
            cells.push(Cell { t, s: t + off as f64 * dt, index: (i + off).min(n - 1), weight: sw });
        }
        for c in &mut cells[start..] {
            c.weight *= tw / total;
        }
        slices.push((start..cells.len(), tw));
    }
    let basis_u1 = bundle.u1[0].basis;
    let basis_u2 = bundle.u2[0].basis;
    Ok(OccupationMeasure {
        cells,
        slices,
        delta,
        horizon,
        dt,
        stride,
        y: bundle.y.clone(),
        u1: bundle.u1.clone(),
        u2: bundle.u2.clone(),
        zero_u1: Field::zeros(basis_u1),
        zero_u2: Field::zeros(basis_u2),
    })
}

/// Outcome of one `(mode, window)` comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecouplingCell {
    /// 1-based mode.
    pub mode: usize,
    pub window: usize,
    pub t_mid: f64,
    pub occ_mean: f64,
    pub occ_var: f64,
    pub mu_mean: f64,
    pub mu_var: f64,
    pub mean_z: f64,
    pub var_z: f64,
    /// Effective sample size of the occupation mean.
    pub ess: f64,
    pub low_ess: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecouplingReport {
    pub cells: Vec<DecouplingCell>,
    pub passed: usize,
    pub total: usize,
    pub level: f64,
    /// `δh²/Δ`, the ergodic closeness scale (unit constant).
    pub bound: f64,
    pub delta: f64,
}

impl DecouplingReport {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.total.max(1) as f64
    }

    pub fn failures(&self) -> usize {
        self.total - self.passed
    }
}

/// Settings of the decoupling test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecouplingConfig {
    pub windows: usize,
    /// Two-sided significance level of each z-test.
    pub level: f64,
    /// Batches of the occupation-side standard errors.
    pub batches: usize,
    /// Fresh samples of `μ^{X̄(t_mid)}` per window.
    pub mu_samples: usize,
    pub mu_chains: usize,
    pub mu_dt: f64,
}

impl Default for DecouplingConfig {
    fn default() -> Self {
        Self { windows: 4, level: 0.01, batches: 50, mu_samples: 1000, mu_chains: 20, mu_dt: 0.02 }
    }
}

/// Weighted mean and second central moment with batch standard errors.
fn weighted_batches(values: &[(f64, f64)], batches: usize) -> (MeanSe, MeanSe) {
    let total: f64 = values.iter().map(|v| v.1).sum();
    let mean = values.iter().map(|(y, w)| y * w).sum::<f64>() / total;
    let var = values.iter().map(|(y, w)| (y - mean).powi(2) * w).sum::<f64>() / total;
    let b = batches.min(values.len()).max(2);
    let chunk = values.len().div_ceil(b);
    let (mut s_mean, mut s_var, mut used) = (0.0, 0.0, 0usize);
    for part in values.chunks(chunk) {
        let wb: f64 = part.iter().map(|v| v.1).sum();
        if wb <= 0.0 {
            continue;
        }
        let mb = part.iter().map(|(y, w)| y * w).sum::<f64>() / wb;
        let vb = part.iter().map(|(y, w)| (y - mean).powi(2) * w).sum::<f64>() / wb;
        s_mean += (wb / total).powi(2) * (mb - mean).powi(2);
        s_var += (wb / total).powi(2) * (vb - var).powi(2);
        used += 1;
    }
    let corr = if used > 1 { used as f64 / (used as f64 - 1.0) } else { f64::NAN };
    (MeanSe { mean, se: (s_mean * corr).sqrt() }, MeanSe { mean: var, se: (s_var * corr).sqrt() })
}

/// Compares, per mode and time window, the `y`-marginal of `occ` with fresh
/// samples of `μ^{X̄(t_mid)}`.
///
/// The mean test uses the window's aggregated `y`-marginal. The variance test
/// uses the average variance of the kernels `P(dy | t)`, which carries the
/// window width: kernels over windows much shorter than the fast relaxation
/// time are too narrow.
pub fn decoupling_test(
    occ: &OccupationMeasure,
    model: &ModelSpec,
    regime: &RegimeParams,
    xbar: &PathBundle,
    modes_checked: usize,
    seed: u64,
    cfg: &DecouplingConfig,
) -> Result<DecouplingReport> {
    if modes_checked == 0 || modes_checked > model.modes() {
        return invalid(format!("modes_checked must be in 1..={}", model.modes()));
    }
    if cfg.windows == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return invalid("need at least one window and a level in (0, 1)");
    }
    if xbar.x.is_empty() {
        return Err(Error::GridMismatch("averaged path has no slow trajectory".into()));
    }
    let crit = inverse_two_sided(cfg.level);
    let width = occ.horizon / cfg.windows as f64;
    let ny = occ.y.len();

    let per_window = (0..cfg.windows)
        .into_par_iter()
        .map(|wi| -> Result<Vec<DecouplingCell>> {
            let (lo, hi) = (wi as f64 * width, (wi + 1) as f64 * width);
            let last = wi + 1 == cfg.windows;
            let in_window = |t: f64| t >= lo - 1e-12 && (t < hi - 1e-12 || (last && t <= hi + 1e-12));
            let slices: Vec<&(Range<usize>, f64)> =
                occ.slices.iter().filter(|(r, _)| in_window(occ.cells[r.start].t)).collect();
            if slices.is_empty() {
                return invalid("time window holds no occupation mass");
            }
            let t_mid = 0.5 * (lo + hi);
            let mut xm = vec![0.0; model.modes()];
            let (i, w) = interp_index(&xbar.times, t_mid);
            lerp_into(&xbar.x[i].coeffs, &xbar.x[(i + 1).min(xbar.x.len() - 1)].coeffs, w, &mut xm);
            let xm = model.slow.field(xm)?;
            let inv = sample_invariant_chains(
                model,
                &xm,
                cfg.mu_samples,
                cfg.mu_chains,
                None,
                None,
                cfg.mu_dt,
                derive_seed(derive_seed(seed, TAG_DECOUPLE), wi as u64),
            )?;
            let mu_batches = inv.batches();

            // aggregated weight of every bundle index touched by the window
            let mut agg = vec![0.0; ny];
            for (r, _) in &slices {
                for c in &occ.cells[r.clone()] {
                    agg[c.index] += c.weight;
                }
            }
            let window_mass: f64 = slices.iter().map(|(_, tw)| tw).sum();

            let mut out = Vec::with_capacity(modes_checked);
            for k in 0..modes_checked {
                let values: Vec<(f64, f64)> =
                    agg.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(j, w)| (occ.y[j].coeffs[k], *w)).collect();
                let (m_occ, v_agg) = weighted_batches(&values, cfg.batches);
                // mean over t of Var(P(dy | t))
                let mut kernel_var = 0.0;
                for (r, tw) in &slices {
                    let cs = &occ.cells[r.clone()];
                    let mean = cs.iter().map(|c| c.weight * occ.y[c.index].coeffs[k]).sum::<f64>() / tw;
                    let sq = cs.iter().map(|c| c.weight * occ.y[c.index].coeffs[k].powi(2)).sum::<f64>() / tw;
                    kernel_var += tw * (sq - mean * mean);
                }
                kernel_var /= window_mass;

                let vals = inv.mode_values(k);
                let mu_m = batch_mean_se(&vals, &mu_batches);
                let mu_v = batch_var_se(&vals, &mu_batches);
                let mean_z = (m_occ.mean - mu_m.mean) / (m_occ.se.powi(2) + mu_m.se.powi(2)).sqrt();
                let var_z = (kernel_var - mu_v.mean) / (v_agg.se.powi(2) + mu_v.se.powi(2)).sqrt();
                let ess = if m_occ.se > 0.0 { v_agg.mean / m_occ.se.powi(2) } else { f64::INFINITY };
                let passed = mean_z.abs() < crit && var_z.abs() < crit;
                out.push(DecouplingCell {
                    mode: k + 1,
                    window: wi,
                    t_mid,
                    occ_mean: m_occ.mean,
                    occ_var: kernel_var,
                    mu_mean: mu_m.mean,
                    mu_var: mu_v.mean,
                    mean_z,
                    var_z,
                    ess,
                    low_ess: ess < 100.0,
                    passed,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<DecouplingCell> = per_window.into_iter().flatten().collect();
    let passed = cells.iter().filter(|c| c.passed).count();
    Ok(DecouplingReport {
        total: cells.len(),
        passed,
        cells,
        level: cfg.level,
        bound: regime.delta * regime.h * regime.h / occ.delta,
        delta: occ.delta,
    })
}

/// `z` with `P(|N(0,1)| > z) = level`, by bisection on the normal CDF.
fn inverse_two_sided(level: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 2.0 * (1.0 - normal_cdf(mid)) > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
