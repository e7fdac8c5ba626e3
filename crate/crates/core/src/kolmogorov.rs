//! Feynman–Kac evaluation of the Kolmogorov solution and the limiting
//! `y`-derivative operator `Ψ₂⁰` on the Galerkin basis.
//!
//! Entry `(k, j)` of the matrix is
//! `∫₀^{t_max} e^{-ct} E⟨D_yF(x, Y(t)) e_k, Z^{e_j}(t)⟩ dt`, with `Y` the frozen
//! fast process started at `y`, `Z` its first variation driven by the same
//! realization, and `c = 0` for the limit operator itself.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::gamma;

use crate::dynamics::{run_frozen_fast, time_grid, variation_step, Evaluator, ModeFactors, RegimeParams, SimOptions};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelSpec, Reaction};
use crate::rng::derive_seed;
use crate::spectral::{Component, Field};
use crate::stats::{mean_se, MeanSe};

const TAG_PSI: u64 = 0x95C2_0001;
const TAG_PHI: u64 = 0x95C2_0002;

/// Numerical settings of a `Ψ₂` computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Psi2Config {
    /// Matrix dimension.
    pub m: usize,
    pub mc_paths: usize,
    /// Integration horizon; `10/ℓ` when absent.
    pub t_max: Option<f64>,
    pub dt: f64,
    pub seed: u64,
}

impl Psi2Config {
    /// `m = min(8, n)`, 64 paths, `dt = 0.01`.
    pub fn for_model(model: &ModelSpec) -> Self {
        Self { m: model.modes().min(8), mc_paths: 64, t_max: None, dt: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Psi2Matrix {
    pub frozen_x: Field,
    pub anchor_y: Field,
    /// Row `k` is the slow mode `e_k`, column `j` the fast direction `e_j`.
    pub entries: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub mc_paths: usize,
    pub t_max: f64,
    pub dt: f64,
    /// Discount rate `c` (zero for the limit operator).
    pub discount: f64,
    /// Analytic bound on the neglected tail `∫_{t_max}^∞`.
    pub tail_bound: f64,
    pub seed: u64,
}

impl Psi2Matrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Spectral norm of the entries.
    pub fn norm(&self) -> f64 {
        spectral_norm(&self.entries)
    }

    /// Frobenius norm of the standard-error matrix.
    pub fn se_norm(&self) -> f64 {
        self.se.norm()
    }

    /// CSV `row,col,value,se` (1-based).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "row,col,value,se")?;
        for k in 0..self.dim() {
            for j in 0..self.dim() {
                writeln!(w, "{},{},{:e},{:e}", k + 1, j + 1, self.entries[(k, j)], self.se[(k, j)])?;
            }
        }
        Ok(())
    }
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// `Ψ₂⁰(x, y)` on the first `m` modes.
#[allow(clippy::too_many_arguments)]
pub fn psi2_zero_matrix(
    model: &ModelSpec,
    x: &Field,
    y: &Field,
    m: usize,
    mc_paths: usize,
    t_max: Option<f64>,
    dt: f64,
    seed: u64,
) -> Result<Psi2Matrix> {
    psi2_matrix(model, x, y, &Psi2Config { m, mc_paths, t_max, dt, seed }, 0.0)
}

/// `Ψ₂` with discount `c` (the `ε`-dependent operator for `c = c(ε)`).
pub fn psi2_matrix(model: &ModelSpec, x: &Field, y: &Field, cfg: &Psi2Config, discount: f64) -> Result<Psi2Matrix> {
    model.slow.check(x)?;
    model.fast.check(y)?;
    let n = model.modes();
    let m = cfg.m;
    if m == 0 || m > n {
        return invalid(format!("matrix dimension {m} outside 1..={n}"));
    }
    if cfg.mc_paths == 0 {
        return invalid("need at least one Monte Carlo path");
    }
    if !(discount >= 0.0) {
        return invalid("discount must be non-negative");
    }
    let rep = model.validate_hypotheses();
    rep.require_dissipative()?;
    let ell = rep.ell;
    let t_max = cfg.t_max.unwrap_or(10.0 / ell);
    if t_max * ell < 5.0 {
        return Err(Error::TailNotNegligible(t_max * ell));
    }
    let dyf_bound = rep.f_bounds.dy;
    let tail_bound = dyf_bound * (-(ell + discount) * t_max).exp() / (ell + discount);

    let mk = |entries: DMatrix<f64>, se: DMatrix<f64>, paths: usize, dt: f64| Psi2Matrix {
        frozen_x: x.clone(),
        anchor_y: y.clone(),
        entries,
        se,
        mc_paths: paths,
        t_max,
        dt,
        discount,
        tail_bound,
        seed: cfg.seed,
    };

    if model.f.dy_constant() == Some(0.0) {
        return Ok(mk(DMatrix::zeros(m, m), DMatrix::zeros(m, m), 0, cfg.dt));
    }
    // Constant ∂_y f and ∂_y g: the integrand does not depend on the noise.
    let deterministic = model.f.dy_constant().is_some() && model.g.dy_constant().is_some();
    let paths = if deterministic { 1 } else { cfg.mc_paths };
    let seed = derive_seed(cfg.seed, TAG_PSI);

    let per_path: Vec<Result<(DMatrix<f64>, f64)>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let opts = SimOptions { stream: p as u64, noise_off: deterministic, ..Default::default() };
            psi2_path(model, x, y, m, t_max, cfg.dt, seed, opts, discount)
        })
        .collect();
    let mut mats = Vec::with_capacity(paths);
    let mut dt_eff = cfg.dt;
    for r in per_path {
        let (mat, d) = r?;
        dt_eff = d;
        mats.push(mat);
    }
    let mut entries = DMatrix::zeros(m, m);
    let mut se = DMatrix::zeros(m, m);
    if paths > 1 {
        let mut col = vec![0.0; paths];
        for k in 0..m {
            for j in 0..m {
                for (c, mat) in col.iter_mut().zip(&mats) {
                    *c = mat[(k, j)];
                }
                let e = mean_se(&col);
                entries[(k, j)] = e.mean;
                se[(k, j)] = e.se;
            }
        }
    } else {
        entries = mats.pop().expect("one path");
    }
    Ok(mk(entries, se, paths, dt_eff))
}

/// Time integral of `⟨D_yF(x, Y) e_k, Z^{e_j}⟩` along one path.
#[allow(clippy::too_many_arguments)]
fn psi2_path(
    model: &ModelSpec,
    x: &Field,
    y: &Field,
    m: usize,
    t_max: f64,
    dt: f64,
    seed: u64,
    opts: SimOptions,
    discount: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let n = model.modes();
    let grid = &model.grid;
    let npts = grid.len();
    let (_, dt_eff) = time_grid(t_max, dt)?;
    let fac = ModeFactors::new(&model.fast.eigenvalues, 1.0, dt_eff);
    let mut ev = Evaluator::new(model);
    ev.load_x(&x.coeffs);
    let f_const = model.f.dy_constant().filter(|_| model.slow.kind == model.fast.kind);
    let needs_grid = f_const.is_none() || model.g.dy_constant().is_none();

    // Z stored column-major: column j is Z^{e_j}.
    let mut z = vec![0.0; n * m];
    for j in 0..m {
        z[j * n + j] = 1.0;
    }
    let mut scratch = vec![0.0; n];
    let mut dyf = vec![0.0; npts];
    let mut zg = vec![0.0; npts];
    let mut coeffs = vec![0.0; n];
    let mut acc = DMatrix::<f64>::zeros(m, m);
    let mut cur = DMatrix::<f64>::zeros(m, m);
    let mut last_w = 0.0;

    run_frozen_fast(model, x, y, t_max, dt, seed, opts, |step, t, yv| {
        if needs_grid {
            ev.load_y(yv);
        }
        match f_const {
            Some(b) => {
                for j in 0..m {
                    for k in 0..m {
                        cur[(k, j)] = b * z[j * n + k];
                    }
                }
            }
            None => {
                for (d, (&a, &yy)) in dyf.iter_mut().zip(ev.xg.iter().zip(&ev.yg)) {
                    *d = model.f.dy(a, yy);
                }
                for j in 0..m {
                    grid.synthesize_into(Component::Fast, &z[j * n..(j + 1) * n], &mut zg);
                    for (v, d) in zg.iter_mut().zip(&dyf) {
                        *v *= d;
                    }
                    grid.analyze_into(Component::Slow, &zg, &mut coeffs);
                    for k in 0..m {
                        cur[(k, j)] = coeffs[k];
                    }
                }
            }
        }
        let w = (-discount * t).exp() * if step == 0 { 0.5 } else { 1.0 };
        acc += &cur * w;
        last_w = (-discount * t).exp();
        for j in 0..m {
            variation_step(&mut ev, &fac, &mut z[j * n..(j + 1) * n], &mut scratch);
        }
    })?;
    // trapezoid: the final point carries half weight
    acc -= &cur * (0.5 * last_w);
    Ok((acc * dt_eff, dt_eff))
}

/// Feynman–Kac value `∫₀^{t_max} e^{-ct} E⟨F(x, Y(t)) - F̄(x), χ⟩ dt`
/// with `c = c(ε)` and `Y` the frozen fast process from `y`.
///
/// `fbar` is the caller's averaged drift at `x`. Paths are drawn in
/// antithetic pairs; `mc_paths` is rounded up to an even count.
#[allow(clippy::too_many_arguments)]
pub fn phi_eps_value(
    model: &ModelSpec,
    regime: &RegimeParams,
    x: &Field,
    y: &Field,
    chi: &Field,
    fbar: &Field,
    mc_paths: usize,
    t_max: Option<f64>,
    dt: f64,
    seed: u64,
) -> Result<MeanSe> {
    model.slow.check(x)?;
    model.fast.check(y)?;
    model.slow.check(chi)?;
    model.slow.check(fbar)?;
    if mc_paths == 0 {
        return invalid("need at least one Monte Carlo path");
    }
    let rep = model.validate_hypotheses();
    rep.require_dissipative()?;
    let t_max = t_max.unwrap_or(10.0 / rep.ell);
    if t_max * rep.ell < 5.0 {
        return Err(Error::TailNotNegligible(t_max * rep.ell));
    }
    let c = regime.c_eps;
    let fbar_chi = fbar.dot(chi);
    if !model.f.depends_on_y() {
        let v = model.eval_reaction(Reaction::F, x, &model.fast.zeros())?.dot(chi) - fbar_chi;
        let weight = if c > 0.0 { -(-c * t_max).exp_m1() / c } else { t_max };
        return Ok(MeanSe { mean: v * weight, se: 0.0 });
    }
    let pairs = mc_paths.div_ceil(2);
    let seed = derive_seed(seed, TAG_PHI);
    let xg = model.grid.synthesize(x);
    let chig = model.grid.synthesize(chi);
    let w_grid = model.grid.weight;

    let one = |opts: SimOptions| -> Result<f64> {
        let mut yg = vec![0.0; xg.len()];
        let mut acc = 0.0;
        let mut last = 0.0;
        let (_, dt_eff) = run_frozen_fast(model, x, y, t_max, dt, seed, opts, |step, t, yv| {
            model.grid.synthesize_into(Component::Fast, yv, &mut yg);
            // ⟨F(x, y), χ⟩ by the collocation quadrature
            let fchi: f64 =
                xg.iter().zip(&yg).zip(&chig).map(|((&a, &b), &ch)| model.f.value(a, b) * ch).sum::<f64>() * w_grid;
            let v = (-c * t).exp() * (fchi - fbar_chi);
            acc += if step == 0 { 0.5 * v } else { v };
            last = v;
        })?;
        Ok((acc - 0.5 * last) * dt_eff)
    };
    let vals = (0..pairs)
        .into_par_iter()
        .map(|p| {
            let a = one(SimOptions { stream: p as u64, ..Default::default() })?;
            let b = one(SimOptions { stream: p as u64, antithetic: true, ..Default::default() })?;
            Ok(0.5 * (a + b))
        })
        .collect::<Result<Vec<f64>>>()?;
    let est = mean_se(&vals);
    Ok(MeanSe { mean: est.mean, se: if est.se.is_nan() { 0.0 } else { est.se } })
}

/// Empirical Lipschitz ratios of `Ψ₂⁰` in `x` and in `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContinuityModulus {
    pub ratio_x: f64,
    pub ratio_y: f64,
    /// `Γ(5/4)/ω^{5/4}`, the scale of the analytic Lipschitz constant; informational.
    pub proof_scale: f64,
}

/// `(‖M(x₁,y₁) − M(x₂,y₁)‖/‖x₁−x₂‖, ‖M(x₁,y₁) − M(x₁,y₂)‖/‖y₁−y₂‖)` in spectral
/// norm, all matrices sharing one seed.
#[allow(clippy::too_many_arguments)]
pub fn psi2_continuity_modulus(
    model: &ModelSpec,
    x1: &Field,
    x2: &Field,
    y1: &Field,
    y2: &Field,
    m: usize,
    mc_paths: usize,
    seed: u64,
) -> Result<ContinuityModulus> {
    let rep = model.validate_hypotheses();
    rep.require()?;
    let dx = x1.sub(x2).norm();
    let dy = y1.sub(y2).norm();
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::Degenerate("coincident inputs".into()));
    }
    let cfg = Psi2Config { m, mc_paths, t_max: None, dt: 0.01, seed };
    let base = psi2_matrix(model, x1, y1, &cfg, 0.0)?;
    let mx = psi2_matrix(model, x2, y1, &cfg, 0.0)?;
    let my = psi2_matrix(model, x1, y2, &cfg, 0.0)?;
    Ok(ContinuityModulus {
        ratio_x: spectral_norm(&(&base.entries - &mx.entries)) / dx,
        ratio_y: spectral_norm(&(&base.entries - &my.entries)) / dy,
        proof_scale: gamma(1.25) / rep.omega.powf(1.25),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::simulate_frozen_fast_with;
    use crate::model::{DiffusionSpec, ReactionSpec};
    use crate::spectral::DomainSpec;
    use crate::stats::two_sample_z;

    fn model(n: usize, f: ReactionSpec, g: ReactionSpec) -> ModelSpec {
        ModelSpec::new(DomainSpec::unit_dirichlet(), n, f, g, DiffusionSpec::Constant { c: 1.0 }).unwrap()
    }

    #[test]
    fn zero_when_f_ignores_y() {
        let m = model(8, ReactionSpec::TanhSum { alpha: 1.0, beta: 0.0 }, ReactionSpec::TanhYDamped { kappa: 0.2 });
        let p = psi2_zero_matrix(&m, &m.slow.unit(0), &m.fast.unit(1), 4, 8, None, 0.01, 1).unwrap();
        assert!(p.entries.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_closed_form() {
        let m = model(16, ReactionSpec::LinearY { b: 0.3 }, ReactionSpec::Zero);
        let p = psi2_zero_matrix(&m, &m.slow.zeros(), &m.fast.zeros(), 8, 16, Some(20.0), 1e-3, 0).unwrap();
        for k in 0..8 {
            let want = 0.3 / ((k + 1) * (k + 1)) as f64;
            assert!((p.entries[(k, k)] - want).abs() < 1e-4, "{k}: {}", p.entries[(k, k)]);
            for j in 0..8 {
                if j != k {
                    assert!(p.entries[(k, j)].abs() <= 1e-12);
                }
            }
        }
        assert!(p.se.iter().all(|s| *s == 0.0));
        assert!((p.entries[(0, 0)] - 0.3).abs() < 1e-4 && (p.entries[(1, 1)] - 0.075).abs() < 1e-4);
    }

    #[test]
    fn short_horizon_rejected() {
        let m = model(4, ReactionSpec::LinearY { b: 0.3 }, ReactionSpec::Zero);
        let r = psi2_zero_matrix(&m, &m.slow.zeros(), &m.fast.zeros(), 2, 4, Some(9.0), 1e-2, 0);
        assert!(matches!(r, Err(Error::TailNotNegligible(_))));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn finite_difference_oracle_with_common_noise() {
        let m = model(6, ReactionSpec::LinearY { b: 0.3 }, ReactionSpec::TanhYDamped { kappa: 0.2 });
        let x = m.slow.zeros();
        let y = m.fast.field(vec![0.4, -0.2, 0.1, 0.0, 0.0, 0.0]).unwrap();
        let (dim, paths, dt, t_max) = (3, 64, 0.02, 25.0);
        let p = psi2_zero_matrix(&m, &x, &y, dim, paths, Some(t_max), dt, 11).unwrap();

        // Oracle: D_yY e_j ≈ (Y^{y + h e_j} − Y^{y})/h with shared noise, independent seed.
        let h = 1e-5;
        let mut samples = vec![vec![Vec::new(); dim]; dim];
        for path in 0..paths as u64 {
            let opts = SimOptions { stream: path, ..Default::default() };
            let base = simulate_frozen_fast_with(&m, &x, &y, t_max, dt, 999, opts).unwrap();
            for j in 0..dim {
                let mut yj = y.clone();
                yj.coeffs[j] += h;
                let bumped = simulate_frozen_fast_with(&m, &x, &yj, t_max, dt, 999, opts).unwrap();
                let mut integ = vec![0.0; dim];
                let last = base.len() - 1;
                for (i, (a, b)) in base.y.iter().zip(&bumped.y).enumerate() {
                    let w = if i == 0 || i == last { 0.5 } else { 1.0 } * base.dt;
                    for k in 0..dim {
                        integ[k] += w * 0.3 * (b.coeffs[k] - a.coeffs[k]) / h;
                    }
                }
                for k in 0..dim {
                    samples[k][j].push(integ[k]);
                }
            }
        }
        for k in 0..dim {
            for j in 0..dim {
                let oracle = mean_se(&samples[k][j]);
                let est = MeanSe { mean: p.entries[(k, j)], se: p.se[(k, j)] };
                let z = two_sample_z(est, oracle);
                let tol = 1e-6;
                assert!(z.abs() < 3.0 || (est.mean - oracle.mean).abs() < tol, "({k},{j}) {est:?} {oracle:?}");
            }
        }
        // damping by g only shrinks the response
        assert!(p.entries[(0, 0)] < 0.3);
    }

    #[test]
    fn entries_respect_operator_bound() {
        for g in [ReactionSpec::Zero, ReactionSpec::TanhYDamped { kappa: 0.2 }] {
            let m = model(6, ReactionSpec::TanhSum { alpha: 1.0, beta: 0.3 }, g);
            let ell = m.validate_hypotheses().ell;
            let y = m.fast.field(vec![0.3, 0.2, -0.1, 0.0, 0.1, 0.0]).unwrap();
            let p = psi2_zero_matrix(&m, &m.slow.unit(0), &y, 4, 32, None, 0.02, 3).unwrap();
            assert!(p.norm() <= 0.3 / ell + 3.0 * p.se_norm());
            assert!(p.tail_bound < 0.3 / ell * 1e-4);
        }
    }

    #[test]
    fn discounted_operators_approach_the_limit() {
        let m = model(6, ReactionSpec::TanhSum { alpha: 1.0, beta: 0.3 }, ReactionSpec::TanhYDamped { kappa: 0.2 });
        let y = m.fast.field(vec![0.3, 0.2, -0.1, 0.0, 0.1, 0.0]).unwrap();
        let x = m.slow.unit(0);
        let cfg = Psi2Config { m: 3, mc_paths: 16, t_max: None, dt: 0.02, seed: 5 };
        let limit = psi2_matrix(&m, &x, &y, &cfg, 0.0).unwrap();
        let dists: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&c| spectral_norm(&(&psi2_matrix(&m, &x, &y, &cfg, c).unwrap().entries - &limit.entries)))
            .collect();
        assert!(dists[0] > dists[1] && dists[1] > dists[2], "{dists:?}");
    }

    #[test]
    fn phi_closed_form() {
        let m = model(8, ReactionSpec::LinearY { b: 0.3 }, ReactionSpec::Zero);
        let r = RegimeParams::r1(0.04).unwrap();
        assert!((r.c_eps - 0.2).abs() < 1e-15);
        let x = m.slow.zeros();
        let fbar = m.slow.zeros();
        let v = phi_eps_value(&m, &r, &x, &m.fast.unit(0), &m.slow.unit(0), &fbar, 8, None, 1e-3, 1).unwrap();
        assert!((v.mean - 0.25).abs() < 1e-4, "{v:?}");
        let v2 = phi_eps_value(&m, &r, &x, &m.fast.unit(0), &m.slow.unit(1), &fbar, 8, None, 1e-3, 1).unwrap();
        assert!(v2.mean.abs() < 1e-12);

        let m0 = model(8, ReactionSpec::TanhSum { alpha: 1.0, beta: 0.0 }, ReactionSpec::Zero);
        let x = m0.slow.unit(0);
        let fbar = m0.eval_reaction(Reaction::F, &x, &m0.fast.zeros()).unwrap();
        let v = phi_eps_value(&m0, &r, &x, &m0.fast.unit(0), &m0.slow.unit(0), &fbar, 8, None, 1e-2, 1).unwrap();
        assert_eq!(v.mean, 0.0);
    }

    #[test]
    fn continuity_ratios() {
        let m = model(6, ReactionSpec::LinearY { b: 0.3 }, ReactionSpec::Zero);
        let (x1, x2) = (m.slow.zeros(), m.slow.unit(0));
        let (y1, y2) = (m.fast.zeros(), m.fast.unit(1));
        let r = psi2_continuity_modulus(&m, &x1, &x2, &y1, &y2, 3, 4, 0).unwrap();
        assert_eq!((r.ratio_x, r.ratio_y), (0.0, 0.0));
        assert!(psi2_continuity_modulus(&m, &x1, &x1, &y1, &y2, 3, 4, 0).is_err());

        let m = model(6, ReactionSpec::TanhSum { alpha: 1.0, beta: 0.3 }, ReactionSpec::TanhYDamped { kappa: 0.2 });
        let y2 = m.fast.unit(0).scaled(0.5);
        let a = psi2_continuity_modulus(&m, &x1, &x2, &y1, &y2, 3, 16, 7).unwrap();
        let b = psi2_continuity_modulus(&m, &x1, &x2, &y1, &y2, 3, 32, 7).unwrap();
        assert!(a.ratio_y.is_finite() && b.ratio_y.is_finite());
        assert!((a.ratio_y - b.ratio_y).abs() <= 0.5 * a.ratio_y.max(b.ratio_y) + 1e-9);
        assert!((a.proof_scale - gamma(1.25) / 0.2f64.powf(1.25)).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let m = model(4, ReactionSpec::LinearY { b: 0.3 }, ReactionSpec::Zero);
        let p = psi2_zero_matrix(&m, &m.slow.zeros(), &m.fast.zeros(), 2, 1, None, 0.01, 0).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 5);
        assert!(s.starts_with("row,col,value,se\n1,1,"));
    }
}
