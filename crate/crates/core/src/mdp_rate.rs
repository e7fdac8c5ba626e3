//! The operator `Q_i`, the rate functional `S_i`, the optimal feedback
//! controls and the limiting controlled equation.
//!
//! `Q_i(x)` is the `μˣ`-average of `Σ(x,y)Σ*(x,y) + γ_i²Ψ₂⁰(x,y)Ψ₂⁰*(x,y)` on
//! the slow basis. `Ψ₂⁰` lives on the leading `m` modes and is padded by zeros.
//! The rate of a path `ψ` is `½∫‖Q_i^{-1/2}(X̄)r‖²dt` with the residual
//! `r = ∂_tψ − A₁ψ − D̄ₓF(X̄)ψ`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::averaging::{averaged_jacobian_matrix, InvariantCache, InvariantPolicy, InvariantSample};
use crate::dynamics::{
    interp_index, lerp_into, time_grid, ControlSpec, FeedbackControl, PathBundle, Regime, RegimeParams,
};
use crate::error::{invalid, Error, Result};
use crate::kolmogorov::{psi2_matrix, Psi2Config};
use crate::model::ModelSpec;
use crate::rng::derive_seed;
use crate::spectral::{Component, Field, SpectralBasis};
use crate::stats::{batch_mean_se, mean_se, MeanSe};

const TAG_Q: u64 = 0x0D9A_0001;

/// `Q_i(x)` on the slow basis together with its eigendecomposition.
#[derive(Debug, Clone, Serialize)]
pub struct QMatrix {
    pub regime: Regime,
    pub x: Field,
    pub entries: DMatrix<f64>,
    pub min_eigenvalue: f64,
    /// Frobenius norm of the entrywise standard errors.
    pub se: f64,
    #[serde(skip)]
    eigenvalues: DVector<f64>,
    #[serde(skip)]
    eigenvectors: DMatrix<f64>,
}

impl QMatrix {
    fn new(regime: Regime, x: Field, entries: DMatrix<f64>, se: f64) -> Result<Self> {
        let sym = (&entries + entries.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let min_eigenvalue = eig.eigenvalues.min();
        if !(min_eigenvalue > 0.0) {
            return Err(Error::NotPositive(min_eigenvalue));
        }
        Ok(Self {
            regime,
            x,
            entries: sym,
            min_eigenvalue,
            se,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// `Q⁻¹r`.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        self.spectral_apply(r, |d| 1.0 / d)
    }

    /// `⟨r, Q⁻¹r⟩ = ‖Q^{-1/2}r‖²`.
    pub fn inverse_quadratic(&self, r: &[f64]) -> f64 {
        let v = &self.eigenvectors;
        (0..self.dim())
            .map(|i| {
                let c: f64 = v.column(i).iter().zip(r).map(|(a, b)| a * b).sum();
                c * c / self.eigenvalues[i]
            })
            .sum()
    }

    /// `Q^{-1/2}`.
    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.eigenvalues.map(|l| 1.0 / l.sqrt()));
        &self.eigenvectors * d * self.eigenvectors.transpose()
    }

    /// Spectral norm of `Q⁻¹`.
    pub fn inverse_norm(&self) -> f64 {
        1.0 / self.min_eigenvalue
    }

    fn spectral_apply(&self, r: &[f64], g: impl Fn(f64) -> f64) -> Vec<f64> {
        let v = &self.eigenvectors;
        let mut out = vec![0.0; self.dim()];
        for i in 0..self.dim() {
            let c: f64 = v.column(i).iter().zip(r).map(|(a, b)| a * b).sum::<f64>() * g(self.eigenvalues[i]);
            for (o, e) in out.iter_mut().zip(v.column(i).iter()) {
                *o += c * e;
            }
        }
        out
    }
}

/// `Ψ₂⁰` along a sample set: absent, shared by every `y`, or one per sample.
#[derive(Debug, Clone)]
pub enum PsiSet {
    None,
    Global(DMatrix<f64>),
    PerSample(Vec<DMatrix<f64>>),
}

impl PsiSet {
    fn get(&self, i: usize) -> Option<&DMatrix<f64>> {
        match self {
            PsiSet::None => None,
            PsiSet::Global(p) => Some(p),
            PsiSet::PerSample(v) => v.get(i),
        }
    }
}

/// `Ψ₂⁰` does not depend on `(x, y)` when both `y`-derivatives are constant.
fn psi_is_global(model: &ModelSpec) -> bool {
    model.f.dy_constant().is_some() && model.g.dy_constant().is_some()
}

/// `Ψ₂⁰(x, y)` for each `y` in `ys`, or once when it is state-independent.
pub fn psi_set(model: &ModelSpec, regime: &RegimeParams, x: &Field, ys: &[Field], cfg: &Psi2Config) -> Result<PsiSet> {
    if regime.gamma == 0.0 || model.f.dy_constant() == Some(0.0) {
        return Ok(PsiSet::None);
    }
    if psi_is_global(model) {
        let p = psi2_matrix(model, &model.slow.zeros(), &model.fast.zeros(), cfg, 0.0)?;
        return Ok(PsiSet::Global(p.entries));
    }
    let mut out = Vec::with_capacity(ys.len());
    for (i, y) in ys.iter().enumerate() {
        let c = Psi2Config { seed: derive_seed(cfg.seed, i as u64), ..*cfg };
        out.push(psi2_matrix(model, x, y, &c, 0.0)?.entries);
    }
    Ok(PsiSet::PerSample(out))
}

/// Whether `Q` needs samples of `μˣ` at all.
fn q_needs_samples(model: &ModelSpec, regime: &RegimeParams) -> bool {
    model.sigma.constant().is_none()
        || (regime.gamma > 0.0 && model.f.dy_constant() != Some(0.0) && !psi_is_global(model))
}

/// `count` samples taken at an even stride through `inv`.
pub fn stride_samples(inv: &InvariantSample, count: usize) -> Vec<Field> {
    let len = inv.samples.len();
    let count = count.clamp(1, len.max(1));
    let stride = (len / count).max(1);
    inv.samples.iter().step_by(stride).take(count).cloned().collect()
}

/// `Q_i(x)` from the samples `ys` of `μˣ` and matching `Ψ₂⁰` matrices.
pub fn q_matrix_with_psi(
    model: &ModelSpec,
    regime: &RegimeParams,
    x: &Field,
    ys: &[Field],
    psi: &PsiSet,
) -> Result<QMatrix> {
    model.slow.check(x)?;
    if ys.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = model.modes();
    let g2 = regime.gamma * regime.gamma;
    let deterministic = model.sigma.constant().is_some() && !matches!(psi, PsiSet::PerSample(_));
    let used = if deterministic { 1 } else { ys.len() };
    let terms = (0..used)
        .into_par_iter()
        .map(|i| {
            let s = model.sigma_matrix(x, &ys[i])?;
            let mut t = &s * s.transpose();
            if g2 > 0.0 {
                if let Some(p) = psi.get(i) {
                    let m = p.nrows();
                    let pp = p * p.transpose() * g2;
                    let mut block = t.view_mut((0, 0), (m, m));
                    block += pp;
                }
            }
            Ok(t)
        })
        .collect::<Result<Vec<DMatrix<f64>>>>()?;
    let mut entries = DMatrix::zeros(n, n);
    let mut se2 = 0.0;
    if used == 1 {
        entries = terms.into_iter().next().expect("one term");
    } else {
        let mut col = vec![0.0; used];
        for a in 0..n {
            for b in 0..n {
                for (c, t) in col.iter_mut().zip(&terms) {
                    *c = t[(a, b)];
                }
                let e = mean_se(&col);
                entries[(a, b)] = e.mean;
                se2 += e.se * e.se;
            }
        }
    }
    QMatrix::new(regime.regime, x.clone(), entries, se2.sqrt())
}

/// `Q_i(x)` with `Ψ₂⁰` computed at `q_samples` points of `inv`.
pub fn q_matrix(
    model: &ModelSpec,
    regime: &RegimeParams,
    x: &Field,
    inv: Option<&InvariantSample>,
    q_samples: usize,
    cfg: &Psi2Config,
) -> Result<QMatrix> {
    model.validate_hypotheses().require()?;
    let ys = if q_needs_samples(model, regime) {
        let inv = inv.ok_or(Error::EmptySample)?;
        stride_samples(inv, q_samples)
    } else {
        vec![model.fast.zeros()]
    };
    let psi = psi_set(model, regime, x, &ys, cfg)?;
    q_matrix_with_psi(model, regime, x, &ys, &psi)
}

/// A path `ψ` on a uniform grid with `ψ(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothPath {
    pub times: Vec<f64>,
    pub psi: Vec<Field>,
}

impl SmoothPath {
    pub fn new(times: Vec<f64>, psi: Vec<Field>) -> Result<Self> {
        if times.len() < 2 || times.len() != psi.len() {
            return invalid("path needs at least two grid points and one field per time");
        }
        if times[0] != 0.0 {
            return invalid("path must start at t = 0");
        }
        if psi[0].norm() > 1e-12 {
            return invalid("path must start at zero");
        }
        let dt = times[1] - times[0];
        if times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0)) || !(dt > 0.0) {
            return Err(Error::GridMismatch("path grid must be uniform and increasing".into()));
        }
        Ok(Self { times, psi })
    }

    /// `ψ(t) = c·(t/T)·e_k` (mode index `k` zero-based).
    pub fn linear(basis: &SpectralBasis, k: usize, c: f64, t_end: f64, dt: f64) -> Result<Self> {
        if k >= basis.modes() {
            return invalid(format!("mode {} outside 1..={}", k + 1, basis.modes()));
        }
        let (steps, dt) = time_grid(t_end, dt)?;
        let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        let psi = times.iter().map(|&t| basis.unit(k).scaled(c * t / t_end)).collect();
        Self::new(times, psi)
    }

    /// The zero path on `[0, t_end]`.
    pub fn zero(basis: &SpectralBasis, t_end: f64, dt: f64) -> Result<Self> {
        Self::linear(basis, 0, 0.0, t_end, dt)
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// Discrete `∫‖∂_tψ‖²dt`.
    pub fn h1_energy(&self) -> f64 {
        let dt = self.dt();
        self.psi.windows(2).map(|w| w[1].sub(&w[0]).norm().powi(2) / dt).sum()
    }

    /// `∂_tψ` by central differences, one-sided at the ends.
    pub fn derivative(&self, i: usize) -> Vec<f64> {
        let last = self.psi.len() - 1;
        let (a, b, span) = match i {
            0 => (1, 0, 1.0),
            j if j == last => (last, last - 1, 1.0),
            j => (j + 1, j - 1, 2.0),
        };
        let dt = self.dt() * span;
        self.psi[a].coeffs.iter().zip(&self.psi[b].coeffs).map(|(p, q)| (p - q) / dt).collect()
    }
}

/// Settings of the averaged operators along `X̄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QPolicy {
    /// Time between recomputations of `Q(X̄(t))`.
    pub refresh: f64,
    /// Samples of `μ^{X̄(t)}` entering `Q` and the `Ψ₂⁰` look-up.
    pub q_samples: usize,
    pub psi2: Psi2Config,
    pub invariant: InvariantPolicy,
}

impl QPolicy {
    pub fn for_model(model: &ModelSpec) -> Self {
        Self {
            refresh: 0.1,
            q_samples: 32,
            psi2: Psi2Config { mc_paths: 16, ..Psi2Config::for_model(model) },
            invariant: InvariantPolicy::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.psi2.seed = derive_seed(seed, TAG_Q);
        self.invariant.seed = seed;
        self
    }
}

/// Operators frozen at one point of `X̄`.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub x: Field,
    pub q: QMatrix,
    /// Samples of `μˣ` used for `Ψ₂⁰` look-ups and `μ`-averages.
    pub ys: Vec<Field>,
    pub psi: PsiSet,
}

/// `Q`, `Ψ₂⁰` and `D̄ₓF` along an averaged trajectory.
#[derive(Debug, Clone)]
pub struct AveragedOperators {
    pub regime: RegimeParams,
    pub times: Vec<f64>,
    pub xbar: Vec<Field>,
    pub refresh: f64,
    pub snapshots: Vec<Snapshot>,
    /// `D̄ₓF(X̄(t))` per grid point, or a single matrix when it is state-independent.
    jacobians: Vec<DMatrix<f64>>,
}

impl AveragedOperators {
    pub fn build(model: &ModelSpec, regime: &RegimeParams, xbar: &PathBundle, policy: &QPolicy) -> Result<Self> {
        Self::build_cached(model, regime, xbar, policy, &InvariantCache::new())
    }

    pub fn build_cached(
        model: &ModelSpec,
        regime: &RegimeParams,
        xbar: &PathBundle,
        policy: &QPolicy,
        cache: &InvariantCache,
    ) -> Result<Self> {
        model.validate_hypotheses().require()?;
        if xbar.x.is_empty() || xbar.x.len() != xbar.times.len() {
            return Err(Error::GridMismatch("averaged path has no slow trajectory".into()));
        }
        if !(policy.refresh > 0.0) {
            return invalid("refresh interval must be positive");
        }
        let t_end = xbar.t_end();
        let count = (t_end / policy.refresh + 1e-9).floor() as usize + 1;
        let nearest = |t: f64| ((t / xbar.dt).round() as usize).min(xbar.len() - 1);
        let need_samples = q_needs_samples(model, regime);
        let mut global_psi: Option<PsiSet> = None;
        let mut snapshots = Vec::with_capacity(count);
        for s in 0..count {
            let t = (s as f64 * policy.refresh).min(t_end);
            let x = xbar.x[nearest(t)].clone();
            let ys = if need_samples || model.f.depends_on_y() {
                let inv = cache.get(model, &x, &policy.invariant)?;
                stride_samples(&inv, policy.q_samples)
            } else {
                vec![model.fast.zeros()]
            };
            let psi = match &global_psi {
                Some(p) => p.clone(),
                None => {
                    let p = psi_set(model, regime, &x, &ys, &policy.psi2)?;
                    if !matches!(p, PsiSet::PerSample(_)) {
                        global_psi = Some(p.clone());
                    }
                    p
                }
            };
            let q = if need_samples {
                q_matrix_with_psi(model, regime, &x, &ys, &psi)?
            } else {
                q_matrix_with_psi(model, regime, &x, &ys[..1], &psi)?
            };
            snapshots.push(Snapshot { t, x, q, ys, psi });
        }
        let jacobians = if model.f.depends_on_x() {
            xbar.x.par_iter().map(|x| averaged_jacobian_matrix(model, x, None)).collect::<Result<Vec<_>>>()?
        } else {
            vec![averaged_jacobian_matrix(model, &model.slow.zeros(), None)?]
        };
        Ok(Self {
            regime: *regime,
            times: xbar.times.clone(),
            xbar: xbar.x.clone(),
            refresh: policy.refresh,
            snapshots,
            jacobians,
        })
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// Snapshot closest to `t`.
    pub fn snapshot(&self, t: f64) -> &Snapshot {
        let i = ((t / self.refresh).round().max(0.0) as usize).min(self.snapshots.len() - 1);
        &self.snapshots[i]
    }

    fn grid_index(&self, t: f64) -> usize {
        let dt = self.times[1.min(self.times.len() - 1)] - self.times[0];
        if dt <= 0.0 {
            return 0;
        }
        ((t / dt).round().max(0.0) as usize).min(self.times.len() - 1)
    }

    /// `D̄ₓF(X̄(t))` at the grid point nearest `t`.
    pub fn jacobian(&self, t: f64) -> &DMatrix<f64> {
        if self.jacobians.len() == 1 {
            &self.jacobians[0]
        } else {
            &self.jacobians[self.grid_index(t)]
        }
    }

    /// `X̄(t)` by linear interpolation.
    pub fn xbar_at(&self, t: f64, out: &mut [f64]) {
        let (i, w) = interp_index(&self.times, t);
        let j = (i + 1).min(self.xbar.len() - 1);
        lerp_into(&self.xbar[i].coeffs, &self.xbar[j].coeffs, w, out);
    }

    fn check_path(&self, psi: &SmoothPath) -> Result<()> {
        let tol = 1e-9 * self.t_end().max(1.0);
        if psi.times.len() != self.times.len() || psi.times.iter().zip(&self.times).any(|(a, b)| (a - b).abs() > tol) {
            return Err(Error::GridMismatch(format!(
                "path has {} grid points, averaged trajectory {}",
                psi.times.len(),
                self.times.len()
            )));
        }
        Ok(())
    }

    /// `r(t_i) = ∂_tψ − A₁ψ − D̄ₓF(X̄)ψ` at every grid point.
    pub fn residuals(&self, model: &ModelSpec, psi: &SmoothPath) -> Result<Vec<Vec<f64>>> {
        self.check_path(psi)?;
        for p in &psi.psi {
            model.slow.check(p)?;
        }
        let eig = &model.slow.eigenvalues;
        Ok((0..psi.times.len())
            .map(|i| {
                let p = DVector::from_column_slice(&psi.psi[i].coeffs);
                let jp = self.jacobian(psi.times[i]) * p;
                let mut r = psi.derivative(i);
                for k in 0..r.len() {
                    r[k] += eig[k] * psi.psi[i].coeffs[k] - jp[k];
                }
                r
            })
            .collect())
    }
}

/// Rate of one path, with per-time diagnostics `(t, ‖Q^{-1/2}r‖, κ = ‖r‖)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub regime: Regime,
    pub gamma: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub per_t: Vec<(f64, f64, f64)>,
}

/// `S_i(ψ)` with operators built along `xbar` under `policy`.
pub fn rate_functional(
    model: &ModelSpec,
    regime: &RegimeParams,
    psi: &SmoothPath,
    xbar: &PathBundle,
    policy: &QPolicy,
) -> Result<RateReport> {
    let ops = AveragedOperators::build(model, regime, xbar, policy)?;
    rate_functional_with(model, &ops, psi)
}

/// `S_i(ψ)` against prebuilt operators.
pub fn rate_functional_with(model: &ModelSpec, ops: &AveragedOperators, psi: &SmoothPath) -> Result<RateReport> {
    let rs = ops.residuals(model, psi)?;
    let dt = psi.dt();
    let last = rs.len() - 1;
    let mut s = 0.0;
    let mut per_t = Vec::with_capacity(rs.len());
    for (i, r) in rs.iter().enumerate() {
        let t = psi.times[i];
        let w = ops.snapshot(t).q.inverse_quadratic(r);
        let kappa = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        per_t.push((t, w.max(0.0).sqrt(), kappa));
        s += if i == 0 || i == last { 0.5 * w } else { w };
    }
    Ok(RateReport { regime: ops.regime.regime, gamma: ops.regime.gamma, s: 0.5 * s * dt, per_t })
}

/// The optimal pair `v₁ = Σ*Q⁻¹r`, `v₂ = γΨ₂⁰*Q⁻¹r` as a feedback map of `(t, y)`.
///
/// `Q⁻¹r` and `X̄` are interpolated linearly in time. `Ψ₂⁰(X̄(t), y)` is taken
/// at the nearest stored sample of the closest snapshot when it depends on `y`.
#[derive(Debug, Clone)]
pub struct OptimalControls {
    model: ModelSpec,
    gamma: f64,
    times: Vec<f64>,
    lambda: Vec<Vec<f64>>,
    xbar: Vec<Vec<f64>>,
    refresh: f64,
    psi: Vec<(Vec<Field>, PsiSet)>,
}

impl OptimalControls {
    pub fn into_spec(self) -> ControlSpec {
        ControlSpec::feedback(Arc::new(self))
    }

    /// `(v₁, v₂)(t, y)` as fields.
    pub fn at(&self, t: f64, y: &Field) -> (Field, Field) {
        let n = self.model.modes();
        let (mut u1, mut u2) = (vec![0.0; n], vec![0.0; n]);
        self.eval(t, &[], &y.coeffs, &mut u1, &mut u2);
        (Field { coeffs: u1, basis: self.model.slow.id() }, Field { coeffs: u2, basis: self.model.fast.id() })
    }
}

impl FeedbackControl for OptimalControls {
    fn eval(&self, t: f64, _x: &[f64], y: &[f64], u1: &mut [f64], u2: &mut [f64]) {
        let n = self.model.modes();
        let (i, w) = interp_index(&self.times, t);
        let j = (i + 1).min(self.times.len() - 1);
        let mut lam = vec![0.0; n];
        lerp_into(&self.lambda[i], &self.lambda[j], w, &mut lam);

        match self.model.sigma.constant() {
            Some(c) => {
                for (u, l) in u1.iter_mut().zip(&lam) {
                    *u = c * l;
                }
            }
            None => {
                let grid = &self.model.grid;
                let npts = grid.len();
                let mut xb = vec![0.0; n];
                lerp_into(&self.xbar[i], &self.xbar[j], w, &mut xb);
                let (mut xg, mut yg, mut lg) = (vec![0.0; npts], vec![0.0; npts], vec![0.0; npts]);
                grid.synthesize_into(Component::Slow, &xb, &mut xg);
                grid.synthesize_into(Component::Fast, y, &mut yg);
                grid.synthesize_into(Component::Slow, &lam, &mut lg);
                for ((l, a), b) in lg.iter_mut().zip(&xg).zip(&yg) {
                    *l *= self.model.sigma.value(*a, *b);
                }
                grid.analyze_into(Component::Slow, &lg, u1);
            }
        }

        u2.fill(0.0);
        if self.gamma == 0.0 {
            return;
        }
        let s = ((t / self.refresh).round().max(0.0) as usize).min(self.psi.len() - 1);
        let (ys, set) = &self.psi[s];
        let p = match set {
            PsiSet::None => return,
            PsiSet::Global(p) => p,
            PsiSet::PerSample(v) => {
                let best = ys
                    .iter()
                    .map(|s| s.coeffs.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                &v[best]
            }
        };
        let m = p.nrows();
        for col in 0..m {
            u2[col] = self.gamma * (0..m).map(|row| p[(row, col)] * lam[row]).sum::<f64>();
        }
    }
}

/// Optimal controls for the path `ψ` against prebuilt operators.
pub fn optimal_controls(model: &ModelSpec, ops: &AveragedOperators, psi: &SmoothPath) -> Result<OptimalControls> {
    let rs = ops.residuals(model, psi)?;
    let lambda = rs.iter().zip(&psi.times).map(|(r, &t)| ops.snapshot(t).q.solve(r)).collect();
    Ok(OptimalControls {
        model: model.clone(),
        gamma: ops.regime.gamma,
        times: psi.times.clone(),
        lambda,
        xbar: ops.xbar.iter().map(|f| f.coeffs.clone()).collect(),
        refresh: ops.refresh,
        psi: ops.snapshots.iter().map(|s| (s.ys.clone(), s.psi.clone())).collect(),
    })
}

/// `½∫₀ᵀ∫(‖u₁‖² + ‖u₂‖²)dμ^{X̄(t)}dt` by Monte Carlo over `μ` and the trapezoid rule in `t`.
pub fn control_cost(
    model: &ModelSpec,
    controls: &ControlSpec,
    xbar: &PathBundle,
    policy: &InvariantPolicy,
) -> Result<MeanSe> {
    if controls.is_zero() {
        return Ok(MeanSe { mean: 0.0, se: 0.0 });
    }
    if xbar.x.len() < 2 || xbar.x.len() != xbar.times.len() {
        return Err(Error::GridMismatch("averaged path has no slow trajectory".into()));
    }
    if !(policy.refresh > 0.0) {
        return invalid("refresh interval must be positive");
    }
    let cache = InvariantCache::new();
    let count = (xbar.t_end() / policy.refresh + 1e-9).floor() as usize + 1;
    let nearest = |t: f64| ((t / xbar.dt).round() as usize).min(xbar.len() - 1);
    let invs = (0..count)
        .map(|s| cache.get(model, &xbar.x[nearest(s as f64 * policy.refresh)], policy))
        .collect::<Result<Vec<_>>>()?;
    let n = model.modes();
    let per_t: Vec<MeanSe> = xbar
        .times
        .par_iter()
        .zip(&xbar.x)
        .map(|(&t, x)| {
            let inv = &invs[((t / policy.refresh).round() as usize).min(count - 1)];
            let (mut u1, mut u2) = (vec![0.0; n], vec![0.0; n]);
            let vals: Vec<f64> = inv
                .samples
                .iter()
                .map(|y| {
                    controls.eval(t, &x.coeffs, &y.coeffs, &mut u1, &mut u2);
                    u1.iter().chain(&u2).map(|v| v * v).sum()
                })
                .collect();
            let e = batch_mean_se(&vals, &inv.batches());
            MeanSe { mean: e.mean, se: if e.se.is_nan() { 0.0 } else { e.se } }
        })
        .collect();
    let last = per_t.len() - 1;
    let (mut mean, mut se) = (0.0, 0.0);
    for (i, e) in per_t.iter().enumerate() {
        let w = if i == 0 || i == last { 0.5 } else { 1.0 };
        mean += w * e.mean;
        se += w * e.se;
    }
    Ok(MeanSe { mean: 0.5 * mean * xbar.dt, se: 0.5 * se * xbar.dt })
}

/// Solution of the limit equation and the sup-norm defect of its mild form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitSolution {
    pub path: SmoothPath,
    /// `sup_t‖ψ(t) − ∫₀ᵗS₁(t−s)Ξ(s)ds‖`.
    pub mild_residual: f64,
}

/// Integrates `∂_tψ = A₁ψ + D̄ₓF(X̄)ψ + ∫[Σu₁ + γΨ₂⁰u₂]dμ^{X̄(t)}` from `ψ(0) = 0`.
pub fn solve_limit_equation(
    model: &ModelSpec,
    ops: &AveragedOperators,
    controls: &ControlSpec,
    t_end: f64,
    dt: f64,
) -> Result<LimitSolution> {
    let (steps, dt) = time_grid(t_end, dt)?;
    let n = model.modes();
    let eig = &model.slow.eigenvalues;
    let gamma = ops.regime.gamma;
    let decay: Vec<f64> = eig.iter().map(|a| (-a * dt).exp()).collect();
    let phi: Vec<f64> = eig.iter().map(|a| if *a == 0.0 { dt } else { -(-a * dt).exp_m1() / a }).collect();

    // ∫[Σu₁ + γΨ₂⁰u₂]dμ at time t, averaged over the snapshot samples.
    let forcing = |t: f64| -> Result<Vec<f64>> {
        let snap = ops.snapshot(t);
        let mut xb = vec![0.0; n];
        ops.xbar_at(t, &mut xb);
        let x = model.slow.field(xb.clone())?;
        let (mut u1, mut u2) = (vec![0.0; n], vec![0.0; n]);
        let mut acc = vec![0.0; n];
        for (i, y) in snap.ys.iter().enumerate() {
            controls.eval(t, &xb, &y.coeffs, &mut u1, &mut u2);
            let su = model.apply_sigma(&x, y, &model.slow.field(u1.clone())?)?;
            for (a, s) in acc.iter_mut().zip(&su.coeffs) {
                *a += s;
            }
            if gamma > 0.0 {
                if let Some(p) = snap.psi.get(i) {
                    let m = p.nrows();
                    for (row, a) in acc.iter_mut().enumerate().take(m) {
                        *a += gamma * (0..m).map(|c| p[(row, c)] * u2[c]).sum::<f64>();
                    }
                }
            }
        }
        let k = snap.ys.len() as f64;
        Ok(acc.into_iter().map(|a| a / k).collect())
    };
    let drift = |t: f64, psi: &[f64], ctrl: &[f64]| -> Vec<f64> {
        let jp = ops.jacobian(t) * DVector::from_column_slice(psi);
        ctrl.iter().zip(jp.iter()).map(|(c, j)| c + j).collect()
    };

    let mut psi = vec![0.0; n];
    let mut mild = vec![0.0; n];
    let mut xi_prev = drift(0.0, &psi, &forcing(0.0)?);
    let mut times = Vec::with_capacity(steps + 1);
    let mut path = Vec::with_capacity(steps + 1);
    times.push(0.0);
    path.push(model.slow.zeros());
    let mut sup = 0.0f64;
    for step in 0..steps {
        let t = step as f64 * dt;
        let mid = forcing(t + 0.5 * dt)?;
        let b = drift(t, &psi, &mid);
        for k in 0..n {
            psi[k] = decay[k] * psi[k] + phi[k] * b[k];
        }
        let t1 = (step + 1) as f64 * dt;
        let xi = drift(t1, &psi, &forcing(t1)?);
        for k in 0..n {
            mild[k] = decay[k] * mild[k] + 0.5 * dt * (decay[k] * xi_prev[k] + xi[k]);
        }
        xi_prev = xi;
        let d = psi.iter().zip(&mild).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        sup = sup.max(d);
        times.push(t1);
        path.push(model.slow.field(psi.clone())?);
    }
    Ok(LimitSolution { path: SmoothPath::new(times, path)?, mild_residual: sup })
}
