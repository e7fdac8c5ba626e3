//! Reaction terms, diffusion coefficient and their superposition operators.
//!
//! All pointwise maps are evaluated pseudo-spectrally: fields are synthesized on
//! the collocation grid, the scalar function is applied pointwise and the result
//! is analyzed back onto the target basis.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{build_basis, Collocation, Component, DomainSpec, Field, SpectralBasis};

/// `max |tanh''|`
const TANH_D2_MAX: f64 = 0.769_800_358_919_501;
/// `max |tanh'''|`
const TANH_D3_MAX: f64 = 2.0;

/// Closed catalog of reaction nonlinearities `r(x, y)` (no ξ-dependence).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReactionSpec {
    Zero,
    /// `b·y`. Unbounded, so outside `C_b²`; kept because it has closed-form oracles.
    LinearY {
        b: f64,
    },
    /// `α·tanh(x) + β·tanh(y)`
    TanhSum {
        alpha: f64,
        beta: f64,
    },
    /// `-κ·tanh(y)`
    TanhYDamped {
        kappa: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeBounds {
    pub dx: f64,
    pub dy: f64,
    /// Largest sup-norm among second partials.
    pub second: f64,
    /// Largest sup-norm among third partials.
    pub third: f64,
    /// Whether the map itself is bounded (C_b² membership).
    pub bounded: bool,
}

impl ReactionSpec {
    #[inline]
    pub fn value(&self, x: f64, y: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::LinearY { b } => b * y,
            Self::TanhSum { alpha, beta } => alpha * x.tanh() + beta * y.tanh(),
            Self::TanhYDamped { kappa } => -kappa * y.tanh(),
        }
    }

    #[inline]
    pub fn dx(&self, x: f64, _y: f64) -> f64 {
        match *self {
            Self::TanhSum { alpha, .. } => alpha * sech2(x),
            _ => 0.0,
        }
    }

    #[inline]
    pub fn dy(&self, _x: f64, y: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::LinearY { b } => b,
            Self::TanhSum { beta, .. } => beta * sech2(y),
            Self::TanhYDamped { kappa } => -kappa * sech2(y),
        }
    }

    #[inline]
    pub fn dxx(&self, x: f64, _y: f64) -> f64 {
        match *self {
            Self::TanhSum { alpha, .. } => alpha * tanh_d2(x),
            _ => 0.0,
        }
    }

    #[inline]
    pub fn dyy(&self, _x: f64, y: f64) -> f64 {
        match *self {
            Self::TanhSum { beta, .. } => beta * tanh_d2(y),
            Self::TanhYDamped { kappa } => -kappa * tanh_d2(y),
            _ => 0.0,
        }
    }

    pub fn bounds(&self) -> DerivativeBounds {
        match *self {
            Self::Zero => DerivativeBounds { dx: 0.0, dy: 0.0, second: 0.0, third: 0.0, bounded: true },
            Self::LinearY { b } => {
                DerivativeBounds { dx: 0.0, dy: b.abs(), second: 0.0, third: 0.0, bounded: b == 0.0 }
            }
            Self::TanhSum { alpha, beta } => DerivativeBounds {
                dx: alpha.abs(),
                dy: beta.abs(),
                second: TANH_D2_MAX * alpha.abs().max(beta.abs()),
                third: TANH_D3_MAX * alpha.abs().max(beta.abs()),
                bounded: true,
            },
            Self::TanhYDamped { kappa } => DerivativeBounds {
                dx: 0.0,
                dy: kappa.abs(),
                second: TANH_D2_MAX * kappa.abs(),
                third: TANH_D3_MAX * kappa.abs(),
                bounded: true,
            },
        }
    }

    pub fn depends_on_y(&self) -> bool {
        !matches!(self, Self::Zero | Self::TanhSum { beta: 0.0, .. } | Self::LinearY { b: 0.0 })
    }

    pub fn depends_on_x(&self) -> bool {
        matches!(self, Self::TanhSum { alpha, .. } if *alpha != 0.0)
    }

    /// `∂_x r` varies with `y`.
    pub fn dx_depends_on_y(&self) -> bool {
        !self.is_additive()
    }

    /// `r(x, y) = r(x, 0) + r(0, y) - r(0, 0)`, which lets averages over `y`
    /// be computed once per sample set. Every catalog family is additive;
    /// a coupled family added later must return `false` here.
    pub fn is_additive(&self) -> bool {
        true
    }

    /// `∂_y r` varies with `y` or `x`.
    pub fn dy_is_constant(&self) -> bool {
        matches!(
            self,
            Self::Zero | Self::LinearY { .. } | Self::TanhSum { beta: 0.0, .. } | Self::TanhYDamped { kappa: 0.0 }
        )
    }

    /// Value of `∂_y r` when it is constant.
    pub fn dy_constant(&self) -> Option<f64> {
        if self.dy_is_constant() {
            Some(self.dy(0.0, 0.0))
        } else {
            None
        }
    }
}

#[inline]
fn sech2(v: f64) -> f64 {
    let t = v.tanh();
    1.0 - t * t
}

#[inline]
fn tanh_d2(v: f64) -> f64 {
    let t = v.tanh();
    -2.0 * t * (1.0 - t * t)
}

/// Diffusion coefficient multiplying the slow noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    Constant {
        c: f64,
    },
    /// `c₁ + (c₂ - c₁)·logistic(x + y)`, strictly between `c₁` and `c₂`.
    BoundedSigmoid {
        c1: f64,
        c2: f64,
    },
}

impl DiffusionSpec {
    #[inline]
    pub fn value(&self, x: f64, y: f64) -> f64 {
        match *self {
            Self::Constant { c } => c,
            Self::BoundedSigmoid { c1, c2 } => c1 + (c2 - c1) / (1.0 + (-(x + y)).exp()),
        }
    }

    pub fn lower(&self) -> f64 {
        match *self {
            Self::Constant { c } => c,
            Self::BoundedSigmoid { c1, .. } => c1,
        }
    }

    pub fn upper(&self) -> f64 {
        match *self {
            Self::Constant { c } => c,
            Self::BoundedSigmoid { c2, .. } => c2,
        }
    }

    /// Lipschitz constant in each argument.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::BoundedSigmoid { c1, c2 } => (c2 - c1).abs() / 4.0,
        }
    }

    pub fn constant(&self) -> Option<f64> {
        match *self {
            Self::Constant { c } => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reaction {
    F,
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Derivative {
    DxF,
    DyF,
    DxG,
    DyG,
    DxxF,
}

/// Derived constants and pass/fail flags for the structural assumptions.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub lambda: f64,
    pub l_g: f64,
    /// `(λ - L_g) / 2`
    pub ell: f64,
    /// `(λ - 3 L_g) / 2`
    pub omega: f64,
    pub sigma_bounds: (f64, f64),
    pub sigma_lipschitz: f64,
    pub f_bounds: DerivativeBounds,
    pub g_bounds: DerivativeBounds,
    pub dissipativity: bool,
    pub extra_dissipativity: bool,
    pub sigma_elliptic: bool,
    /// Informational: `f` lies in `C_b²`.
    pub f_bounded: bool,
    pub passed: bool,
}

impl HypothesisReport {
    pub fn failures(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.dissipativity {
            v.push("L_g < lambda");
        }
        if !self.extra_dissipativity {
            v.push("omega > 0");
        }
        if !self.sigma_elliptic {
            v.push("0 < c1 <= sigma <= c2");
        }
        v
    }

    pub fn require(&self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::Hypothesis(self.failures().join(", ")))
        }
    }

    /// Only the dissipativity condition, enough for ergodicity of the fast process.
    pub fn require_dissipative(&self) -> Result<()> {
        if self.dissipativity {
            Ok(())
        } else {
            Err(Error::Hypothesis(format!("L_g = {} >= lambda = {}", self.l_g, self.lambda)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub domain: DomainSpec,
    pub slow: SpectralBasis,
    pub fast: SpectralBasis,
    pub f: ReactionSpec,
    pub g: ReactionSpec,
    pub sigma: DiffusionSpec,
    pub grid: Collocation,
}

impl ModelSpec {
    /// Model with `modes` retained modes per component and the default
    /// `2·modes + 1` collocation points.
    pub fn new(
        domain: DomainSpec,
        modes: usize,
        f: ReactionSpec,
        g: ReactionSpec,
        sigma: DiffusionSpec,
    ) -> Result<Self> {
        Self::with_quad_points(domain, modes, f, g, sigma, 2 * modes + 1)
    }

    pub fn with_quad_points(
        domain: DomainSpec,
        modes: usize,
        f: ReactionSpec,
        g: ReactionSpec,
        sigma: DiffusionSpec,
        quad_points: usize,
    ) -> Result<Self> {
        match sigma {
            DiffusionSpec::Constant { c } if !(c > 0.0) => return invalid("constant sigma must be positive"),
            DiffusionSpec::BoundedSigmoid { c1, c2 } if !(c1 > 0.0 && c2 >= c1) => {
                return invalid("bounded_sigmoid needs 0 < c1 <= c2")
            }
            _ => {}
        }
        let slow = build_basis(&domain, Component::Slow, modes)?;
        let fast = build_basis(&domain, Component::Fast, modes)?;
        let grid = Collocation::new(&slow, &fast, quad_points)?;
        Ok(Self { domain, slow, fast, f, g, sigma, grid })
    }

    pub fn modes(&self) -> usize {
        self.slow.modes()
    }

    pub fn quad_points(&self) -> usize {
        self.grid.len()
    }

    pub fn basis(&self, c: Component) -> &SpectralBasis {
        match c {
            Component::Slow => &self.slow,
            Component::Fast => &self.fast,
        }
    }

    pub fn validate_hypotheses(&self) -> HypothesisReport {
        let lambda = self.fast.lambda();
        let gb = self.g.bounds();
        let fb = self.f.bounds();
        let l_g = gb.dy;
        let ell = (lambda - l_g) / 2.0;
        let omega = (lambda - 3.0 * l_g) / 2.0;
        let (c1, c2) = (self.sigma.lower(), self.sigma.upper());
        let dissipativity = l_g < lambda;
        let extra_dissipativity = omega > 0.0;
        let sigma_elliptic = c1 > 0.0 && c1 <= c2;
        HypothesisReport {
            lambda,
            l_g,
            ell,
            omega,
            sigma_bounds: (c1, c2),
            sigma_lipschitz: self.sigma.lipschitz(),
            f_bounds: fb,
            g_bounds: gb,
            dissipativity,
            extra_dissipativity,
            sigma_elliptic,
            f_bounded: fb.bounded,
            passed: dissipativity && extra_dissipativity && sigma_elliptic,
        }
    }

    fn check_xy(&self, x: &Field, y: &Field) -> Result<()> {
        self.slow.check(x)?;
        self.fast.check(y)
    }

    /// Grid values of `x` (slow) and `y` (fast).
    pub fn synthesize_xy(&self, x: &Field, y: &Field) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_xy(x, y)?;
        Ok((self.grid.synthesize(x), self.grid.synthesize(y)))
    }

    /// Superposition operator `F(x, y)` (slow basis) or `G(x, y)` (fast basis).
    pub fn eval_reaction(&self, which: Reaction, x: &Field, y: &Field) -> Result<Field> {
        let (xg, yg) = self.synthesize_xy(x, y)?;
        let (r, out) = match which {
            Reaction::F => (&self.f, self.slow.id()),
            Reaction::G => (&self.g, self.fast.id()),
        };
        let vals: Vec<f64> = xg.iter().zip(&yg).map(|(&a, &b)| r.value(a, b)).collect();
        Ok(self.grid.analyze(out, &vals))
    }

    /// Gateaux derivatives of the superposition operators applied to `chi`
    /// (and `chi2` for the second derivative in `x`).
    pub fn eval_derivative(
        &self,
        which: Derivative,
        x: &Field,
        y: &Field,
        chi: &Field,
        chi2: Option<&Field>,
    ) -> Result<Field> {
        let (xg, yg) = self.synthesize_xy(x, y)?;
        let (deriv, in_basis, out_basis): (Box<dyn Fn(f64, f64) -> f64>, _, _) = match which {
            Derivative::DxF => (Box::new(|a, b| self.f.dx(a, b)), &self.slow, &self.slow),
            Derivative::DyF => (Box::new(|a, b| self.f.dy(a, b)), &self.fast, &self.slow),
            Derivative::DxG => (Box::new(|a, b| self.g.dx(a, b)), &self.slow, &self.fast),
            Derivative::DyG => (Box::new(|a, b| self.g.dy(a, b)), &self.fast, &self.fast),
            Derivative::DxxF => (Box::new(|a, b| self.f.dxx(a, b)), &self.slow, &self.slow),
        };
        in_basis.check(chi)?;
        let mut cg = self.grid.synthesize(chi);
        if which == Derivative::DxxF {
            let chi2 = chi2.ok_or_else(|| Error::InvalidInput("DxxF needs a second direction".into()))?;
            self.slow.check(chi2)?;
            for (c, c2) in cg.iter_mut().zip(self.grid.synthesize(chi2)) {
                *c *= c2;
            }
        }
        let vals: Vec<f64> = xg.iter().zip(&yg).zip(&cg).map(|((&a, &b), &c)| deriv(a, b) * c).collect();
        Ok(self.grid.analyze(out_basis.id(), &vals))
    }

    /// Multiplication operator `Σ(x, y) u`, `u` and the result on the slow basis.
    pub fn apply_sigma(&self, x: &Field, y: &Field, u: &Field) -> Result<Field> {
        self.check_xy(x, y)?;
        self.slow.check(u)?;
        if let Some(c) = self.sigma.constant() {
            return Ok(u.scaled(c));
        }
        let (xg, yg) = (self.grid.synthesize(x), self.grid.synthesize(y));
        let ug = self.grid.synthesize(u);
        let vals: Vec<f64> = xg.iter().zip(&yg).zip(&ug).map(|((&a, &b), &c)| self.sigma.value(a, b) * c).collect();
        Ok(self.grid.analyze(self.slow.id(), &vals))
    }

    /// Matrix of `Σ(x, y)` on the slow basis. Symmetric; exactly `c·I` for constant σ.
    pub fn sigma_matrix(&self, x: &Field, y: &Field) -> Result<DMatrix<f64>> {
        self.check_xy(x, y)?;
        let n = self.modes();
        if let Some(c) = self.sigma.constant() {
            return Ok(DMatrix::identity(n, n) * c);
        }
        let (xg, yg) = (self.grid.synthesize(x), self.grid.synthesize(y));
        let vals: Vec<f64> = xg.iter().zip(&yg).map(|(&a, &b)| self.sigma.value(a, b)).collect();
        Ok(self.grid.gram(Component::Slow, Component::Slow, &vals))
    }

    /// Matrix of the pointwise multiplier `d(x(ξ), y(ξ))`, rows on `rows`,
    /// columns on `cols`.
    pub fn multiplier_matrix(
        &self,
        d: impl Fn(f64, f64) -> f64,
        xg: &[f64],
        yg: &[f64],
        rows: Component,
        cols: Component,
    ) -> DMatrix<f64> {
        let vals: Vec<f64> = xg.iter().zip(yg).map(|(&a, &b)| d(a, b)).collect();
        self.grid.gram(rows, cols, &vals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::BoundaryCondition;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn model(f: ReactionSpec, g: ReactionSpec, sigma: DiffusionSpec) -> ModelSpec {
        ModelSpec::new(DomainSpec::unit_dirichlet(), 16, f, g, sigma).unwrap()
    }

    fn canon() -> ModelSpec {
        model(ReactionSpec::Zero, ReactionSpec::Zero, DiffusionSpec::Constant { c: 1.0 })
    }

    #[test]
    fn canonical_report() {
        let r = canon().validate_hypotheses();
        assert_eq!(r.lambda, 1.0);
        assert_eq!(r.l_g, 0.0);
        assert_eq!(r.ell, 0.5);
        assert_eq!(r.omega, 0.5);
        assert!(r.passed);
    }

    #[test]
    fn damped_g_reports() {
        let m = model(ReactionSpec::Zero, ReactionSpec::TanhYDamped { kappa: 0.2 }, DiffusionSpec::Constant { c: 1.0 });
        let r = m.validate_hypotheses();
        assert!((r.l_g - 0.2).abs() < 1e-15);
        assert!((r.omega - 0.2).abs() < 1e-15);
        assert!(r.passed);

        let m = model(ReactionSpec::Zero, ReactionSpec::TanhYDamped { kappa: 0.4 }, DiffusionSpec::Constant { c: 1.0 });
        let r = m.validate_hypotheses();
        assert!((r.omega + 0.1).abs() < 1e-15);
        assert!(r.dissipativity);
        assert!(!r.extra_dissipativity);
        assert!(!r.passed);
        assert_eq!(r.failures(), vec!["omega > 0"]);

        let m = model(ReactionSpec::Zero, ReactionSpec::LinearY { b: 1.5 }, DiffusionSpec::Constant { c: 1.0 });
        assert!(!m.validate_hypotheses().dissipativity);
    }

    #[test]
    fn linear_f_is_flagged_unbounded_but_admitted() {
        let m = model(ReactionSpec::LinearY { b: 0.3 }, ReactionSpec::Zero, DiffusionSpec::Constant { c: 1.0 });
        let r = m.validate_hypotheses();
        assert!(!r.f_bounded);
        assert!(r.passed);
    }

    #[test]
    fn linear_reaction_re_expands() {
        let m = model(ReactionSpec::LinearY { b: 0.3 }, ReactionSpec::Zero, DiffusionSpec::Constant { c: 1.0 });
        let fx = m.eval_reaction(Reaction::F, &m.slow.zeros(), &m.fast.unit(0)).unwrap();
        assert!((fx.coeffs[0] - 0.3).abs() < 1e-14);
        for c in &fx.coeffs[1..] {
            assert!(c.abs() < 1e-14);
        }
    }

    #[test]
    fn tanh_reaction_vanishes_at_origin() {
        let m = model(
            ReactionSpec::TanhSum { alpha: 1.0, beta: 0.3 },
            ReactionSpec::Zero,
            DiffusionSpec::Constant { c: 1.0 },
        );
        let fx = m.eval_reaction(Reaction::F, &m.slow.zeros(), &m.fast.zeros()).unwrap();
        assert!(fx.coeffs.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn tanh_reaction_matches_fine_quadrature() {
        let m = model(
            ReactionSpec::TanhSum { alpha: 1.0, beta: 0.0 },
            ReactionSpec::Zero,
            DiffusionSpec::Constant { c: 1.0 },
        );
        let x = m.slow.unit(0).scaled(0.5);
        let fx = m.eval_reaction(Reaction::F, &x, &m.fast.zeros()).unwrap();
        // 10⁴-interval trapezoid of <tanh(0.5 e₁), e₁> on [0, π]
        let amp = (2.0 / PI).sqrt();
        let n = 10_000;
        let h = PI / n as f64;
        let integrand = |xi: f64| (0.5 * amp * xi.sin()).tanh() * amp * xi.sin();
        let oracle: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * integrand(i as f64 * h)
            })
            .sum::<f64>()
            * h;
        assert!((fx.coeffs[0] - oracle).abs() < 1e-8, "{} vs {}", fx.coeffs[0], oracle);
    }

    #[test]
    fn constant_derivatives_of_linear_family() {
        let m = model(ReactionSpec::LinearY { b: 0.3 }, ReactionSpec::Zero, DiffusionSpec::Constant { c: 1.0 });
        let x = m.slow.field((0..16).map(|k| 0.1 * k as f64).collect()).unwrap();
        let y = m.fast.field((0..16).map(|k| (k as f64).cos()).collect()).unwrap();
        let chi_s = m.slow.unit(2);
        let chi_f = m.fast.field((0..16).map(|k| 1.0 / (1.0 + k as f64)).collect()).unwrap();
        let dx = m.eval_derivative(Derivative::DxF, &x, &y, &chi_s, None).unwrap();
        assert!(dx.norm() == 0.0);
        let dy = m.eval_derivative(Derivative::DyF, &x, &y, &chi_f, None).unwrap();
        for (a, b) in dy.coeffs.iter().zip(&chi_f.coeffs) {
            assert!((a - 0.3 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn tanh_dx_at_zero_is_identity() {
        let m = model(
            ReactionSpec::TanhSum { alpha: 1.0, beta: 0.3 },
            ReactionSpec::Zero,
            DiffusionSpec::Constant { c: 1.0 },
        );
        let y = m.fast.field((0..16).map(|k| 0.2 * (k as f64).sin()).collect()).unwrap();
        let chi = m.slow.field((0..16).map(|k| 1.0 / (1.0 + k as f64)).collect()).unwrap();
        let d = m.eval_derivative(Derivative::DxF, &m.slow.zeros(), &y, &chi, None).unwrap();
        for (a, b) in d.coeffs.iter().zip(&chi.coeffs) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dxx_needs_second_direction() {
        let m = canon();
        let z = m.slow.zeros();
        assert!(m.eval_derivative(Derivative::DxxF, &z, &m.fast.zeros(), &z, None).is_err());
        assert!(m.eval_derivative(Derivative::DxxF, &z, &m.fast.zeros(), &z, Some(&z)).is_ok());
    }

    #[test]
    fn dx_finite_difference() {
        let m = model(
            ReactionSpec::TanhSum { alpha: 1.2, beta: 0.3 },
            ReactionSpec::Zero,
            DiffusionSpec::Constant { c: 1.0 },
        );
        let x = m.slow.field((0..16).map(|k| 0.8 / (1.0 + k as f64)).collect()).unwrap();
        let y = m.fast.field((0..16).map(|k| 0.3 * (k as f64).sin()).collect()).unwrap();
        let chi = m.slow.field((0..16).map(|k| (0.5 * k as f64).cos() / (1.0 + k as f64)).collect()).unwrap();
        let f0 = m.eval_reaction(Reaction::F, &x, &y).unwrap();
        let d = m.eval_derivative(Derivative::DxF, &x, &y, &chi, None).unwrap();
        let mut errs = Vec::new();
        for h in [1e-3, 1e-4] {
            let mut xh = x.clone();
            xh.axpy(h, &chi);
            let fh = m.eval_reaction(Reaction::F, &xh, &y).unwrap();
            let fd = fh.sub(&f0).scaled(1.0 / h);
            errs.push(fd.sub(&d).norm());
        }
        // first-order convergence: error ∝ h
        assert!(errs[0] < 5e-3 && errs[1] < 5e-4);
        assert!((errs[0] / errs[1] - 10.0).abs() < 1.0, "{errs:?}");
        // the second-order term matches D²F
        let d2 = m.eval_derivative(Derivative::DxxF, &x, &y, &chi, Some(&chi)).unwrap();
        let mut xh = x.clone();
        xh.axpy(1e-4, &chi);
        let fh = m.eval_reaction(Reaction::F, &xh, &y).unwrap();
        let rem = fh.sub(&f0).sub(&d.scaled(1e-4)).scaled(2.0 / 1e-8);
        assert!(rem.sub(&d2).norm() < 1e-3);
    }

    #[test]
    fn sigma_identity_and_constant() {
        let m = canon();
        let u = m.slow.field((0..16).map(|k| k as f64 - 3.0).collect()).unwrap();
        let x = m.slow.unit(0);
        let y = m.fast.unit(1);
        assert_eq!(m.apply_sigma(&x, &y, &u).unwrap(), u);
        let m2 = model(ReactionSpec::Zero, ReactionSpec::Zero, DiffusionSpec::Constant { c: 2.5 });
        assert_eq!(m2.apply_sigma(&x, &y, &u).unwrap(), u.scaled(2.5));
        assert_eq!(m2.sigma_matrix(&x, &y).unwrap(), DMatrix::identity(16, 16) * 2.5);
    }

    #[test]
    fn basis_mismatch_is_rejected() {
        let m = canon();
        let x = m.slow.zeros();
        assert!(m.eval_reaction(Reaction::F, &x, &x).is_err());
        let other = ModelSpec::new(
            DomainSpec::unit_dirichlet(),
            8,
            ReactionSpec::Zero,
            ReactionSpec::Zero,
            DiffusionSpec::Constant { c: 1.0 },
        )
        .unwrap();
        assert!(m.apply_sigma(&other.slow.zeros(), &m.fast.zeros(), &x).is_err());
    }

    #[test]
    fn quad_point_floor() {
        let r = ModelSpec::with_quad_points(
            DomainSpec::unit_dirichlet(),
            16,
            ReactionSpec::Zero,
            ReactionSpec::Zero,
            DiffusionSpec::Constant { c: 1.0 },
            32,
        );
        assert!(r.is_err());
        let m = canon();
        assert_eq!(m.quad_points(), 33);
    }

    #[test]
    fn sampled_derivatives_respect_reported_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let fams = [
            ReactionSpec::TanhSum { alpha: 1.3, beta: -0.7 },
            ReactionSpec::TanhYDamped { kappa: 0.4 },
            ReactionSpec::LinearY { b: -0.3 },
            ReactionSpec::Zero,
        ];
        for r in fams {
            let b = r.bounds();
            for _ in 0..100_000 {
                let x: f64 = rng.random_range(-6.0..6.0);
                let y: f64 = rng.random_range(-6.0..6.0);
                assert!(r.dx(x, y).abs() <= b.dx + 1e-15);
                assert!(r.dy(x, y).abs() <= b.dy + 1e-15);
                assert!(r.dxx(x, y).abs() <= b.second + 1e-15);
                assert!(r.dyy(x, y).abs() <= b.second + 1e-15);
            }
        }
    }

    #[test]
    fn neumann_bases_work_pseudo_spectrally() {
        let d = DomainSpec::new(1.0, BoundaryCondition::Neumann, BoundaryCondition::Neumann)
            .unwrap()
            .with_fast_mass(1.0)
            .unwrap();
        let m = ModelSpec::new(
            d,
            8,
            ReactionSpec::LinearY { b: 2.0 },
            ReactionSpec::Zero,
            DiffusionSpec::Constant { c: 1.0 },
        )
        .unwrap();
        let y = m.fast.unit(0);
        let fx = m.eval_reaction(Reaction::F, &m.slow.zeros(), &y).unwrap();
        assert!((fx.coeffs[0] - 2.0).abs() < 1e-14);
        assert_eq!(m.validate_hypotheses().lambda, 1.0);
    }

    fn random_field(b: &SpectralBasis, rng: &mut impl Rng, scale: f64) -> Field {
        b.field((0..b.modes()).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn bounded_sigma_norm_bound() {
        let m = model(ReactionSpec::Zero, ReactionSpec::Zero, DiffusionSpec::BoundedSigmoid { c1: 0.5, c2: 1.5 });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = random_field(&m.slow, &mut rng, 2.0);
            let y = random_field(&m.fast, &mut rng, 2.0);
            let u = random_field(&m.slow, &mut rng, 1.0);
            let su = m.apply_sigma(&x, &y, &u).unwrap();
            assert!(su.norm() <= 1.5 * u.norm() * (1.0 + 1e-12));
        }
    }

    proptest! {
        #[test]
        fn sigma_is_self_adjoint(seed in 0u64..10_000) {
            let m = model(ReactionSpec::Zero, ReactionSpec::Zero, DiffusionSpec::BoundedSigmoid { c1: 0.5, c2: 1.5 });
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = random_field(&m.slow, &mut rng, 2.0);
            let y = random_field(&m.fast, &mut rng, 2.0);
            let u = random_field(&m.slow, &mut rng, 1.0);
            let v = random_field(&m.slow, &mut rng, 1.0);
            let lhs = m.apply_sigma(&x, &y, &u).unwrap().dot(&v);
            let rhs = u.dot(&m.apply_sigma(&x, &y, &v).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn reaction_is_lipschitz_in_x(seed in 0u64..10_000) {
            let m = model(ReactionSpec::TanhSum { alpha: 1.5, beta: 0.3 }, ReactionSpec::Zero, DiffusionSpec::Constant { c: 1.0 });
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x1 = random_field(&m.slow, &mut rng, 2.0);
            let x2 = random_field(&m.slow, &mut rng, 2.0);
            let y = random_field(&m.fast, &mut rng, 2.0);
            let d = m.eval_reaction(Reaction::F, &x1, &y).unwrap().sub(&m.eval_reaction(Reaction::F, &x2, &y).unwrap()).norm();
            prop_assert!(d <= 1.5 * x1.sub(&x2).norm() + 1e-8);
        }
    }
}
