//! Eigenbasis representation of the two elliptic operators.
//!
//! Both operators are constant-coefficient `-c·∂²` on `(0, L)` with Dirichlet
//! (sine modes) or Neumann (cosine modes) boundary conditions, so eigenpairs are
//! closed form. A [`Field`] is a coefficient vector in one of the two bases; its
//! L² norm is the Euclidean norm of the coefficients.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Slow,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Sine,
    Cosine,
}

/// Interval and boundary data for both operators.
///
/// `diffusivity_*` are the constants `c_i` in `A_i = c_i ∂²`. `fast_mass` shifts
/// the fast operator to `A_2 - m I`; it is what makes a Neumann fast operator
/// strictly dissipative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub length: f64,
    pub bc_slow: BoundaryCondition,
    pub bc_fast: BoundaryCondition,
    pub diffusivity_slow: f64,
    pub diffusivity_fast: f64,
    pub fast_mass: f64,
}

impl DomainSpec {
    pub fn new(length: f64, bc_slow: BoundaryCondition, bc_fast: BoundaryCondition) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return invalid(format!("domain length must be positive, got {length}"));
        }
        Ok(Self { length, bc_slow, bc_fast, diffusivity_slow: 1.0, diffusivity_fast: 1.0, fast_mass: 0.0 })
    }

    /// `(0, π)` with Dirichlet conditions on both components.
    pub fn unit_dirichlet() -> Self {
        Self::new(PI, BoundaryCondition::Dirichlet, BoundaryCondition::Dirichlet).expect("π > 0")
    }

    pub fn with_diffusivity(mut self, slow: f64, fast: f64) -> Result<Self> {
        if !(slow > 0.0 && fast > 0.0) {
            return invalid("diffusivities must be positive");
        }
        self.diffusivity_slow = slow;
        self.diffusivity_fast = fast;
        Ok(self)
    }

    pub fn with_fast_mass(mut self, mass: f64) -> Result<Self> {
        if !(mass >= 0.0 && mass.is_finite()) {
            return invalid("fast mass term must be non-negative");
        }
        self.fast_mass = mass;
        Ok(self)
    }
}

/// Identity of a basis; two fields are compatible iff their ids agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisId {
    pub component: Component,
    pub kind: BasisKind,
    pub modes: usize,
}

impl fmt::Display for BasisId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{:?}/{}", self.component, self.kind, self.modes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralBasis {
    pub component: Component,
    pub kind: BasisKind,
    pub length: f64,
    /// Eigenvalues of `-A_i`, non-decreasing.
    pub eigenvalues: Vec<f64>,
    /// Uniform bound on `|e_k(ξ)|`.
    pub sup_norm_bound: f64,
}

impl SpectralBasis {
    pub fn id(&self) -> BasisId {
        BasisId { component: self.component, kind: self.kind, modes: self.eigenvalues.len() }
    }

    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Smallest eigenvalue (λ for the fast operator).
    pub fn lambda(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Value of the `k`-th (0-based) basis function at `xi`.
    pub fn eval(&self, k: usize, xi: f64) -> f64 {
        let l = self.length;
        match self.kind {
            BasisKind::Sine => (2.0 / l).sqrt() * ((k + 1) as f64 * PI * xi / l).sin(),
            BasisKind::Cosine if k == 0 => 1.0 / l.sqrt(),
            BasisKind::Cosine => (2.0 / l).sqrt() * (k as f64 * PI * xi / l).cos(),
        }
    }

    pub fn check(&self, x: &Field) -> Result<()> {
        if x.basis != self.id() {
            return Err(Error::BasisMismatch { expected: self.id(), found: x.basis });
        }
        Ok(())
    }

    pub fn zeros(&self) -> Field {
        Field::zeros(self.id())
    }

    /// The `k`-th (0-based) basis vector.
    pub fn unit(&self, k: usize) -> Field {
        let mut f = self.zeros();
        f.coeffs[k] = 1.0;
        f
    }

    pub fn field(&self, coeffs: Vec<f64>) -> Result<Field> {
        Field::from_coeffs(self.id(), coeffs)
    }
}

/// Builds the first `n` eigenpairs of the requested component's operator.
pub fn build_basis(domain: &DomainSpec, component: Component, n: usize) -> Result<SpectralBasis> {
    if n == 0 {
        return invalid("mode count must be at least 1");
    }
    let (bc, c, mass) = match component {
        Component::Slow => (domain.bc_slow, domain.diffusivity_slow, 0.0),
        Component::Fast => (domain.bc_fast, domain.diffusivity_fast, domain.fast_mass),
    };
    let l = domain.length;
    let (kind, eigenvalues): (BasisKind, Vec<f64>) = match bc {
        BoundaryCondition::Dirichlet => {
            (BasisKind::Sine, (1..=n).map(|k| c * (k as f64 * PI / l).powi(2) + mass).collect())
        }
        BoundaryCondition::Neumann => {
            (BasisKind::Cosine, (0..n).map(|k| c * (k as f64 * PI / l).powi(2) + mass).collect())
        }
    };
    if component == Component::Fast && eigenvalues[0] <= 0.0 {
        return Err(Error::Hypothesis(format!(
            "fast operator is not strictly dissipative: smallest eigenvalue {} (add a positive fast mass term)",
            eigenvalues[0]
        )));
    }
    let sup_norm_bound = match kind {
        BasisKind::Sine => (2.0 / l).sqrt(),
        BasisKind::Cosine if n == 1 => 1.0 / l.sqrt(),
        BasisKind::Cosine => (2.0 / l).sqrt(),
    };
    Ok(SpectralBasis { component, kind, length: l, eigenvalues, sup_norm_bound })
}

/// Coefficient vector of an element of L²(0, L) in a given eigenbasis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub coeffs: Vec<f64>,
    pub basis: BasisId,
}

impl Field {
    pub fn zeros(basis: BasisId) -> Self {
        Self { coeffs: vec![0.0; basis.modes], basis }
    }

    pub fn from_coeffs(basis: BasisId, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.modes {
            return invalid(format!("field has {} coefficients, basis {} has {}", coeffs.len(), basis, basis.modes));
        }
        Ok(Self { coeffs, basis })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Field) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, s: f64) -> Field {
        Field { coeffs: self.coeffs.iter().map(|c| c * s).collect(), basis: self.basis }
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Field) {
        for (c, o) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *c += a * o;
        }
    }

    pub fn sub(&self, other: &Field) -> Field {
        Field { coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect(), basis: self.basis }
    }

    pub fn add(&self, other: &Field) -> Field {
        Field { coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect(), basis: self.basis }
    }

    pub fn same_basis(&self, other: &Field) -> Result<()> {
        if self.basis != other.basis {
            return Err(Error::BasisMismatch { expected: self.basis, found: other.basis });
        }
        Ok(())
    }
}

/// Applies `S(t) = exp(tA)`: coefficient `k` is multiplied by `exp(-a_k t)`.
pub fn apply_semigroup(basis: &SpectralBasis, t: f64, x: &Field) -> Result<Field> {
    if !(t >= 0.0) {
        return invalid(format!("semigroup time must be non-negative, got {t}"));
    }
    basis.check(x)?;
    Ok(Field {
        coeffs: x.coeffs.iter().zip(&basis.eigenvalues).map(|(c, a)| c * (-a * t).exp()).collect(),
        basis: x.basis,
    })
}

/// Graph norm of `(-A)^{θ/2}`: `(Σ a_k^θ c_k²)^{1/2}`.
pub fn sobolev_norm(basis: &SpectralBasis, theta: f64, x: &Field) -> Result<f64> {
    if !(theta >= 0.0) {
        return invalid(format!("Sobolev index must be non-negative, got {theta}"));
    }
    basis.check(x)?;
    Ok(x.coeffs.iter().zip(&basis.eigenvalues).map(|(c, a)| a.powf(theta) * c * c).sum::<f64>().sqrt())
}

/// Orthogonal projection onto the first `m` modes.
pub fn project_modes(x: &Field, m: usize) -> Result<Field> {
    if m == 0 || m > x.len() {
        return invalid(format!("projection rank {m} outside 1..={}", x.len()));
    }
    let mut out = x.clone();
    for c in out.coeffs.iter_mut().skip(m) {
        *c = 0.0;
    }
    Ok(out)
}

/// Midpoint collocation grid shared by both bases.
///
/// On `ξ_j = (j + ½) L / M` the discrete sine and cosine transforms are exactly
/// orthogonal for all mode indices below `M`, so synthesis followed by analysis
/// is the identity on retained modes.
#[derive(Debug, Clone)]
pub struct Collocation {
    pub points: Vec<f64>,
    /// Quadrature weight `L / M`.
    pub weight: f64,
    slow: Vec<f64>,
    fast: Vec<f64>,
    modes_slow: usize,
    modes_fast: usize,
}

impl Collocation {
    pub fn new(slow: &SpectralBasis, fast: &SpectralBasis, points: usize) -> Result<Self> {
        let need = 2 * slow.modes().max(fast.modes()) + 1;
        if points < need {
            return invalid(format!("need at least {need} collocation points, got {points}"));
        }
        let l = slow.length;
        let xs: Vec<f64> = (0..points).map(|j| (j as f64 + 0.5) * l / points as f64).collect();
        let table = |b: &SpectralBasis| -> Vec<f64> {
            let mut t = Vec::with_capacity(points * b.modes());
            for &xi in &xs {
                for k in 0..b.modes() {
                    t.push(b.eval(k, xi));
                }
            }
            t
        };
        Ok(Self {
            weight: l / points as f64,
            slow: table(slow),
            fast: table(fast),
            modes_slow: slow.modes(),
            modes_fast: fast.modes(),
            points: xs,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn table(&self, c: Component) -> (&[f64], usize) {
        match c {
            Component::Slow => (&self.slow, self.modes_slow),
            Component::Fast => (&self.fast, self.modes_fast),
        }
    }

    /// `e_k(ξ_j)` for the given component, 0-based `k`.
    #[inline]
    pub fn basis_value(&self, c: Component, j: usize, k: usize) -> f64 {
        let (t, n) = self.table(c);
        t[j * n + k]
    }

    /// Grid values of `x`.
    pub fn synthesize(&self, x: &Field) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.synthesize_into(x.basis.component, &x.coeffs, &mut out);
        out
    }

    pub fn synthesize_into(&self, c: Component, coeffs: &[f64], out: &mut [f64]) {
        let (t, n) = self.table(c);
        for (j, o) in out.iter_mut().enumerate() {
            let row = &t[j * n..(j + 1) * n];
            *o = row.iter().zip(coeffs).map(|(e, c)| e * c).sum();
        }
    }

    /// Coefficients of grid values on the given basis.
    pub fn analyze(&self, basis: BasisId, values: &[f64]) -> Field {
        let mut coeffs = vec![0.0; basis.modes];
        self.analyze_into(basis.component, values, &mut coeffs);
        Field { coeffs, basis }
    }

    pub fn analyze_into(&self, c: Component, values: &[f64], out: &mut [f64]) {
        let (t, n) = self.table(c);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, v) in values.iter().enumerate() {
            let row = &t[j * n..(j + 1) * n];
            for (o, e) in out.iter_mut().zip(row) {
                *o += v * e;
            }
        }
        for o in out.iter_mut() {
            *o *= self.weight;
        }
    }

    /// Matrix of the multiplication operator by `values`, rows on `rows`
    /// basis, columns on `cols` basis (both restricted to their mode counts).
    pub fn gram(&self, rows: Component, cols: Component, values: &[f64]) -> nalgebra::DMatrix<f64> {
        let (tr, nr) = self.table(rows);
        let (tc, nc) = self.table(cols);
        let mut g = nalgebra::DMatrix::<f64>::zeros(nr, nc);
        for (j, v) in values.iter().enumerate() {
            let wv = v * self.weight;
            let rr = &tr[j * nr..(j + 1) * nr];
            let rc = &tc[j * nc..(j + 1) * nc];
            for (k, ek) in rr.iter().enumerate() {
                let s = wv * ek;
                for (i, ei) in rc.iter().enumerate() {
                    g[(k, i)] += s * ei;
                }
            }
        }
        g
    }
}
