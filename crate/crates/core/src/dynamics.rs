//! Time integration of the controlled slow-fast system, the frozen fast process
//! and the first variation equation.
//!
//! Each retained mode is advanced with the exact transition of its linear part.
//! Over one step of length `dt` a mode with rate `κ` contributes
//!
//! ```text
//! z ← e^{-κ dt} z + Φ(κ)·drift + S(κ)·ξ,   Φ = (1 - e^{-κ dt})/κ,   S² = (1 - e^{-2κ dt})/(2κ)
//! ```
//!
//! with the drift (reaction and control) frozen at the left endpoint. For linear
//! drift-free modes this is the exact Ornstein–Uhlenbeck transition. The control
//! enters as a shift of the standard normal draws, which makes the Girsanov
//! weight of the discrete chain available in closed form.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ModelSpec, ReactionSpec};
use crate::rng::NormalStream;
use crate::spectral::{BasisId, Component, Field};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    R1,
    R2,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R1" | "1" => Ok(Regime::R1),
            "R2" | "2" => Ok(Regime::R2),
            _ => invalid(format!("unknown regime {s:?} (expected R1 or R2)")),
        }
    }
}

/// Scale parameters of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeParams {
    pub epsilon: f64,
    pub regime: Regime,
    /// Limit of `√δ/√ε`; zero in the first regime.
    pub gamma: f64,
    pub delta: f64,
    pub h: f64,
    /// Occupation-measure window width.
    pub delta_occ: f64,
    /// Discount rate of the Kolmogorov equation.
    pub c_eps: f64,
}

impl RegimeParams {
    /// Default scalings: `δ = ε^{3/2}` (R1) or `γ²ε` (R2), `h = ε^{-1/4}`,
    /// `Δ = ε^{1/4}`, `c = √ε`. `gamma` is ignored in R1.
    pub fn new(epsilon: f64, regime: Regime, gamma: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return invalid(format!("epsilon must lie in (0, 1), got {epsilon}"));
        }
        let (gamma, delta) = match regime {
            Regime::R1 => (0.0, epsilon.powf(1.5)),
            Regime::R2 => {
                if !(gamma > 0.0 && gamma.is_finite()) {
                    return invalid(format!("regime R2 needs gamma > 0, got {gamma}"));
                }
                (gamma, gamma * gamma * epsilon)
            }
        };
        Ok(Self {
            epsilon,
            regime,
            gamma,
            delta,
            h: epsilon.powf(-0.25),
            delta_occ: epsilon.powf(0.25),
            c_eps: epsilon.sqrt(),
        })
    }

    pub fn r1(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, Regime::R1, 0.0)
    }

    pub fn r2(epsilon: f64, gamma: f64) -> Result<Self> {
        Self::new(epsilon, Regime::R2, gamma)
    }

    /// Replaces the power laws: `δ = ε^{p_δ}` (times `γ²` in R2), `h = ε^{-p_h}`,
    /// `Δ = ε^{p_Δ}`.
    pub fn with_exponents(mut self, p_delta: Option<f64>, p_h: Option<f64>, p_occ: Option<f64>) -> Result<Self> {
        let e = self.epsilon;
        if let Some(p) = p_delta {
            let base = e.powf(p);
            self.delta = match self.regime {
                Regime::R1 => base,
                Regime::R2 => self.gamma * self.gamma * base,
            };
        }
        if let Some(p) = p_h {
            if !(p > 0.0 && p < 0.5) {
                return invalid("h exponent must lie in (0, 1/2)");
            }
            self.h = e.powf(-p);
        }
        if let Some(p) = p_occ {
            self.delta_occ = e.powf(p);
        }
        Ok(self)
    }

    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return invalid("delta must be positive");
        }
        self.delta = delta;
        Ok(self)
    }

    pub fn with_h(mut self, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return invalid("h must be positive");
        }
        self.h = h;
        Ok(self)
    }

    pub fn with_delta_occ(mut self, d: f64) -> Result<Self> {
        if !(d > 0.0) {
            return invalid("occupation window must be positive");
        }
        self.delta_occ = d;
        Ok(self)
    }

    pub fn with_c_eps(mut self, c: f64) -> Result<Self> {
        if !(c >= 0.0) {
            return invalid("discount must be non-negative");
        }
        self.c_eps = c;
        Ok(self)
    }

    /// `√ε·h`, the divisor in the definition of η.
    pub fn eta_scale(&self) -> f64 {
        self.epsilon.sqrt() * self.h
    }

    /// Largest admissible time step of the slow-fast integrator.
    pub fn max_dt(&self) -> f64 {
        self.delta / 10.0
    }
}

/// Closed-loop control `(t, x, y) ↦ (u₁, u₂)` on coefficient vectors.
pub trait FeedbackControl: Send + Sync + std::fmt::Debug {
    fn eval(&self, t: f64, x: &[f64], y: &[f64], u1: &mut [f64], u2: &mut [f64]);
}

#[derive(Debug, Clone)]
pub enum ControlKind {
    Zero,
    /// Piecewise-linear interpolation between the given knots, constant outside.
    OpenLoop {
        times: Vec<f64>,
        u1: Vec<Vec<f64>>,
        u2: Vec<Vec<f64>>,
    },
    Feedback(Arc<dyn FeedbackControl>),
}

#[derive(Debug, Clone)]
pub struct ControlSpec {
    pub kind: ControlKind,
    /// Bound `N` on `∫(‖u₁‖² + ‖u₂‖²) dt`; controls are scaled down once it binds.
    pub energy_cap: f64,
}

impl ControlSpec {
    pub fn zero() -> Self {
        Self { kind: ControlKind::Zero, energy_cap: f64::INFINITY }
    }

    pub fn open_loop(times: Vec<f64>, u1: Vec<Field>, u2: Vec<Field>) -> Result<Self> {
        if times.is_empty() || times.len() != u1.len() || times.len() != u2.len() {
            return invalid("open-loop control needs one (u1, u2) pair per knot");
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("open-loop knots must be strictly increasing");
        }
        Ok(Self {
            kind: ControlKind::OpenLoop {
                times,
                u1: u1.into_iter().map(|f| f.coeffs).collect(),
                u2: u2.into_iter().map(|f| f.coeffs).collect(),
            },
            energy_cap: f64::INFINITY,
        })
    }

    pub fn feedback(control: Arc<dyn FeedbackControl>) -> Self {
        Self { kind: ControlKind::Feedback(control), energy_cap: f64::INFINITY }
    }

    pub fn with_energy_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap > 0.0) {
            return invalid("energy cap must be positive");
        }
        self.energy_cap = cap;
        Ok(self)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, ControlKind::Zero)
    }

    pub(crate) fn eval(&self, t: f64, x: &[f64], y: &[f64], u1: &mut [f64], u2: &mut [f64]) {
        match &self.kind {
            ControlKind::Zero => {
                u1.fill(0.0);
                u2.fill(0.0);
            }
            ControlKind::OpenLoop { times, u1: a, u2: b } => {
                let (i, w) = interp_index(times, t);
                lerp_into(&a[i], &a[(i + 1).min(a.len() - 1)], w, u1);
                lerp_into(&b[i], &b[(i + 1).min(b.len() - 1)], w, u2);
            }
            ControlKind::Feedback(c) => c.eval(t, x, y, u1, u2),
        }
    }
}

/// Index `i` and weight `w` such that `t ≈ (1-w)·times[i] + w·times[i+1]`.
pub(crate) fn interp_index(times: &[f64], t: f64) -> (usize, f64) {
    let n = times.len();
    if n == 1 || t <= times[0] {
        return (0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 1, 0.0);
    }
    let i = times.partition_point(|&s| s <= t) - 1;
    let w = (t - times[i]) / (times[i + 1] - times[i]);
    (i, w)
}

pub(crate) fn lerp_into(a: &[f64], b: &[f64], w: f64, out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = (1.0 - w) * x + w * y;
    }
}

/// Trajectories on a shared uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathBundle {
    pub times: Vec<f64>,
    pub dt: f64,
    pub x: Vec<Field>,
    pub y: Vec<Field>,
    pub eta: Vec<Field>,
    pub z: Vec<Field>,
    pub u1: Vec<Field>,
    pub u2: Vec<Field>,
    pub seed: u64,
    pub stream: u64,
    pub noise_off: bool,
    /// `log dP/dQ` of the realized path (zero for uncontrolled runs).
    pub log_weight: f64,
    pub energy: f64,
    pub clipped: bool,
}

const BUNDLE_MAGIC: &[u8; 8] = b"MDSPDEPB";
const BUNDLE_VERSION: u32 = 1;

impl PathBundle {
    fn empty(times: Vec<f64>, dt: f64, seed: u64, stream: u64, noise_off: bool) -> Self {
        Self {
            times,
            dt,
            x: Vec::new(),
            y: Vec::new(),
            eta: Vec::new(),
            z: Vec::new(),
            u1: Vec::new(),
            u2: Vec::new(),
            seed,
            stream,
            noise_off,
            log_weight: 0.0,
            energy: 0.0,
            clipped: false,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn check_grid(&self, other: &PathBundle) -> Result<()> {
        if self.times.len() != other.times.len() || (self.dt - other.dt).abs() > 1e-12 * self.dt.max(other.dt) {
            return Err(Error::GridMismatch(format!(
                "{} points at dt = {} vs {} points at dt = {}",
                self.times.len(),
                self.dt,
                other.times.len(),
                other.dt
            )));
        }
        Ok(())
    }

    fn components(&self) -> [(&'static str, &Vec<Field>); 6] {
        [("x", &self.x), ("y", &self.y), ("eta", &self.eta), ("z", &self.z), ("u1", &self.u1), ("u2", &self.u2)]
    }

    /// Long-format CSV `t,component,mode,value` (modes 1-based).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,component,mode,value")?;
        for (name, fields) in self.components() {
            for (t, f) in self.times.iter().zip(fields) {
                for (k, v) in f.coeffs.iter().enumerate() {
                    writeln!(w, "{t},{name},{},{v:e}", k + 1)?;
                }
            }
        }
        Ok(())
    }

    /// Binary layout, all little-endian:
    /// magic `MDSPDEPB`, u32 version, u64 time points, u64 modes, u64 seed,
    /// u64 stream, u8 noise-off flag, u8 component mask (bits x, y, eta, z, u1,
    /// u2), f64 dt, f64 log-weight, f64 energy, u8 clipped flag, then the time
    /// grid and every present component as `times × modes` f64 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let modes = self.components().iter().find_map(|(_, f)| f.first().map(|f| f.len())).unwrap_or(0);
        let mut mask = 0u8;
        for (i, (_, f)) in self.components().iter().enumerate() {
            if !f.is_empty() {
                mask |= 1 << i;
            }
        }
        w.write_all(BUNDLE_MAGIC)?;
        w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
        w.write_all(&(self.times.len() as u64).to_le_bytes())?;
        w.write_all(&(modes as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.stream.to_le_bytes())?;
        w.write_all(&[self.noise_off as u8, mask])?;
        for v in [self.dt, self.log_weight, self.energy] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.clipped as u8])?;
        for t in &self.times {
            w.write_all(&t.to_le_bytes())?;
        }
        for (_, fields) in self.components() {
            for f in fields {
                for v in &f.coeffs {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`write_binary`](Self::write_binary); basis ids are supplied
    /// by the caller (x, eta, u1 on `slow`; y, z, u2 on `fast`).
    pub fn read_binary<R: Read>(mut r: R, slow: BasisId, fast: BasisId) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return invalid("not a path bundle file");
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != BUNDLE_VERSION {
            return invalid("unsupported path bundle version");
        }
        let mut u64_ = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let nt = u64_()? as usize;
        let modes = u64_()? as usize;
        let seed = u64_()?;
        let stream = u64_()?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let f64_ = |r: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let dt = f64_(&mut r)?;
        let log_weight = f64_(&mut r)?;
        let energy = f64_(&mut r)?;
        let mut clipped = [0u8; 1];
        r.read_exact(&mut clipped)?;
        let times = (0..nt).map(|_| f64_(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut out = Self::empty(times, dt, seed, stream, flags[0] != 0);
        out.log_weight = log_weight;
        out.energy = energy;
        out.clipped = clipped[0] != 0;
        if modes != slow.modes || modes != fast.modes {
            return invalid("bundle mode count does not match the bases");
        }
        let ids = [slow, fast, slow, fast, slow, fast];
        for (i, id) in ids.iter().enumerate() {
            if flags[1] & (1 << i) == 0 {
                continue;
            }
            let mut fields = Vec::with_capacity(nt);
            for _ in 0..nt {
                let coeffs = (0..modes).map(|_| f64_(&mut r)).collect::<Result<Vec<_>>>()?;
                fields.push(Field { coeffs, basis: *id });
            }
            match i {
                0 => out.x = fields,
                1 => out.y = fields,
                2 => out.eta = fields,
                3 => out.z = fields,
                4 => out.u1 = fields,
                _ => out.u2 = fields,
            }
        }
        Ok(out)
    }
}

/// Per-mode factors of the exponential integrator.
#[derive(Debug, Clone)]
pub(crate) struct ModeFactors {
    pub decay: Vec<f64>,
    pub phi: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ModeFactors {
    /// Factors for rates `scale · a_k`.
    pub fn new(eigenvalues: &[f64], scale: f64, dt: f64) -> Self {
        let mut decay = Vec::with_capacity(eigenvalues.len());
        let mut phi = Vec::with_capacity(eigenvalues.len());
        let mut sd = Vec::with_capacity(eigenvalues.len());
        for &a in eigenvalues {
            let k = a * scale;
            decay.push((-k * dt).exp());
            if k == 0.0 {
                phi.push(dt);
                sd.push(dt.sqrt());
            } else {
                phi.push(-(-k * dt).exp_m1() / k);
                sd.push((-(-2.0 * k * dt).exp_m1() / (2.0 * k)).sqrt());
            }
        }
        Self { decay, phi, sd }
    }
}

/// Number of steps and effective step for `[0, t_end]` with step at most `dt`.
pub(crate) fn time_grid(t_end: f64, dt: f64) -> Result<(usize, f64)> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return invalid(format!("horizon must be positive, got {t_end}"));
    }
    if !(dt > 0.0) {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    let steps = ((t_end / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    Ok((steps, t_end / steps as f64))
}

/// Scratch space for evaluating reaction and diffusion terms from coefficients.
#[derive(Debug, Clone)]
pub(crate) struct Evaluator<'a> {
    pub model: &'a ModelSpec,
    pub xg: Vec<f64>,
    pub yg: Vec<f64>,
    vals: Vec<f64>,
    wg: Vec<f64>,
    same_kind: bool,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a ModelSpec) -> Self {
        let m = model.grid.len();
        Self {
            model,
            xg: vec![0.0; m],
            yg: vec![0.0; m],
            vals: vec![0.0; m],
            wg: vec![0.0; m],
            same_kind: model.slow.kind == model.fast.kind,
        }
    }

    fn reaction_shortcut(&self, r: &ReactionSpec, target: Component) -> bool {
        match r {
            ReactionSpec::Zero => true,
            ReactionSpec::LinearY { .. } => target == Component::Fast || self.same_kind,
            _ => false,
        }
    }

    /// Whether any term needs grid values of the state.
    pub fn needs_grid(&self) -> bool {
        !self.reaction_shortcut(&self.model.f, Component::Slow)
            || !self.reaction_shortcut(&self.model.g, Component::Fast)
            || self.model.sigma.constant().is_none()
    }

    pub fn load_x(&mut self, x: &[f64]) {
        self.model.grid.synthesize_into(Component::Slow, x, &mut self.xg);
    }

    pub fn load_y(&mut self, y: &[f64]) {
        self.model.grid.synthesize_into(Component::Fast, y, &mut self.yg);
    }

    /// Coefficients of `r(x, y)` on the `target` basis; grids must be loaded
    /// unless the reaction has a shortcut.
    pub fn reaction(&mut self, r: &ReactionSpec, target: Component, y: &[f64], out: &mut [f64]) {
        match *r {
            ReactionSpec::Zero => out.fill(0.0),
            ReactionSpec::LinearY { b } if self.reaction_shortcut(r, target) => {
                for (o, v) in out.iter_mut().zip(y) {
                    *o = b * v;
                }
            }
            _ => {
                for ((v, &a), &b) in self.vals.iter_mut().zip(&self.xg).zip(&self.yg) {
                    *v = r.value(a, b);
                }
                self.model.grid.analyze_into(target, &self.vals, out);
            }
        }
    }

    /// `Σ(x, y) w` on the slow basis; grids must be loaded for non-constant σ.
    pub fn sigma(&mut self, w: &[f64], out: &mut [f64]) {
        if let Some(c) = self.model.sigma.constant() {
            for (o, v) in out.iter_mut().zip(w) {
                *o = c * v;
            }
            return;
        }
        let grid = &self.model.grid;
        grid.synthesize_into(Component::Slow, w, &mut self.wg);
        for (((v, &a), &b), &wv) in self.vals.iter_mut().zip(&self.xg).zip(&self.yg).zip(&self.wg) {
            *v = self.model.sigma.value(a, b) * wv;
        }
        grid.analyze_into(Component::Slow, &self.vals, out);
    }

    /// `D_y G(x, y) z` on the fast basis; grids must be loaded unless `∂_y g` is constant.
    pub fn dyg(&mut self, z: &[f64], out: &mut [f64]) {
        if let Some(c) = self.model.g.dy_constant() {
            for (o, v) in out.iter_mut().zip(z) {
                *o = c * v;
            }
            return;
        }
        let grid = &self.model.grid;
        grid.synthesize_into(Component::Fast, z, &mut self.wg);
        for (((v, &a), &b), &zv) in self.vals.iter_mut().zip(&self.xg).zip(&self.yg).zip(&self.wg) {
            *v = self.model.g.dy(a, b) * zv;
        }
        grid.analyze_into(Component::Fast, &self.vals, out);
    }
}

/// Stream selection and switches of a single path.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    pub stream: u64,
    pub antithetic: bool,
    /// Drops the Brownian increments (deterministic tests only).
    pub noise_off: bool,
}

/// Read-only view of the state at one grid point.
pub struct StepView<'s> {
    pub step: usize,
    pub t: f64,
    pub x: &'s [f64],
    pub y: &'s [f64],
    pub u1: &'s [f64],
    pub u2: &'s [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOutcome {
    pub log_weight: f64,
    pub energy: f64,
    pub clipped: bool,
    /// `Σ m²` over steps, modes and channels, with `m` the standardized drift shift.
    pub shift_sq: f64,
    pub steps: usize,
    pub dt: f64,
}

/// Runs one controlled slow-fast path and hands every grid point to `observe`.
#[allow(clippy::too_many_arguments)]
pub fn run_slow_fast(
    model: &ModelSpec,
    regime: &RegimeParams,
    control: &ControlSpec,
    x0: &Field,
    y0: &Field,
    t_end: f64,
    dt: f64,
    seed: u64,
    opts: SimOptions,
    mut observe: impl FnMut(&StepView<'_>),
) -> Result<PathOutcome> {
    model.slow.check(x0)?;
    model.fast.check(y0)?;
    if dt > regime.max_dt() * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt, limit: regime.max_dt() });
    }
    let (steps, dt) = time_grid(t_end, dt)?;
    let n = model.modes();
    let f1 = ModeFactors::new(&model.slow.eigenvalues, 1.0, dt);
    let f2 = ModeFactors::new(&model.fast.eigenvalues, 1.0 / regime.delta, dt);
    let sqrt_eps = regime.epsilon.sqrt();
    let inv_sqrt_delta = 1.0 / regime.delta.sqrt();
    let h = regime.h;
    let controlled = !control.is_zero();
    let capped = control.energy_cap.is_finite();

    let mut ev = Evaluator::new(model);
    let grid = ev.needs_grid();
    let mut stream = if opts.antithetic {
        NormalStream::antithetic(seed, opts.stream)
    } else {
        NormalStream::new(seed, opts.stream)
    };

    let mut x = x0.coeffs.clone();
    let mut y = y0.coeffs.clone();
    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    let mut fx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut xi1 = vec![0.0; n];
    let mut xi2 = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut sw = vec![0.0; n];

    let mut log_w = 0.0;
    let mut shift_sq = 0.0;
    let mut energy = 0.0;
    let mut e_prev = 0.0;
    let mut clipped = false;

    for step in 0..=steps {
        let t = step as f64 * dt;
        if controlled {
            control.eval(t, &x, &y, &mut u1, &mut u2);
            let e: f64 = u1.iter().chain(&u2).map(|v| v * v).sum();
            let mut e_now = e;
            if capped {
                // Reserve the closing half-interval so the trapezoid total never exceeds the cap.
                let (reserved, c) = match step {
                    0 => (0.0, 0.5 * dt),
                    s if s == steps => (0.5 * dt * e_prev, 0.5 * dt),
                    _ => (0.5 * dt * e_prev, dt),
                };
                let avail = control.energy_cap - energy - reserved;
                if c * e > avail {
                    let s = (avail.max(0.0) / (c * e)).sqrt();
                    u1.iter_mut().chain(u2.iter_mut()).for_each(|v| *v *= s);
                    e_now = e * s * s;
                    clipped = true;
                }
            }
            if step > 0 {
                energy += 0.5 * dt * (e_prev + e_now);
            }
            e_prev = e_now;
        }
        observe(&StepView { step, t, x: &x, y: &y, u1: &u1, u2: &u2 });
        if step == steps {
            break;
        }

        if grid {
            ev.load_x(&x);
            ev.load_y(&y);
        }
        ev.reaction(&model.f, Component::Slow, &y, &mut fx);
        ev.reaction(&model.g, Component::Fast, &y, &mut gy);
        if !opts.noise_off {
            stream.fill(&mut xi1);
            stream.fill(&mut xi2);
        }

        for k in 0..n {
            let noise = if opts.noise_off { 0.0 } else { f1.sd[k] * xi1[k] };
            w1[k] = noise + h * f1.phi[k] * u1[k];
        }
        ev.sigma(&w1, &mut sw);
        for k in 0..n {
            x[k] = f1.decay[k] * x[k] + f1.phi[k] * fx[k] + sqrt_eps * sw[k];
        }
        for k in 0..n {
            let noise = if opts.noise_off { 0.0 } else { f2.sd[k] * xi2[k] };
            y[k] = f2.decay[k] * y[k]
                + f2.phi[k] * gy[k] / regime.delta
                + inv_sqrt_delta * (noise + h * f2.phi[k] * u2[k]);
        }
        if controlled && !opts.noise_off {
            for k in 0..n {
                let m1 = h * f1.phi[k] * u1[k] / f1.sd[k];
                let m2 = h * f2.phi[k] * u2[k] / f2.sd[k];
                log_w -= m1 * xi1[k] + 0.5 * m1 * m1 + m2 * xi2[k] + 0.5 * m2 * m2;
                shift_sq += m1 * m1 + m2 * m2;
            }
        }
    }
    Ok(PathOutcome { log_weight: log_w, energy, clipped, shift_sq, steps, dt })
}

/// Controlled slow-fast system on `[0, t_end]`, every grid point recorded.
#[allow(clippy::too_many_arguments)]
pub fn simulate_slow_fast(
    model: &ModelSpec,
    regime: &RegimeParams,
    control: &ControlSpec,
    x0: &Field,
    y0: &Field,
    t_end: f64,
    dt: f64,
    seed: u64,
) -> Result<PathBundle> {
    simulate_slow_fast_with(model, regime, control, x0, y0, t_end, dt, seed, SimOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_slow_fast_with(
    model: &ModelSpec,
    regime: &RegimeParams,
    control: &ControlSpec,
    x0: &Field,
    y0: &Field,
    t_end: f64,
    dt: f64,
    seed: u64,
    opts: SimOptions,
) -> Result<PathBundle> {
    let (sid, fid) = (model.slow.id(), model.fast.id());
    let mut b = PathBundle::empty(Vec::new(), 0.0, seed, opts.stream, opts.noise_off);
    let record_u = !control.is_zero();
    let out = run_slow_fast(model, regime, control, x0, y0, t_end, dt, seed, opts, |s| {
        b.times.push(s.t);
        b.x.push(Field { coeffs: s.x.to_vec(), basis: sid });
        b.y.push(Field { coeffs: s.y.to_vec(), basis: fid });
        if record_u {
            b.u1.push(Field { coeffs: s.u1.to_vec(), basis: sid });
            b.u2.push(Field { coeffs: s.u2.to_vec(), basis: fid });
        }
    })?;
    if !record_u {
        b.u1 = vec![Field::zeros(sid); b.times.len()];
        b.u2 = vec![Field::zeros(fid); b.times.len()];
    }
    b.dt = out.dt;
    b.log_weight = out.log_weight;
    b.energy = out.energy;
    b.clipped = out.clipped;
    Ok(b)
}

/// Runs the fast process with the slow component frozen at `x`, in its own
/// time scale (`δ = 1`), handing `(step, t, y)` to `observe`.
#[allow(clippy::too_many_arguments)]
pub fn run_frozen_fast(
    model: &ModelSpec,
    x: &Field,
    y0: &Field,
    t_end: f64,
    dt: f64,
    seed: u64,
    opts: SimOptions,
    mut observe: impl FnMut(usize, f64, &[f64]),
) -> Result<(usize, f64)> {
    model.slow.check(x)?;
    model.fast.check(y0)?;
    if dt > 0.1 * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt, limit: 0.1 });
    }
    let (steps, dt) = time_grid(t_end, dt)?;
    let n = model.modes();
    let fac = ModeFactors::new(&model.fast.eigenvalues, 1.0, dt);
    let mut ev = Evaluator::new(model);
    let needs_grid = !matches!(model.g, ReactionSpec::Zero | ReactionSpec::LinearY { .. });
    if needs_grid {
        ev.load_x(&x.coeffs);
    }
    let mut stream = if opts.antithetic {
        NormalStream::antithetic(seed, opts.stream)
    } else {
        NormalStream::new(seed, opts.stream)
    };
    let mut y = y0.coeffs.clone();
    let mut gy = vec![0.0; n];
    let mut xi = vec![0.0; n];
    for step in 0..=steps {
        observe(step, step as f64 * dt, &y);
        if step == steps {
            break;
        }
        if needs_grid {
            ev.load_y(&y);
        }
        ev.reaction(&model.g, Component::Fast, &y, &mut gy);
        if !opts.noise_off {
            stream.fill(&mut xi);
        }
        for k in 0..n {
            let noise = if opts.noise_off { 0.0 } else { fac.sd[k] * xi[k] };
            y[k] = fac.decay[k] * y[k] + fac.phi[k] * gy[k] + noise;
        }
    }
    Ok((steps, dt))
}

/// Frozen fast process `Y^{x,y₀}` recorded at every grid point.
pub fn simulate_frozen_fast(
    model: &ModelSpec,
    x: &Field,
    y0: &Field,
    t_end: f64,
    dt: f64,
    seed: u64,
) -> Result<PathBundle> {
    simulate_frozen_fast_with(model, x, y0, t_end, dt, seed, SimOptions::default())
}

pub fn simulate_frozen_fast_with(
    model: &ModelSpec,
    x: &Field,
    y0: &Field,
    t_end: f64,
    dt: f64,
    seed: u64,
    opts: SimOptions,
) -> Result<PathBundle> {
    let fid = model.fast.id();
    let mut b = PathBundle::empty(Vec::new(), 0.0, seed, opts.stream, opts.noise_off);
    let (_, dt) = run_frozen_fast(model, x, y0, t_end, dt, seed, opts, |_, t, y| {
        b.times.push(t);
        b.y.push(Field { coeffs: y.to_vec(), basis: fid });
    })?;
    b.dt = dt;
    Ok(b)
}

/// One exponential-Euler step of `∂_t Z = A₂Z + D_yG(x, Y)Z` in frozen time,
/// with the evaluator's grids already loaded at `(x, Y)`.
pub(crate) fn variation_step(ev: &mut Evaluator<'_>, fac: &ModeFactors, z: &mut [f64], scratch: &mut [f64]) {
    ev.dyg(z, scratch);
    for k in 0..z.len() {
        z[k] = fac.decay[k] * z[k] + fac.phi[k] * scratch[k];
    }
}

/// First variation `Z^v(t) = D_yY^{x,y}(t) v` along a recorded frozen path.
pub fn simulate_first_variation(
    model: &ModelSpec,
    x: &Field,
    y_path: &PathBundle,
    v: &Field,
    dt: f64,
) -> Result<PathBundle> {
    model.slow.check(x)?;
    model.fast.check(v)?;
    if y_path.y.len() < 2 || y_path.y.len() != y_path.times.len() {
        return Err(Error::GridMismatch("fast path must hold Y at every grid point".into()));
    }
    if (y_path.dt - dt).abs() > 1e-12 * dt {
        return Err(Error::GridMismatch(format!("step {dt} differs from the path step {}", y_path.dt)));
    }
    let fac = ModeFactors::new(&model.fast.eigenvalues, 1.0, dt);
    let mut ev = Evaluator::new(model);
    let grid = model.g.dy_constant().is_none();
    if grid {
        ev.load_x(&x.coeffs);
    }
    let mut z = v.coeffs.clone();
    let mut scratch = vec![0.0; z.len()];
    let mut out = PathBundle::empty(y_path.times.clone(), dt, y_path.seed, y_path.stream, y_path.noise_off);
    out.z.push(v.clone());
    for yf in &y_path.y[..y_path.y.len() - 1] {
        model.fast.check(yf)?;
        if grid {
            ev.load_y(&yf.coeffs);
        }
        variation_step(&mut ev, &fac, &mut z, &mut scratch);
        out.z.push(Field { coeffs: z.clone(), basis: v.basis });
    }
    Ok(out)
}

/// `η = (X - X̄)/(√ε h)` on the shared grid; returns `x_path` with `eta` filled.
pub fn compute_eta(x_path: &PathBundle, xbar_path: &PathBundle, regime: &RegimeParams) -> Result<PathBundle> {
    x_path.check_grid(xbar_path)?;
    if x_path.x.len() != x_path.len() || xbar_path.x.len() != xbar_path.len() {
        return Err(Error::GridMismatch("both bundles must carry the slow component".into()));
    }
    let s = 1.0 / regime.eta_scale();
    let mut out = x_path.clone();
    out.eta = x_path
        .x
        .iter()
        .zip(&xbar_path.x)
        .map(|(a, b)| {
            a.same_basis(b)?;
            Ok(a.sub(b).scaled(s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out)
}

/// Convenience: `basis.zeros()` for both components.
pub fn zero_state(model: &ModelSpec) -> (Field, Field) {
    (model.slow.zeros(), model.fast.zeros())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DiffusionSpec;
    use crate::spectral::DomainSpec;
    use crate::stats::mean_se;

    fn model_n(n: usize, f: ReactionSpec, g: ReactionSpec) -> ModelSpec {
        ModelSpec::new(DomainSpec::unit_dirichlet(), n, f, g, DiffusionSpec::Constant { c: 1.0 }).unwrap()
    }

    fn noise_off() -> SimOptions {
        SimOptions { noise_off: true, ..Default::default() }
    }

    #[test]
    fn regime_defaults() {
        let r = RegimeParams::r1(0.04).unwrap();
        assert!((r.delta - 0.008).abs() < 1e-15);
        assert!((r.eta_scale() - 0.2f64.sqrt()).abs() < 1e-14);
        assert_eq!(r.gamma, 0.0);
        let r2 = RegimeParams::r2(0.05, 1.0).unwrap();
        assert!((r2.delta - 0.05).abs() < 1e-15);
        assert!(RegimeParams::r2(0.05, 0.0).is_err());
        assert!(RegimeParams::r1(1.5).is_err());
    }

    #[test]
    fn pure_semigroup_without_noise() {
        let m = model_n(8, ReactionSpec::Zero, ReactionSpec::Zero);
        let r = RegimeParams::r1(0.05).unwrap();
        let b = simulate_slow_fast_with(
            &m,
            &r,
            &ControlSpec::zero(),
            &m.slow.unit(0),
            &m.fast.zeros(),
            1.0,
            1e-3,
            0,
            noise_off(),
        )
        .unwrap();
        for (t, x) in b.times.iter().zip(&b.x) {
            assert!((x.coeffs[0] - (-t).exp()).abs() < 1e-13);
            assert!(x.coeffs[1..].iter().all(|c| *c == 0.0));
        }
    }

    #[test]
    fn fast_relaxation() {
        let m = model_n(4, ReactionSpec::Zero, ReactionSpec::Zero);
        let r = RegimeParams::r1(0.05).unwrap().with_delta(0.01).unwrap();
        let b = simulate_slow_fast_with(
            &m,
            &r,
            &ControlSpec::zero(),
            &m.slow.zeros(),
            &m.fast.unit(0),
            1.0,
            1e-3,
            0,
            noise_off(),
        )
        .unwrap();
        assert!(b.y.last().unwrap().coeffs[0].abs() < 1e-12);
    }

    #[test]
    fn step_guard() {
        let m = model_n(4, ReactionSpec::Zero, ReactionSpec::Zero);
        let r = RegimeParams::r1(0.05).unwrap();
        let (x, y) = zero_state(&m);
        let err = simulate_slow_fast(&m, &r, &ControlSpec::zero(), &x, &y, 1.0, r.delta, 0).unwrap_err();
        assert!(matches!(err, Error::StepTooLarge { .. }));
    }

    #[test]
    fn slow_ou_variance() {
        let m = model_n(4, ReactionSpec::Zero, ReactionSpec::Zero);
        let r = RegimeParams::r1(0.05).unwrap();
        let (x0, y0) = zero_state(&m);
        let finals: Vec<f64> = (0..10_000u64)
            .map(|p| {
                let mut last = 0.0;
                run_slow_fast(
                    &m,
                    &r,
                    &ControlSpec::zero(),
                    &x0,
                    &y0,
                    1.0,
                    r.max_dt(),
                    3,
                    SimOptions { stream: p, ..Default::default() },
                    |s| last = s.x[0],
                )
                .unwrap();
                last
            })
            .collect();
        let sq: Vec<f64> = finals.iter().map(|v| v * v).collect();
        let est = mean_se(&sq);
        let expect = 0.05 * (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((expect - 0.021617).abs() < 1e-6);
        assert!((est.mean - expect).abs() < 3.0 * est.se, "{est:?} vs {expect}");
    }

    #[test]
    fn noise_scales_with_sqrt_epsilon() {
        let m = model_n(4, ReactionSpec::Zero, ReactionSpec::Zero);
        let (x0, y0) = zero_state(&m);
        let inc = |eps: f64| {
            let r = RegimeParams::r1(eps).unwrap().with_delta(1e-3).unwrap();
            let b = simulate_slow_fast(&m, &r, &ControlSpec::zero(), &x0, &y0, 1e-4, 1e-4, 9).unwrap();
            b.x[1].coeffs.clone()
        };
        let a = inc(0.05);
        let b = inc(0.1);
        for (u, v) in a.iter().zip(&b) {
            assert!((v * v / (u * u) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reproducible_bundles() {
        let m = model_n(6, ReactionSpec::TanhSum { alpha: 1.0, beta: 0.3 }, ReactionSpec::TanhYDamped { kappa: 0.2 });
        let r = RegimeParams::r1(0.1).unwrap();
        let (x0, y0) = zero_state(&m);
        let a = simulate_slow_fast(&m, &r, &ControlSpec::zero(), &x0, &y0, 0.2, r.max_dt(), 42).unwrap();
        let b = simulate_slow_fast(&m, &r, &ControlSpec::zero(), &x0, &y0, 0.2, r.max_dt(), 42).unwrap();
        let c = simulate_slow_fast(&m, &r, &ControlSpec::zero(), &x0, &y0, 0.2, r.max_dt(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    /// Per-mode covariance of the linear Gaussian pair, by RK4 on the Lyapunov ODE.
    fn lyapunov_oracle(a: f64, b: f64, eps: f64, delta: f64, t_end: f64) -> [f64; 3] {
        let rhs = |p: [f64; 3]| {
            let (pxx, pxy, pyy) = (p[0], p[1], p[2]);
            let ay = a / delta;
            [-2.0 * a * pxx + 2.0 * b * pxy + eps, -a * pxy - ay * pxy + b * pyy, -2.0 * ay * pyy + 1.0 / delta]
        };
        let steps = 200_000;
        let h = t_end / steps as f64;
        let mut p = [0.0; 3];
        let add = |p: [f64; 3], k: [f64; 3], s: f64| [p[0] + s * k[0], p[1] + s * k[1], p[2] + s * k[2]];
        for _ in 0..steps {
            let k1 = rhs(p);
            let k2 = rhs(add(p, k1, h / 2.0));
            let k3 = rhs(add(p, k2, h / 2.0));
            let k4 = rhs(add(p, k3, h));
            for i in 0..3 {
                p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        p
    }

    #[test]
    fn linear_model_covariance_matches_lyapunov() {
        let b = 1.0;
        let m = model_n(3, ReactionSpec::LinearY { b }, ReactionSpec::Zero);
        let r = RegimeParams::r2(0.05, 1.0).unwrap();
        let (x0, y0) = zero_state(&m);
        let paths = 10_000u64;
        let mut per_mode: Vec<Vec<[f64; 2]>> = (0..3).map(|_| Vec::with_capacity(paths as usize)).collect();
        for p in 0..paths {
            run_slow_fast(
                &m,
                &r,
                &ControlSpec::zero(),
                &x0,
                &y0,
                1.0,
                r.delta / 50.0,
                5,
                SimOptions { stream: p, ..Default::default() },
                |s| {
                    if s.t >= 1.0 - 1e-12 {
                        for (k, v) in per_mode.iter_mut().enumerate() {
                            v.push([s.x[k], s.y[k]]);
                        }
                    }
                },
            )
            .unwrap();
        }
        for (k, s) in per_mode.iter().enumerate() {
            let a = m.slow.eigenvalues[k];
            let oracle = lyapunov_oracle(a, b, r.epsilon, r.delta, 1.0);
            let xx: Vec<f64> = s.iter().map(|v| v[0] * v[0]).collect();
            let xy: Vec<f64> = s.iter().map(|v| v[0] * v[1]).collect();
            let yy: Vec<f64> = s.iter().map(|v| v[1] * v[1]).collect();
            for (vals, want) in [(xx, oracle[0]), (xy, oracle[1]), (yy, oracle[2])] {
                let e = mean_se(&vals);
                assert!((e.mean - want).abs() < 3.0 * e.se, "mode {k}: {e:?} vs {want}");
            }
        }
    }

    #[test]
    fn frozen_process_without_noise_or_reaction() {
        let m = model_n(4, ReactionSpec::Zero, ReactionSpec::Zero);
        let b = simulate_frozen_fast_with(&m, &m.slow.zeros(), &m.fast.unit(0), 2.0, 0.01, 0, noise_off()).unwrap();
        for (t, y) in b.times.iter().zip(&b.y) {
            assert!((y.coeffs[0] - (-t).exp()).abs() < 1e-13);
        }
        let z = simulate_frozen_fast_with(&m, &m.slow.zeros(), &m.fast.zeros(), 2.0, 0.01, 0, noise_off()).unwrap();
        assert!(z.y.iter().all(|y| y.norm() == 0.0));
    }

    #[test]
    fn frozen_ou_stationary_moments() {
        let m = model_n(2, ReactionSpec::Zero, ReactionSpec::Zero);
        let mut finals = vec![Vec::new(); 2];
        for p in 0..4000u64 {
            run_frozen_fast(
                &m,
                &m.slow.zeros(),
                &m.fast.zeros(),
                10.0,
                0.1,
                1,
                SimOptions { stream: p, ..Default::default() },
                |s, _, y| {
                    if s == 100 {
                        finals[0].push(y[0]);
                        finals[1].push(y[1]);
                    }
                },
            )
            .unwrap();
        }
        for (k, want) in [(0, 0.5), (1, 0.125)] {
            let mean = mean_se(&finals[k]);
            assert!(mean.mean.abs() < 3.0 * mean.se);
            let sq: Vec<f64> = finals[k].iter().map(|v| v * v).collect();
            let e = mean_se(&sq);
            assert!((e.mean - want).abs() < 3.0 * e.se, "mode {k}: {e:?}");
        }
    }

    #[test]
    fn first_variation_without_reaction_is_semigroup() {
        let m = model_n(4, ReactionSpec::Zero, ReactionSpec::Zero);
        let yp = simulate_frozen_fast(&m, &m.slow.zeros(), &m.fast.zeros(), 1.0, 0.01, 3).unwrap();
        let z = simulate_first_variation(&m, &m.slow.zeros(), &yp, &m.fast.unit(0), 0.01).unwrap();
        for (t, zf) in z.times.iter().zip(&z.z) {
            assert!((zf.coeffs[0] - (-t).exp()).abs() < 1e-13);
        }
        assert!(simulate_first_variation(&m, &m.slow.zeros(), &yp, &m.fast.unit(0), 0.02).is_err());
    }

    #[test]
    fn first_variation_contracts() {
        let m = model_n(8, ReactionSpec::Zero, ReactionSpec::TanhYDamped { kappa: 0.2 });
        let ell = m.validate_hypotheses().ell;
        let yp = simulate_frozen_fast(&m, &m.slow.zeros(), &m.fast.unit(0).scaled(2.0), 3.0, 0.01, 8).unwrap();
        let v = m.fast.field((0..8).map(|k| 1.0 / (1.0 + k as f64)).collect()).unwrap();
        let z = simulate_first_variation(&m, &m.slow.zeros(), &yp, &v, 0.01).unwrap();
        for (t, zf) in z.times.iter().zip(&z.z) {
            assert!(zf.norm() <= (-ell * t).exp() * v.norm() * (1.0 + 1e-6));
        }
    }

    #[test]
    fn first_variation_step_halving() {
        let m = model_n(6, ReactionSpec::Zero, ReactionSpec::TanhYDamped { kappa: 0.2 });
        let x = m.slow.zeros();
        let y0 = m.fast.field(vec![1.5, -0.7, 0.4, 0.0, 0.2, 0.1]).unwrap();
        let v = m.fast.unit(0);
        let z_at = |dt: f64| {
            let yp = simulate_frozen_fast_with(&m, &x, &y0, 1.0, dt, 0, noise_off()).unwrap();
            simulate_first_variation(&m, &x, &yp, &v, dt).unwrap().z.last().unwrap().clone()
        };
        let (z1, z2, z4) = (z_at(0.02), z_at(0.01), z_at(0.005));
        let oracle = z2.scaled(2.0).sub(&z1);
        let e1 = z1.sub(&oracle).norm();
        let e2 = z2.sub(&z4.scaled(2.0).sub(&z2)).norm();
        assert!(e1 < 0.02 * 2.0, "{e1}");
        assert!((e1 / e2 - 2.0).abs() < 0.3, "{e1} {e2}");
    }

    #[test]
    fn eta_scaling() {
        let m = model_n(4, ReactionSpec::Zero, ReactionSpec::Zero);
        let mk = |c: f64| {
            let mut b = PathBundle::empty(vec![0.0, 0.5], 0.5, 0, 0, true);
            b.x = vec![m.slow.unit(0).scaled(c); 2];
            b
        };
        let r = RegimeParams::r1(0.04).unwrap();
        let e = compute_eta(&mk(0.3), &mk(0.2), &r).unwrap();
        assert!((e.eta[1].coeffs[0] - 0.1 / 0.04f64.powf(0.25)).abs() < 1e-12);
        assert!((e.eta[1].coeffs[0] - 0.223_607).abs() < 1e-6);
        let r = RegimeParams::r1(0.0016).unwrap();
        let e = compute_eta(&mk(0.3), &mk(0.2), &r).unwrap();
        assert!((e.eta[0].coeffs[0] - 0.5).abs() < 1e-12);
        let same = compute_eta(&mk(0.3), &mk(0.3), &r).unwrap();
        assert!(same.eta.iter().all(|f| f.norm() == 0.0));
        let mut short = mk(0.2);
        short.times.pop();
        short.x.pop();
        assert!(compute_eta(&mk(0.3), &short, &r).is_err());
    }

    #[test]
    fn energy_cap_clips_and_accounts() {
        let m = model_n(4, ReactionSpec::Zero, ReactionSpec::Zero);
        let r = RegimeParams::r1(0.05).unwrap();
        let (x0, y0) = zero_state(&m);
        let u = m.slow.unit(0).scaled(2.0);
        let ctl = ControlSpec::open_loop(vec![0.0, 1.0], vec![u.clone(), u], vec![m.fast.zeros(), m.fast.zeros()])
            .unwrap()
            .with_energy_cap(1.5)
            .unwrap();
        let b = simulate_slow_fast(&m, &r, &ctl, &x0, &y0, 1.0, r.max_dt(), 1).unwrap();
        assert!(b.clipped);
        assert!(b.energy <= 1.5 + 1e-12);
        let trap: f64 =
            b.u1.windows(2)
                .zip(b.u2.windows(2))
                .map(|(a, c)| {
                    0.5 * b.dt * (a[0].norm().powi(2) + c[0].norm().powi(2) + a[1].norm().powi(2) + c[1].norm().powi(2))
                })
                .sum();
        assert!((trap - b.energy).abs() < 1e-10);
        let free = ctl.clone().with_energy_cap(10.0).unwrap();
        let b = simulate_slow_fast(&m, &r, &free, &x0, &y0, 1.0, r.max_dt(), 1).unwrap();
        assert!(!b.clipped);
        assert!((b.energy - 4.0).abs() < 1e-9);
    }

    #[test]
    fn binary_round_trip() {
        let m = model_n(3, ReactionSpec::Zero, ReactionSpec::Zero);
        let r = RegimeParams::r1(0.1).unwrap();
        let (x0, y0) = zero_state(&m);
        let b = simulate_slow_fast(&m, &r, &ControlSpec::zero(), &x0, &y0, 0.05, r.max_dt(), 4).unwrap();
        let mut buf = Vec::new();
        b.write_binary(&mut buf).unwrap();
        let back = PathBundle::read_binary(&buf[..], m.slow.id(), m.fast.id()).unwrap();
        assert_eq!(b, back);
        let mut csv = Vec::new();
        b.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,component,mode,value\n"));
        assert_eq!(text.lines().count(), 1 + 4 * b.len() * 3);
    }
}
