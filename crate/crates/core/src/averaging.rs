//! Invariant measure of the frozen fast process, averaged drift and Jacobian,
//! and the deterministic averaged slow equation.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{run_frozen_fast, time_grid, ModeFactors, PathBundle, SimOptions};
use crate::error::{invalid, Error, Result};
use crate::model::{Derivative, ModelSpec, Reaction};
use crate::rng::derive_seed;
use crate::spectral::{Component, Field};
use crate::stats::{batch_mean_se, batch_ranges};

const TAG_INVARIANT: u64 = 0x1A7A_0001;

/// Ergodic samples of `μ^x`, stored chain by chain (equal counts per chain).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantSample {
    pub frozen_x: Field,
    pub samples: Vec<Field>,
    pub chains: usize,
    pub burn_in: f64,
    pub thinning: f64,
    pub dt: f64,
    pub seed: u64,
}

impl InvariantSample {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One batch per chain, the unit of the batch-means standard errors.
    pub fn batches(&self) -> Vec<Range<usize>> {
        if self.chains >= 2 {
            batch_ranges(self.samples.len(), self.chains)
        } else {
            batch_ranges(self.samples.len(), 20)
        }
    }

    /// Values of mode `k` across all samples.
    pub fn mode_values(&self, k: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.coeffs[k]).collect()
    }

    /// CSV `sample_index,mode,value` (modes 1-based).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sample_index,mode,value")?;
        for (i, s) in self.samples.iter().enumerate() {
            for (k, v) in s.coeffs.iter().enumerate() {
                writeln!(w, "{i},{},{v:e}", k + 1)?;
            }
        }
        Ok(())
    }
}

/// Default burn-in `10/ℓ` and thinning `1/ℓ`.
pub fn default_times(model: &ModelSpec) -> Result<(f64, f64)> {
    let rep = model.validate_hypotheses();
    rep.require_dissipative()?;
    Ok((10.0 / rep.ell, 1.0 / rep.ell))
}

/// Samples `μ^x` with 20 independent chains started at `y = 0`.
pub fn sample_invariant(
    model: &ModelSpec,
    x: &Field,
    count: usize,
    burn_in: Option<f64>,
    thinning: Option<f64>,
    dt: f64,
    seed: u64,
) -> Result<InvariantSample> {
    sample_invariant_chains(model, x, count, 20, burn_in, thinning, dt, seed)
}

/// As [`sample_invariant`] with an explicit chain count; the total is
/// `ceil(count / chains) · chains`.
#[allow(clippy::too_many_arguments)]
pub fn sample_invariant_chains(
    model: &ModelSpec,
    x: &Field,
    count: usize,
    chains: usize,
    burn_in: Option<f64>,
    thinning: Option<f64>,
    dt: f64,
    seed: u64,
) -> Result<InvariantSample> {
    model.slow.check(x)?;
    if count == 0 || chains == 0 {
        return invalid("sample count and chain count must be positive");
    }
    let (b0, t0) = default_times(model)?;
    let burn_in = burn_in.unwrap_or(b0);
    let thinning = thinning.unwrap_or(t0);
    if !(burn_in >= 0.0 && thinning > 0.0) {
        return invalid("burn-in must be non-negative and thinning positive");
    }
    let chains = chains.min(count);
    let per = count.div_ceil(chains);
    let (_, dt) = time_grid(thinning, dt)?;
    let thin_steps = (thinning / dt).round().max(1.0) as usize;
    let burn_steps = (burn_in / dt).round() as usize;
    let total = burn_steps + (per - 1) * thin_steps;
    let chain_seed = derive_seed(seed, TAG_INVARIANT);
    let y0 = model.fast.zeros();
    let fid = model.fast.id();

    let per_chain: Vec<Result<Vec<Field>>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut out = Vec::with_capacity(per);
            let opts = SimOptions { stream: c as u64, ..Default::default() };
            let record = |step: usize, _t: f64, y: &[f64]| {
                if step >= burn_steps && (step - burn_steps).is_multiple_of(thin_steps) {
                    out.push(Field { coeffs: y.to_vec(), basis: fid });
                }
            };
            if total == 0 {
                out.push(y0.clone());
            } else {
                run_frozen_fast(model, x, &y0, total as f64 * dt, dt, chain_seed, opts, record)?;
            }
            out.truncate(per);
            Ok(out)
        })
        .collect();
    let mut samples = Vec::with_capacity(per * chains);
    for c in per_chain {
        samples.extend(c?);
    }
    Ok(InvariantSample {
        frozen_x: x.clone(),
        samples,
        chains,
        burn_in: burn_steps as f64 * dt,
        thinning: thin_steps as f64 * dt,
        dt,
        seed,
    })
}

/// A field-valued Monte Carlo estimate with per-coefficient standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldEstimate {
    pub value: Field,
    pub se: Vec<f64>,
}

impl FieldEstimate {
    fn exact(value: Field) -> Self {
        let se = vec![0.0; value.len()];
        Self { value, se }
    }

    /// `√(Σ se_k²)`, the standard error of the field in norm.
    pub fn se_norm(&self) -> f64 {
        self.se.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

fn check_frozen(model: &ModelSpec, x: &Field, inv: &InvariantSample) -> Result<()> {
    model.slow.check(x)?;
    if inv.samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if model.g.depends_on_x() {
        let tol = 0.5 * CACHE_RESOLUTION * (1.0 + 1e-9);
        if x.coeffs.iter().zip(&inv.frozen_x.coeffs).any(|(a, b)| (a - b).abs() > tol) {
            return invalid("invariant sample was drawn for a different slow state");
        }
    }
    Ok(())
}

/// Mean over samples of a field-valued function, with chain batch-means SE.
fn sample_mean(inv: &InvariantSample, eval: impl Fn(&Field) -> Result<Field> + Sync + Send) -> Result<FieldEstimate> {
    let vals = inv.samples.par_iter().map(eval).collect::<Result<Vec<_>>>()?;
    let basis = vals[0].basis;
    let n = vals[0].len();
    let batches = inv.batches();
    let mut value = Field::zeros(basis);
    let mut se = vec![0.0; n];
    let mut column = vec![0.0; vals.len()];
    for (k, s) in se.iter_mut().enumerate() {
        for (c, v) in column.iter_mut().zip(&vals) {
            *c = v.coeffs[k];
        }
        let est = batch_mean_se(&column, &batches);
        value.coeffs[k] = est.mean;
        *s = if est.se.is_nan() { 0.0 } else { est.se };
    }
    Ok(FieldEstimate { value, se })
}

/// Sample mean of `F(0, y) - F(0, 0)`, the `y`-part of an additive reaction.
fn y_part_mean(model: &ModelSpec, inv: &InvariantSample) -> Result<FieldEstimate> {
    let zero_x = model.slow.zeros();
    let base = model.eval_reaction(Reaction::F, &zero_x, &model.fast.zeros())?;
    sample_mean(inv, |y| Ok(model.eval_reaction(Reaction::F, &zero_x, y)?.sub(&base)))
}

/// `F̄(x)`: mean of `F(x, y)` over the invariant sample.
pub fn averaged_drift(model: &ModelSpec, x: &Field, inv: &InvariantSample) -> Result<FieldEstimate> {
    check_frozen(model, x, inv)?;
    let y0 = model.fast.zeros();
    if !model.f.depends_on_y() {
        return Ok(FieldEstimate::exact(model.eval_reaction(Reaction::F, x, &y0)?));
    }
    if model.f.is_additive() {
        let mut part = y_part_mean(model, inv)?;
        part.value = part.value.add(&model.eval_reaction(Reaction::F, x, &y0)?);
        return Ok(part);
    }
    sample_mean(inv, |y| model.eval_reaction(Reaction::F, x, y))
}

/// `D̄ₓF(x)χ`: mean of `D_xF(x, y)χ` over the invariant sample.
pub fn averaged_jacobian(model: &ModelSpec, x: &Field, inv: &InvariantSample, chi: &Field) -> Result<FieldEstimate> {
    check_frozen(model, x, inv)?;
    if !model.f.dx_depends_on_y() {
        let y0 = model.fast.zeros();
        return Ok(FieldEstimate::exact(model.eval_derivative(Derivative::DxF, x, &y0, chi, None)?));
    }
    sample_mean(inv, |y| model.eval_derivative(Derivative::DxF, x, y, chi, None))
}

/// Matrix of `D̄ₓF(x)` on the slow basis.
pub fn averaged_jacobian_matrix(model: &ModelSpec, x: &Field, inv: Option<&InvariantSample>) -> Result<DMatrix<f64>> {
    model.slow.check(x)?;
    let xg = model.grid.synthesize(x);
    let gram_at =
        |yg: &[f64]| model.multiplier_matrix(|a, b| model.f.dx(a, b), &xg, yg, Component::Slow, Component::Slow);
    if !model.f.dx_depends_on_y() {
        return Ok(gram_at(&vec![0.0; xg.len()]));
    }
    let inv = inv.ok_or(Error::EmptySample)?;
    check_frozen(model, x, inv)?;
    let n = model.modes();
    let mut acc = DMatrix::zeros(n, n);
    for y in &inv.samples {
        acc += gram_at(&model.grid.synthesize(y));
    }
    Ok(acc / inv.samples.len() as f64)
}

/// Resolution of the quantized cache key.
pub const CACHE_RESOLUTION: f64 = 1e-3;

/// How invariant samples are drawn and reused along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvariantPolicy {
    pub count: usize,
    pub chains: usize,
    pub burn_in: Option<f64>,
    pub thinning: Option<f64>,
    pub dt: f64,
    pub seed: u64,
    /// Time between re-samplings of `μ^{X̄(t)}`.
    pub refresh: f64,
    pub cache: bool,
}

impl Default for InvariantPolicy {
    fn default() -> Self {
        Self { count: 1000, chains: 20, burn_in: None, thinning: None, dt: 0.02, seed: 0, refresh: 0.1, cache: true }
    }
}

impl InvariantPolicy {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Invariant samples keyed by a quantized copy of `x`.
///
/// Samples are drawn at the quantized state with a seed derived from the key,
/// so the result for a key never depends on insertion order. When `g` does not
/// depend on `x` a single global entry is used.
#[derive(Debug, Default)]
pub struct InvariantCache {
    map: RwLock<HashMap<Vec<i64>, Arc<InvariantSample>>>,
}

impl InvariantCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(model: &ModelSpec, x: &Field) -> Vec<i64> {
        if model.g.depends_on_x() {
            x.coeffs.iter().map(|c| (c / CACHE_RESOLUTION).round() as i64).collect()
        } else {
            Vec::new()
        }
    }

    pub fn get(&self, model: &ModelSpec, x: &Field, policy: &InvariantPolicy) -> Result<Arc<InvariantSample>> {
        let key = Self::key(model, x);
        if policy.cache {
            if let Some(s) = self.map.read().expect("cache lock").get(&key) {
                return Ok(s.clone());
            }
        }
        let at = if key.is_empty() {
            model.slow.zeros()
        } else {
            model.slow.field(key.iter().map(|&k| k as f64 * CACHE_RESOLUTION).collect())?
        };
        let seed = key.iter().fold(derive_seed(policy.seed, key.len() as u64), |s, &k| derive_seed(s, k as u64));
        let sample = Arc::new(sample_invariant_chains(
            model,
            &at,
            policy.count,
            policy.chains,
            policy.burn_in,
            policy.thinning,
            policy.dt,
            seed,
        )?);
        if policy.cache {
            self.map.write().expect("cache lock").entry(key).or_insert_with(|| sample.clone());
        }
        Ok(sample)
    }
}

/// `F̄` evaluator that reuses the sample set and its `y`-average between refreshes.
struct DriftOracle<'a> {
    model: &'a ModelSpec,
    policy: InvariantPolicy,
    cache: &'a InvariantCache,
    y_part: Option<Field>,
    inv: Option<Arc<InvariantSample>>,
    next_refresh: f64,
}

impl<'a> DriftOracle<'a> {
    fn new(model: &'a ModelSpec, policy: InvariantPolicy, cache: &'a InvariantCache) -> Self {
        Self { model, policy, cache, y_part: None, inv: None, next_refresh: 0.0 }
    }

    fn eval(&mut self, t: f64, x: &Field) -> Result<Field> {
        let model = self.model;
        let y0 = model.fast.zeros();
        if !model.f.depends_on_y() {
            return model.eval_reaction(Reaction::F, x, &y0);
        }
        if self.inv.is_none() || t >= self.next_refresh - 1e-12 {
            let inv = self.cache.get(model, x, &self.policy)?;
            if model.f.is_additive() {
                self.y_part = Some(y_part_mean(model, &inv)?.value);
            }
            self.inv = Some(inv);
            self.next_refresh = t + self.policy.refresh;
        }
        let inv = self.inv.as_ref().expect("refreshed above");
        match &self.y_part {
            Some(p) => Ok(model.eval_reaction(Reaction::F, x, &y0)?.add(p)),
            None => {
                let mut acc = model.slow.zeros();
                for y in &inv.samples {
                    acc.axpy(1.0, &model.eval_reaction(Reaction::F, x, y)?);
                }
                Ok(acc.scaled(1.0 / inv.samples.len() as f64))
            }
        }
    }
}

/// Solves `∂_t X̄ = A₁X̄ + F̄(X̄)` by exponential Euler on `[0, t_end]`.
pub fn solve_averaged(
    model: &ModelSpec,
    x0: &Field,
    t_end: f64,
    dt: f64,
    policy: &InvariantPolicy,
) -> Result<PathBundle> {
    solve_averaged_cached(model, x0, t_end, dt, policy, &InvariantCache::new())
}

pub fn solve_averaged_cached(
    model: &ModelSpec,
    x0: &Field,
    t_end: f64,
    dt: f64,
    policy: &InvariantPolicy,
    cache: &InvariantCache,
) -> Result<PathBundle> {
    model.slow.check(x0)?;
    if !(policy.refresh > 0.0) {
        return invalid("refresh interval must be positive");
    }
    let (steps, dt) = time_grid(t_end, dt)?;
    let fac = ModeFactors::new(&model.slow.eigenvalues, 1.0, dt);
    let mut oracle = DriftOracle::new(model, *policy, cache);
    let mut x = x0.clone();
    let mut bundle = PathBundle {
        times: Vec::with_capacity(steps + 1),
        dt,
        x: Vec::with_capacity(steps + 1),
        y: Vec::new(),
        eta: Vec::new(),
        z: Vec::new(),
        u1: Vec::new(),
        u2: Vec::new(),
        seed: policy.seed,
        stream: 0,
        noise_off: true,
        log_weight: 0.0,
        energy: 0.0,
        clipped: false,
    };
    for step in 0..=steps {
        let t = step as f64 * dt;
        bundle.times.push(t);
        bundle.x.push(x.clone());
        if step == steps {
            break;
        }
        let fbar = oracle.eval(t, &x)?;
        for k in 0..x.len() {
            x.coeffs[k] = fac.decay[k] * x.coeffs[k] + fac.phi[k] * fbar.coeffs[k];
        }
    }
    Ok(bundle)
}
