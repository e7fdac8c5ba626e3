//! TOML run configuration. Every table rejects unknown keys.
//!
//! ```toml
//! [model]
//! modes = 16
//! f = { family = "linear_y", b = 0.3 }
//! g = { family = "zero" }
//! sigma = { family = "constant", c = 1.0 }
//!
//! [regime]
//! epsilon = 0.05
//! regime = "R1"
//!
//! [run]
//! t_end = 1.0
//! seed = 7
//! paths = 1000
//!
//! [output]
//! directory = "out"
//! formats = ["csv", "json"]
//! ```

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Regime, RegimeParams};
use crate::error::{Error, Result};
use crate::model::{DiffusionSpec, ModelSpec, ReactionSpec};
use crate::spectral::{BoundaryCondition, DomainSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub regime: RegimeSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "dirichlet")]
    pub bc_slow: BoundaryCondition,
    #[serde(default = "dirichlet")]
    pub bc_fast: BoundaryCondition,
    #[serde(default = "one")]
    pub diffusivity_slow: f64,
    #[serde(default = "one")]
    pub diffusivity_fast: f64,
    #[serde(default)]
    pub fast_mass: f64,
    pub modes: usize,
    pub quad_points: Option<usize>,
    pub f: ReactionSpec,
    pub g: ReactionSpec,
    pub sigma: DiffusionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    pub epsilon: f64,
    pub regime: Regime,
    /// Second regime only; defaults to one.
    pub gamma: Option<f64>,
    /// Exponent overrides: `δ = ε^p_delta`, `h = ε^{-p_h}`, `Δ = ε^p_occ`.
    pub p_delta: Option<f64>,
    pub p_h: Option<f64>,
    pub p_occ: Option<f64>,
    pub c_eps: Option<f64>,
}

impl Default for RegimeSection {
    fn default() -> Self {
        Self { epsilon: 0.05, regime: Regime::R1, gamma: None, p_delta: None, p_h: None, p_occ: None, c_eps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "one")]
    pub t_end: f64,
    /// Slow-fast step; `δ/10` when absent.
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Step of the target paths used by rate, controls, estimate and asymptote.
    #[serde(default = "default_psi_dt")]
    pub psi_dt: f64,
    #[serde(default = "default_invariant_samples")]
    pub invariant_samples: usize,
    #[serde(default = "default_psi2_paths")]
    pub psi2_paths: usize,
    #[serde(default = "default_q_samples")]
    pub q_samples: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            dt: None,
            seed: None,
            paths: default_paths(),
            psi_dt: default_psi_dt(),
            invariant_samples: default_invariant_samples(),
            psi2_paths: default_psi2_paths(),
            q_samples: default_q_samples(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: default_directory(), formats: default_formats() }
    }
}

fn default_length() -> f64 {
    PI
}
fn dirichlet() -> BoundaryCondition {
    BoundaryCondition::Dirichlet
}
fn one() -> f64 {
    1.0
}
fn default_paths() -> usize {
    1000
}
fn default_psi_dt() -> f64 {
    1e-3
}
fn default_invariant_samples() -> usize {
    1000
}
fn default_psi2_paths() -> usize {
    16
}
fn default_q_samples() -> usize {
    32
}
fn default_directory() -> String {
    "out".into()
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {}", e.message())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    /// Checks that do not need the model to be built.
    fn check(&self) -> Result<()> {
        let r = &self.run;
        if !(r.t_end > 0.0 && r.t_end.is_finite()) {
            return Err(Error::InvalidInput("run.t_end must be positive".into()));
        }
        if matches!(r.dt, Some(dt) if !(dt > 0.0)) || !(r.psi_dt > 0.0) {
            return Err(Error::InvalidInput("time steps must be positive".into()));
        }
        if r.paths == 0 || r.invariant_samples == 0 || r.psi2_paths == 0 || r.q_samples == 0 {
            return Err(Error::InvalidInput("sample counts must be positive".into()));
        }
        if self.output.formats.is_empty() {
            return Err(Error::InvalidInput("output.formats must not be empty".into()));
        }
        self.model()?;
        self.regime()?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let domain = DomainSpec::new(m.length, m.bc_slow, m.bc_fast)?
            .with_diffusivity(m.diffusivity_slow, m.diffusivity_fast)?
            .with_fast_mass(m.fast_mass)?;
        match m.quad_points {
            Some(q) => ModelSpec::with_quad_points(domain, m.modes, m.f, m.g, m.sigma, q),
            None => ModelSpec::new(domain, m.modes, m.f, m.g, m.sigma),
        }
    }

    pub fn regime(&self) -> Result<RegimeParams> {
        let r = &self.regime;
        let base = match r.regime {
            Regime::R1 => {
                if r.gamma.is_some_and(|g| g != 0.0) {
                    return Err(Error::InvalidInput("regime.gamma applies to R2 only".into()));
                }
                RegimeParams::r1(r.epsilon)?
            }
            Regime::R2 => RegimeParams::r2(r.epsilon, r.gamma.unwrap_or(1.0))?,
        };
        let mut out = base.with_exponents(r.p_delta, r.p_h, r.p_occ)?;
        if let Some(c) = r.c_eps {
            out = out.with_c_eps(c)?;
        }
        Ok(out)
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LIN: &str = r#"
[model]
modes = 8
f = { family = "linear_y", b = 0.3 }
g = { family = "zero" }
sigma = { family = "constant", c = 1.0 }

[regime]
epsilon = 0.05
regime = "R2"
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(LIN).unwrap();
        assert_eq!(c.model.length, PI);
        assert_eq!(c.run.t_end, 1.0);
        assert_eq!(c.regime().unwrap().gamma, 1.0);
        assert_eq!(c.output.formats, vec![Format::Csv, Format::Json]);
        assert_eq!(c.model().unwrap().modes(), 8);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(&format!("{LIN}\nextra = 1\n")).is_err());
        assert!(RunConfig::parse(&LIN.replace("b = 0.3", "b = 0.3, q = 1")).is_err());
        assert!(RunConfig::parse(&format!("{LIN}\n[run]\nsteps = 3\n")).is_err());
        assert!(RunConfig::parse(&LIN.replace("R2", "R3")).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse(&LIN.replace("epsilon = 0.05", "epsilon = -1.0")).is_err());
        assert!(RunConfig::parse(&LIN.replace("modes = 8", "modes = 0")).is_err());
        assert!(RunConfig::parse(&format!("{LIN}\n[run]\nt_end = 0.0\n")).is_err());
    }
}
