//! Study configuration read from TOML.
//!
//! ```toml
//! [study]
//! scheme = "btz"
//! n = [8, 16, 32]
//! paths = 100000
//! seed = 7
//!
//! [driver]
//! kind = "quadratic"
//! gamma = 1.0
//! ```
//!
//! Every section is optional and every key has a default. Unknown keys are
//! errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::btz::WeightSpec;
use crate::condexp::{BasisSpec, CondExpEstimator};
use crate::driver::{default_truncation, DriverSpec, PointKind, TerminalFunctional};
use crate::error::{Error, Result};
use crate::forward::DriftSpec;
use crate::grid::NoiseMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Forward,
    Quadrature,
    Btz,
    Zvonkin,
}

/// Which reference a BTZ sweep is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePolicy {
    /// closed-form oracle when one exists, else a finer coupled run
    #[default]
    Auto,
    Oracle,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub scheme: Scheme,
    pub n: Vec<usize>,
    pub paths: usize,
    /// moment order of the strong error
    pub p: u32,
    pub seed: u64,
    /// fine steps per coarse step of the reference
    pub reference_factor: usize,
    pub reference: ReferencePolicy,
    /// paths simulated at once by the forward study
    pub chunk: usize,
    /// run sweep points concurrently
    pub parallel: bool,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            scheme: Scheme::Btz,
            n: vec![8, 16, 32, 64],
            paths: 10_000,
            p: 1,
            seed: 1,
            reference_factor: 8,
            reference: ReferencePolicy::Auto,
            chunk: 4096,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub horizon: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { horizon: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub mode: NoiseMode,
    pub dims: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { mode: NoiseMode::Gaussian, dims: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftName {
    Zero,
    Constant,
    TimeOnly,
    Sine,
    Tanh,
    ClampedHolder,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSection {
    pub kind: DriftName,
    /// constant value or time-only amplitude
    pub value: f64,
    pub alpha: f64,
    /// initial state, repeated over dimensions
    pub x0: f64,
}

impl Default for DriftSection {
    fn default() -> Self {
        DriftSection { kind: DriftName::Zero, value: 1.0, alpha: 0.5, x0: 0.0 }
    }
}

impl DriftSection {
    pub fn build(&self) -> Result<DriftSpec> {
        Ok(match self.kind {
            DriftName::Zero => DriftSpec::zero(),
            DriftName::Constant => DriftSpec::constant(self.value),
            DriftName::TimeOnly => DriftSpec::time_only(self.value),
            DriftName::Sine => DriftSpec::sine(),
            DriftName::Tanh => DriftSpec::tanh(),
            DriftName::ClampedHolder => DriftSpec::clamped_holder(self.alpha)?,
            DriftName::Step => DriftSpec::step(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverName {
    Quadratic,
    Linear,
    SinQuadratic,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriverSection {
    pub kind: DriverName,
    pub gamma: f64,
    pub a: f64,
    /// one entry per dimension, or a single entry repeated
    pub c: Vec<f64>,
    pub alpha0: f64,
    /// truncation level; absent means the default level, `0` disables it
    pub truncation: Option<f64>,
}

impl Default for DriverSection {
    fn default() -> Self {
        DriverSection { kind: DriverName::Quadratic, gamma: 1.0, a: 0.0, c: vec![0.0], alpha0: 0.5, truncation: None }
    }
}

impl DriverSection {
    pub fn build(&self, dims: usize) -> Result<DriverSpec> {
        match self.kind {
            DriverName::Quadratic => DriverSpec::quadratic(self.gamma),
            DriverName::Linear => {
                let c = match self.c.len() {
                    1 => vec![self.c[0]; dims],
                    k if k == dims => self.c.clone(),
                    k => return Err(Error::Config(format!("driver.c has {k} entries for {dims} dimensions"))),
                };
                DriverSpec::linear(self.a, c)
            }
            DriverName::SinQuadratic => DriverSpec::sin_quadratic(self.alpha0),
            DriverName::Zero => Ok(DriverSpec::zero()),
        }
    }

    /// Truncation level to use, `None` for the plain driver.
    pub fn level(&self, driver: &DriverSpec, terminal: &TerminalFunctional, horizon: f64) -> Option<f64> {
        match self.truncation {
            Some(n) if n <= 0.0 => None,
            Some(n) => Some(n),
            None if terminal.bound().is_finite() => {
                Some(default_truncation(terminal.bound(), driver.constants().lambda_y, horizon))
            }
            None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalName {
    Identity,
    Clamp,
    Sine,
    Constant,
    Lookback,
    Asian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalSection {
    pub kind: TerminalName,
    /// clamp level or constant value
    pub level: f64,
    /// `‖ξ‖∞`, clamps the terminal values; `inf` leaves them unclamped
    pub bound: Option<f64>,
}

impl Default for TerminalSection {
    fn default() -> Self {
        TerminalSection { kind: TerminalName::Clamp, level: 1.0, bound: Some(1.0) }
    }
}

impl TerminalSection {
    pub fn build(&self) -> Result<TerminalFunctional> {
        let bound = self.bound.unwrap_or(f64::INFINITY);
        match self.kind {
            TerminalName::Identity => TerminalFunctional::terminal(PointKind::Identity, bound),
            TerminalName::Clamp => TerminalFunctional::terminal(PointKind::Clamp { level: self.level }, bound),
            TerminalName::Sine => TerminalFunctional::terminal(PointKind::Sine, bound),
            TerminalName::Constant => TerminalFunctional::terminal(PointKind::Constant(self.level), bound),
            TerminalName::Lookback => TerminalFunctional::lookback(bound),
            TerminalName::Asian => TerminalFunctional::asian(bound),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightName {
    ClampedGaussian,
    RademacherNative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub kind: WeightName,
    /// clamp level; absent means `2√(ln N)`
    pub r: Option<f64>,
}

impl Default for WeightsSection {
    fn default() -> Self {
        WeightsSection { kind: WeightName::ClampedGaussian, r: None }
    }
}

impl WeightsSection {
    pub fn build(&self) -> WeightSpec {
        match self.kind {
            WeightName::ClampedGaussian => WeightSpec::ClampedGaussian { r: self.r },
            WeightName::RademacherNative => WeightSpec::RademacherNative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendName {
    Lsmc,
    ExactTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFamily {
    Polynomial,
    Bins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondExpSection {
    pub backend: BackendName,
    pub family: BasisFamily,
    pub degree: usize,
    pub bins: usize,
    /// basis richness multiplier of the finer reference run
    pub reference_richness: usize,
}

impl Default for CondExpSection {
    fn default() -> Self {
        CondExpSection {
            backend: BackendName::Lsmc,
            family: BasisFamily::Polynomial,
            degree: 3,
            bins: 32,
            reference_richness: 1,
        }
    }
}

impl CondExpSection {
    pub fn basis(&self) -> BasisSpec {
        match self.family {
            BasisFamily::Polynomial => BasisSpec::Polynomial { degree: self.degree },
            BasisFamily::Bins => BasisSpec::Bins { count: self.bins },
        }
    }

    pub fn build(&self) -> CondExpEstimator {
        match self.backend {
            BackendName::Lsmc => CondExpEstimator::Lsmc(self.basis()),
            BackendName::ExactTree => CondExpEstimator::ExactTree,
        }
    }

    pub fn build_reference(&self) -> CondExpEstimator {
        match self.backend {
            BackendName::Lsmc => CondExpEstimator::Lsmc(self.basis().richer(self.reference_richness.max(1))),
            BackendName::ExactTree => CondExpEstimator::ExactTree,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeSection {
    /// damping; absent means search by doubling from 1
    pub lambda: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// half-width of the region of interest; the box adds a margin
    pub interior: f64,
    pub dx: f64,
    pub time_steps: usize,
    /// bound on `sup |u'|` for the search
    pub target: f64,
    pub ceiling: f64,
}

impl Default for PdeSection {
    fn default() -> Self {
        PdeSection {
            lambda: None,
            tol: 1e-12,
            max_iter: 200,
            interior: 4.0,
            dx: 0.02,
            time_steps: 200,
            target: 0.5,
            ceiling: 1024.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub study: StudySection,
    pub partition: PartitionSection,
    pub noise: NoiseSection,
    pub drift: DriftSection,
    pub driver: DriverSection,
    pub terminal: TerminalSection,
    pub weights: WeightsSection,
    pub condexp: CondExpSection,
    pub pde: PdeSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.study;
        if s.scheme != Scheme::Zvonkin {
            if s.n.len() < 2 {
                return Err(Error::Config("study.n needs at least two entries".into()));
            }
            if s.n.windows(2).any(|w| w[0] >= w[1]) || s.n[0] == 0 {
                return Err(Error::Config("study.n must be positive and strictly increasing".into()));
            }
            if s.paths < 2 {
                return Err(Error::Config("study.paths must be at least 2".into()));
            }
        }
        if s.reference_factor < 2 {
            return Err(Error::Config("study.reference_factor must be at least 2".into()));
        }
        if s.p == 0 {
            return Err(Error::Config("study.p must be positive".into()));
        }
        if !(self.partition.horizon > 0.0) {
            return Err(Error::Config("partition.horizon must be positive".into()));
        }
        if self.noise.dims == 0 {
            return Err(Error::Config("noise.dims must be positive".into()));
        }
        Ok(())
    }

    /// Canonical serialization, used for hashing and echoed in reports.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn x0(&self) -> Vec<f64> {
        vec![self.drift.x0; self.noise.dims]
    }
}
