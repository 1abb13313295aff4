//! Versioned JSON scenario files and their wiring into the core library.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smolux_core::dynamics::{DynamicsModel, DynamicsSpec};
use smolux_core::feynman_kac::McConfig;
use smolux_core::kernel_field::{KernelField, SpatialGrid};
use smolux_core::mass_measure::{BaseMeasure, BaseMeasureSpec};
use smolux_core::reaction::{Reaction, ReactionSpec};
use smolux_core::rng::aux_stream;
use smolux_core::solver::{global_threshold, SolverConfig, SolverMode};
use smolux_core::{Error, Result};

pub const SCHEMA: &str = "smolux/1";

/// Initial data. `norm_fraction_of_threshold` rescales the field so that `||mu0||`
/// is that fraction of the small-data threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Constant {
        value: f64,
        #[serde(default)]
        norm_fraction_of_threshold: Option<f64>,
    },
    /// `amplitude * exp(-|x - center|^2 / (2 width^2)) * exp(-mass_decay * bin)`.
    GaussianBump {
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
        #[serde(default)]
        mass_decay: f64,
        #[serde(default)]
        norm_fraction_of_threshold: Option<f64>,
    },
    /// Independent uniform draws on `[0, scale)` from the scenario seed.
    Random {
        scale: f64,
        #[serde(default)]
        norm_fraction_of_threshold: Option<f64>,
    },
}

impl InitialSpec {
    pub fn norm_fraction(&self) -> Option<f64> {
        match self {
            InitialSpec::Constant { norm_fraction_of_threshold, .. }
            | InitialSpec::GaussianBump { norm_fraction_of_threshold, .. }
            | InitialSpec::Random { norm_fraction_of_threshold, .. } => *norm_fraction_of_threshold,
        }
    }
}

fn default_sweeps() -> usize {
    50
}

fn default_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub mode: SolverMode,
    pub dt_quad: f64,
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    pub n_paths: usize,
    /// Euler-Maruyama step of the transport paths.
    pub dt: f64,
    #[serde(default)]
    pub antithetic: bool,
    /// Run the positivity-preserving damped scheme.
    #[serde(default)]
    pub positivity: bool,
    #[serde(default)]
    pub positivity_alpha: Option<f64>,
    #[serde(default)]
    pub segment_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Write a binary field snapshot every `snapshot_every` time steps (0 = never).
    #[serde(default)]
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "suite", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValidationSpec {
    Semigroup { times: Vec<f64> },
    Continuity { times: Vec<f64> },
    /// Euler paths at each `dt` against the RK4 flow, at time `t`.
    ConvectionOracle { t: f64, dt_levels: Vec<f64> },
    /// Stepwise solver on a transport-free grid against the RK4 reference.
    HomogeneousOracle {
        dt_levels: Vec<f64>,
        #[serde(default = "default_homogeneous_tol")]
        tol: f64,
    },
    Lipschitz { trials: usize },
}

fn default_homogeneous_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    pub grid: SpatialGrid<f64>,
    pub base: BaseMeasureSpec<f64>,
    pub dynamics: DynamicsSpec<f64>,
    #[serde(default)]
    pub reaction: ReactionSpec<f64>,
    pub initial: InitialSpec,
    pub solver: SolverSpec,
    pub horizon: f64,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub validation: Option<ValidationSpec>,
    #[serde(default)]
    pub waive: Vec<String>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        if s.schema != SCHEMA {
            return Err(Error::Config(format!("unsupported schema {:?}, expected {SCHEMA:?}", s.schema)));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((Self::from_json(&text)?, text))
    }
}

/// A scenario with every component constructed.
pub struct Built {
    pub grid: Arc<SpatialGrid<f64>>,
    pub base: Arc<BaseMeasure<f64>>,
    /// Whether a declared convolution constant dominates the exact ratio (true when certified here).
    pub base_ok: bool,
    pub model: DynamicsModel<f64>,
    pub reaction: Reaction<f64>,
    pub mu0: KernelField<f64>,
    pub cfg: SolverConfig<f64>,
    pub seed: u64,
}

impl Built {
    /// `eps / (M (C/2 + m))` for this scenario.
    pub fn threshold(&self) -> f64 {
        let c = self.base.conv_constant().unwrap_or(f64::INFINITY);
        global_threshold(self.model.eps_floor, self.reaction.bound_m(), c, self.base.total_mass())
    }
}

pub fn build(s: &Scenario, seed: u64) -> Result<Built> {
    s.grid.validate()?;
    let grid = Arc::new(s.grid.clone());
    let (base, base_ok) = s.base.build()?;
    let base = Arc::new(base);
    let model = s.dynamics.build(grid.dim)?;
    let reaction = s.reaction.build(&base)?;
    let mc = McConfig { n_paths: s.solver.n_paths, dt: s.solver.dt, seed, antithetic: s.solver.antithetic };
    let cfg = SolverConfig {
        mode: s.solver.mode,
        dt_quad: s.solver.dt_quad,
        picard_tol: s.solver.picard_tol,
        max_sweeps: s.solver.max_sweeps,
        mc,
        positivity_alpha: s.solver.positivity_alpha,
        segment_steps: s.solver.segment_steps,
    };
    cfg.validate()?;
    if !(s.horizon >= 0.0) {
        return Err(Error::Config(format!("horizon must be >= 0, got {}", s.horizon)));
    }
    cfg.n_steps(s.horizon)?;
    let mu0 = initial_field(&s.initial, &grid, &base, seed)?;
    let mut built = Built { grid, base, base_ok, model, reaction, mu0, cfg, seed };
    if let Some(frac) = s.initial.norm_fraction() {
        let thr = built.threshold();
        if !thr.is_finite() {
            return Err(Error::Config("norm_fraction_of_threshold needs a finite threshold (coagulation and a certified base)".into()));
        }
        let norm = built.mu0.norm();
        if norm == 0.0 {
            return Err(Error::Config("cannot rescale zero initial data".into()));
        }
        built.mu0 = KernelField::scale(frac * thr / norm, &built.mu0);
    }
    Ok(built)
}

fn initial_field(spec: &InitialSpec, grid: &Arc<SpatialGrid<f64>>, base: &Arc<BaseMeasure<f64>>, seed: u64) -> Result<KernelField<f64>> {
    match spec {
        InitialSpec::Constant { value, .. } => Ok(KernelField::constant(grid.clone(), base.clone(), *value)),
        InitialSpec::GaussianBump { amplitude, center, width, mass_decay, .. } => {
            if center.len() != grid.dim {
                return Err(Error::Config(format!("bump center needs {} coordinates", grid.dim)));
            }
            if !(*width > 0.0) {
                return Err(Error::Config("bump width must be positive".into()));
            }
            KernelField::from_fn(grid.clone(), base.clone(), |x, m| {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                amplitude * (-r2 / (2.0 * width * width)).exp() * (-mass_decay * m as f64).exp()
            })
        }
        InitialSpec::Random { scale, .. } => {
            let mut rng = aux_stream(seed, 1);
            KernelField::from_fn(grid.clone(), base.clone(), |_, _| scale * rng.random::<f64>())
        }
    }
}
