//! Run configuration (JSON, `"version": 1`).

use serde::Deserialize;

use measpoly::continuum::{preset, PRESETS};
use measpoly::measures::{DEFAULT_MAX_DEGREE, SymCoeff};
use measpoly::nalgebra::DMatrix;
use measpoly::{Grid, MeasureVec, OperatorSpec, PolyRep};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub grid: GridConfig,
    #[serde(default)]
    pub operator: Option<OperatorConfig>,
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub moments: Option<MomentsConfig>,
    #[serde(default)]
    pub laplace: Option<LaplaceConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub futures: Option<FuturesConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GridConfig {
    Points(Vec<f64>),
    Labels(usize),
    Uniform { start: f64, end: f64, nodes: usize },
    Preset { name: String, nodes: usize },
}

/// Missing arrays default to zero.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub b: Option<Vec<f64>>,
    pub b1: Option<Vec<Vec<f64>>>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<Vec<f64>>>,
    pub pi: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub loadings: Vec<Vec<f64>>,
    pub max_degree: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// ODE steps and Euler steps; ODE steps are chosen automatically when absent.
    pub steps: Option<usize>,
    pub paths: Option<usize>,
}

/// Largest coefficient tensor accepted from a config.
pub const MAX_TENSOR_LEN: usize = 1 << 24;

pub const DEFAULT_PATHS: usize = 10_000;
pub const DEFAULT_SIM_STEPS: usize = 1000;

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolyConfig {
    Constant(f64),
    Linear(Vec<f64>),
    Power { g: Vec<f64>, n: usize },
    /// Dense row-major coefficient tensors; symmetrized on load.
    Terms(Vec<TermConfig>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub degree: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    pub polynomial: PolyConfig,
    /// Output times; defaults to `[horizon]`.
    pub times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaplaceConfig {
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPoly {
    pub name: String,
    pub polynomial: PolyConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Summary polynomials; total mass when empty.
    #[serde(default)]
    pub polynomials: Vec<NamedPoly>,
    pub record_stride: Option<usize>,
    #[serde(default)]
    pub binary: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeliveryPeriod {
    pub tau1: f64,
    pub tau2: f64,
    /// One weight per grid node in `[tau1, tau2]`; uniform `1/count` if absent.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuturesConfig {
    pub periods: Vec<DeliveryPeriod>,
    #[serde(default = "default_true")]
    pub bands: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub functions: usize,
    #[serde(default = "default_inner")]
    pub inner: usize,
    pub restarts: Option<usize>,
}

fn default_inner() -> usize {
    2
}

/// Everything a command needs, checked for consistency.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub grid: Grid,
    pub spec: OperatorSpec,
    pub initial: MeasureVec,
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::Schema(msg.into())
}

fn matrix(name: &str, rows: &Option<Vec<Vec<f64>>>, m: usize) -> Result<Option<DMatrix<f64>>, CliError> {
    let Some(rows) = rows else { return Ok(None) };
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(schema(format!("operator.{name} must be {m}x{m}")));
    }
    Ok(Some(DMatrix::from_fn(m, m, |i, j| rows[i][j])))
}

fn vector(name: &str, v: &Option<Vec<f64>>, m: usize) -> Result<Option<Vec<f64>>, CliError> {
    match v {
        Some(v) if v.len() != m => Err(schema(format!("{name} must have {m} entries, found {}", v.len()))),
        other => Ok(other.clone()),
    }
}

impl OperatorConfig {
    pub fn build(&self, m: usize) -> Result<OperatorSpec, CliError> {
        let mut spec = OperatorSpec::zero(m);
        if let Some(b) = vector("operator.b", &self.b, m)? {
            spec = spec.with_b(b);
        }
        if let Some(a) = vector("operator.alpha", &self.alpha, m)? {
            spec = spec.with_alpha(a);
        }
        if let Some(b1) = matrix("b1", &self.b1, m)? {
            spec = spec.with_b1(b1);
        }
        if let Some(beta) = matrix("beta", &self.beta, m)? {
            spec = spec.with_beta(beta);
        }
        if let Some(pi) = matrix("pi", &self.pi, m)? {
            spec = spec.with_pi(pi);
        }
        for a in &self.loadings {
            if a.len() != m {
                return Err(schema(format!("operator.loadings entries must have {m} entries")));
            }
            spec = spec.with_loading(a.clone());
        }
        let spec = spec.with_max_degree(self.max_degree.unwrap_or(DEFAULT_MAX_DEGREE));
        spec.check_shapes().map_err(|e| schema(e.to_string()))?;
        Ok(spec)
    }
}

impl PolyConfig {
    pub fn build(&self, m: usize) -> Result<PolyRep, CliError> {
        let check = |name: &str, g: &[f64]| {
            if g.len() == m {
                Ok(())
            } else {
                Err(schema(format!("{name} must have {m} entries, found {}", g.len())))
            }
        };
        match self {
            Self::Constant(v) => Ok(PolyRep::constant(m, *v)),
            Self::Linear(g) => {
                check("linear coefficient", g)?;
                Ok(PolyRep::linear(g))
            }
            Self::Power { g, n } => {
                check("power coefficient", g)?;
                if m.checked_pow(*n as u32).is_none_or(|len| len > MAX_TENSOR_LEN) {
                    return Err(schema(format!("power {n} on {m} nodes is too large to store")));
                }
                Ok(PolyRep::power(g, *n))
            }
            Self::Terms(terms) => {
                let top = terms.iter().map(|t| t.degree).max().unwrap_or(0);
                let mut dense: Vec<SymCoeff> = (0..=top).map(|k| SymCoeff::zero(m, k)).collect();
                for t in terms {
                    let c = SymCoeff::from_dense(m, t.degree, t.values.clone()).map_err(|e| schema(e.to_string()))?;
                    dense[t.degree] = c;
                }
                PolyRep::from_terms(dense).map_err(|e| schema(e.to_string()))
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| schema(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(schema(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        if !(cfg.horizon >= 0.0) || !cfg.horizon.is_finite() {
            return Err(schema(format!("horizon must be a finite number >= 0, got {}", cfg.horizon)));
        }
        Ok(cfg)
    }

    /// Grid, spec and initial state. A preset supplies defaults for the
    /// operator and initial weights; explicit blocks replace them.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let (grid, preset_parts) = match &self.grid {
            GridConfig::Points(p) => (Grid::new(p.clone()).map_err(|e| schema(e.to_string()))?, None),
            GridConfig::Labels(m) => (Grid::labels(*m).map_err(|e| schema(e.to_string()))?, None),
            GridConfig::Uniform { start, end, nodes } => (
                Grid::uniform(*start, *end, *nodes).map_err(|e| schema(e.to_string()))?,
                None,
            ),
            GridConfig::Preset { name, nodes } => {
                let p = preset(name, *nodes).map_err(|_| {
                    schema(format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")))
                })?;
                (p.grid, Some((p.spec, p.initial)))
            }
        };
        let m = grid.len();
        let spec = match (&self.operator, &preset_parts) {
            (Some(op), _) => op.build(m)?,
            (None, Some((spec, _))) => spec.clone(),
            (None, None) => OperatorSpec::zero(m),
        };
        let initial = match (&self.initial, preset_parts) {
            (Some(w), _) => {
                if w.len() != m {
                    return Err(schema(format!("initial must have {m} entries, found {}", w.len())));
                }
                MeasureVec::new(w.clone()).map_err(|e| schema(e.to_string()))?
            }
            (None, Some((_, nu))) => nu,
            (None, None) => return Err(schema("initial weights are required without a preset grid")),
        };
        Ok(Resolved { grid, spec, initial })
    }
}
