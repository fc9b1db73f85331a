use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorSpec, TimeVaryingGenerator, TwoScaleModel};
use crate::queue::{QueueModel, QueueSpec};
use crate::simulator::InitialCondition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ExpansionError,
    SecondMoment,
    Clt,
    RateProxy,
    QueueDemo,
}

impl ExperimentKind {
    pub fn is_statistical(self) -> bool {
        !matches!(self, Self::ExpansionError)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ExpansionError => "expansion_error",
            Self::SecondMoment => "second_moment",
            Self::Clt => "clt",
            Self::RateProxy => "rate_proxy",
            Self::QueueDemo => "queue_demo",
        }
    }
}

/// Either an inline value or a path to a JSON file holding one.
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Inline<T> {
    Path(PathBuf),
    Spec(T),
}

impl<T: for<'de> Deserialize<'de> + Clone> Inline<T> {
    pub fn resolve(&self, base: &Path) -> Result<T> {
        match self {
            Self::Spec(s) => Ok(s.clone()),
            Self::Path(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
                })?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }
}

fn unit_horizon() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSource {
    /// The built-in three-state reference model.
    Reference,
    Generator {
        fast: Inline<GeneratorSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slow: Option<Inline<GeneratorSpec>>,
        #[serde(default = "unit_horizon")]
        horizon: f64,
    },
    Queue {
        queue: Inline<QueueSpec>,
    },
}

impl ModelSource {
    /// The model at `eps`.
    pub fn build(&self, eps: f64, base: &Path) -> Result<TwoScaleModel> {
        match self {
            Self::Reference => super::reference_model(eps),
            Self::Generator { fast, slow, horizon } => {
                let fast = TimeVaryingGenerator::from_spec(&fast.resolve(base)?)?;
                let slow = match slow {
                    Some(s) => TimeVaryingGenerator::from_spec(&s.resolve(base)?)?,
                    None => TimeVaryingGenerator::zero(fast.dim()),
                };
                TwoScaleModel::new(fast, slow, eps, *horizon)
            }
            Self::Queue { queue } => QueueModel::new(queue.resolve(base)?)?.two_scale(eps),
        }
    }

    pub fn queue(&self, base: &Path) -> Result<QueueModel> {
        match self {
            Self::Queue { queue } => QueueModel::new(queue.resolve(base)?),
            _ => Err(Error::Invalid("this experiment needs a queue model source".into())),
        }
    }
}

/// Inclusive bounds of a pass/fail check; a missing side is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

impl Bounds {
    pub fn between(lower: f64, upper: f64) -> Self {
        Self {
            lower: Some(lower),
            upper: Some(upper),
        }
    }

    pub fn at_least(lower: f64) -> Self {
        Self {
            lower: Some(lower),
            upper: None,
        }
    }

    pub fn at_most(upper: f64) -> Self {
        Self {
            lower: None,
            upper: Some(upper),
        }
    }

    pub fn admits(&self, value: f64) -> bool {
        value.is_finite() && self.lower.is_none_or(|l| value >= l) && self.upper.is_none_or(|u| value <= u)
    }
}

fn default_levels() -> Vec<f64> {
    vec![0.9, 0.95]
}

fn default_initial() -> InitialCondition {
    InitialCondition::State(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelSource,
    /// Occupation weights `F`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub eps_grid: Vec<f64>,
    #[serde(default)]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Expansion order for `expansion_error`.
    #[serde(default)]
    pub order: usize,
    #[serde(default = "default_initial")]
    pub initial: InitialCondition,
    /// Observed state for `queue_demo`.
    #[serde(default)]
    pub state: usize,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Replaces the default thresholds of the experiment when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<BTreeMap<String, Bounds>>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, model: ModelSource, eps_grid: Vec<f64>) -> Self {
        Self {
            kind,
            model,
            weights: None,
            eps_grid,
            replications: 0,
            seed: 0,
            order: 0,
            initial: default_initial(),
            state: 0,
            levels: default_levels(),
            output_dir: None,
            thresholds: None,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Enforces the config invariants.
    pub fn check(&self) -> Result<()> {
        if self.eps_grid.is_empty() {
            return Err(Error::Invalid("eps_grid must not be empty".into()));
        }
        if self.eps_grid.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::Invalid("every epsilon must lie in (0, 1]".into()));
        }
        if self.eps_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Invalid("eps_grid must be strictly decreasing".into()));
        }
        if self.kind.is_statistical() && self.replications < 100 {
            return Err(Error::Invalid(format!(
                "{} needs at least 100 replications, got {}",
                self.kind.name(),
                self.replications
            )));
        }
        if self.levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(Error::Invalid("confidence levels must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn model_at(&self, eps: f64) -> Result<TwoScaleModel> {
        self.model.build(eps, &self.base_dir)
    }

    pub fn weights_for(&self, dim: usize) -> Result<Vec<f64>> {
        let w = self
            .weights
            .clone()
            .ok_or_else(|| Error::Invalid(format!("{} needs occupation weights", self.kind.name())))?;
        if w.len() != dim {
            return Err(Error::Dimension(format!("{} weights for a {dim}-state model", w.len())));
        }
        Ok(w)
    }
}

/// Human-readable description of the config format, printed on usage errors.
pub const CONFIG_SCHEMA: &str = r#"Experiment config (JSON):
  {
    "kind": "expansion_error" | "second_moment" | "clt" | "rate_proxy" | "queue_demo",
    "model": {"type": "reference"}
           | {"type": "generator", "fast": <generator or path>, "slow": <generator or path>?, "horizon": 1.0}
           | {"type": "queue", "queue": <queue spec or path>},
    "weights": [f(0), f(1), ...],          occupation weights F
    "eps_grid": [0.2, 0.1, ...],           strictly decreasing, in (0, 1]
    "replications": 20000,                 >= 100 for statistical kinds
    "seed": 1,
    "order": 0 | 1,                        expansion order (expansion_error)
    "initial": {"state": 0} | "quasi_stationary",
    "state": 0,                            observed queue state (queue_demo)
    "levels": [0.9, 0.95],                 band levels (queue_demo)
    "thresholds": {"name": {"lower": x, "upper": y}}   replaces the default checks
  }
Generator (JSON): {"m0": 3, "terms": [{"coeff": [[...], ...], "time_poly": [c0, c1, ...]}]}
Queue spec (JSON): {"m0": 1, "lambda_base": [...], "mu_base": [...],
                    "lambda_mod_poly": [...], "mu_mod_poly": [...], "slow": <generator>?, "horizon": 1.0}
States are numbered from 0."#;
