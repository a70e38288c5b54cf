use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ckm::{AnalyticCkm, CkmField, GridCkm};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::inference::Belief;
use crate::model::{DynamicsModel, GoalPrior, KSet, ReferenceTrajectory};
use crate::planner::{CkmEvalPoint, PlannerParams};
use crate::sensing::Sensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Control and subcarriers both from the plan.
    Aif,
    /// Control from the plan, subcarriers drawn from the prior over `k`.
    PriorKAifU,
    /// Subcarriers from the plan, control from one-step position inversion.
    AifKGreedyU,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Aif, Policy::PriorKAifU, Policy::AifKGreedyU];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Aif => "aif",
            Policy::PriorKAifU => "prior_k_aif_u",
            Policy::AifKGreedyU => "aif_k_greedy_u",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config {
                path: "policy".into(),
                message: format!("unknown policy `{s}`; expected aif, prior_k_aif_u or aif_k_greedy_u"),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub dt: f64,
    pub sigma_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalConfig {
    /// Diagonal of `Q_goal`.
    pub q_goal: [f64; 2],
    /// Diagonal of `R_goal`.
    pub r_goal: [f64; 2],
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub speed: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CkmSource {
    /// Plan with the ground-truth analytic field.
    #[default]
    Analytic,
    /// Plan with a fitted grid loaded from `path`.
    Grid,
}

/// The map the planner consults. The sensor always draws from `field`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkmConfig {
    #[serde(default)]
    pub source: CkmSource,
    /// Grid file; relative paths resolve against the config file directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_diffuse() -> f64 {
    1e8
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    #[serde(default = "default_diffuse")]
    pub sigma_diffuse2: f64,
    #[serde(default = "default_diffuse")]
    pub sigma_terminal2: f64,
    #[serde(default)]
    pub ckm_eval_point: CkmEvalPoint,
    #[serde(default = "default_true")]
    pub forward_obs_update: bool,
}

fn default_initial_cov() -> [f64; 4] {
    [1.0, 1.0, 0.1, 0.1]
}

/// Initial belief: centred on the reference start with this diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default = "default_initial_cov")]
    pub cov_diag: [f64; 4],
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { cov_diag: default_initial_cov() }
    }
}

fn default_one() -> f64 {
    1.0
}

fn default_window() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub policy: Policy,
    pub seeds: Vec<u64>,
    /// Factor applied to the covariance the localizer reports.
    #[serde(default = "default_one")]
    pub miscalibration: f64,
    pub k_set: KSet,
    /// Planning steps per window for the windowed cost aggregate.
    #[serde(default = "default_window")]
    pub window: usize,
    pub dynamics: DynamicsConfig,
    pub goal: GoalConfig,
    pub trajectory: TrajectoryConfig,
    /// Ground-truth variance field.
    pub field: AnalyticCkm,
    #[serde(default)]
    pub ckm: CkmConfig,
    pub planner: PlannerConfig,
    #[serde(default)]
    pub initial: InitialConfig,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

fn relabel(path: &str, e: Error) -> Error {
    match e {
        Error::Contract(m) => config_err(path, m),
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document. Unknown keys are rejected with
    /// their dotted path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("", e.message()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(if path == "." { "" } else { &path }, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative grid path becomes relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(grid) = &cfg.ckm.path {
            if grid.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.ckm.path = Some(base.join(grid));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if !(self.miscalibration > 0.0) || !self.miscalibration.is_finite() {
            return Err(config_err("miscalibration", "must be positive"));
        }
        if self.window == 0 {
            return Err(config_err("window", "must be >= 1"));
        }
        if !(self.dynamics.dt > 0.0) || !self.dynamics.dt.is_finite() {
            return Err(config_err("dynamics.dt", "must be positive"));
        }
        if !(self.dynamics.sigma_w >= 0.0) || !self.dynamics.sigma_w.is_finite() {
            return Err(config_err("dynamics.sigma_w", "must be >= 0"));
        }
        for (name, v) in [("goal.q_goal", self.goal.q_goal), ("goal.r_goal", self.goal.r_goal)] {
            if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(config_err(name, "weights must be >= 0"));
            }
        }
        if !(self.goal.alpha >= 0.0) || !self.goal.alpha.is_finite() {
            return Err(config_err("goal.alpha", "must be >= 0"));
        }
        if !(self.trajectory.speed > 0.0) {
            return Err(config_err("trajectory.speed", "must be positive"));
        }
        if self.trajectory.n_steps == 0 {
            return Err(config_err("trajectory.n_steps", "must be >= 1"));
        }
        self.field.validate().map_err(|e| relabel("field", e))?;
        if self.planner.horizon == 0 {
            return Err(config_err("planner.horizon", "must be >= 1"));
        }
        for (name, v) in [
            ("planner.sigma_diffuse2", self.planner.sigma_diffuse2),
            ("planner.sigma_terminal2", self.planner.sigma_terminal2),
        ] {
            if !(v >= 1e6) || !v.is_finite() {
                return Err(config_err(name, "must be >= 1e6"));
            }
        }
        match (self.ckm.source, &self.ckm.path) {
            (CkmSource::Grid, None) => return Err(config_err("ckm.path", "grid source needs a path")),
            (CkmSource::Analytic, Some(_)) => {
                return Err(config_err("ckm.path", "path is only used with source = \"grid\""))
            }
            _ => {}
        }
        if self.initial.cov_diag.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(config_err("initial.cov_diag", "variances must be positive"));
        }
        Ok(())
    }

    pub fn reference(&self) -> ReferenceTrajectory {
        ReferenceTrajectory {
            start: self.trajectory.start,
            end: self.trajectory.end,
            speed: self.trajectory.speed,
            dt: self.dynamics.dt,
            n_steps: self.trajectory.n_steps,
        }
    }

    pub fn planner_params(&self) -> PlannerParams {
        PlannerParams {
            horizon: self.planner.horizon,
            sigma_diffuse2: self.planner.sigma_diffuse2,
            sigma_terminal2: self.planner.sigma_terminal2,
            k_set: self.k_set.clone(),
            ckm_eval_point: self.planner.ckm_eval_point,
            forward_obs_update: self.planner.forward_obs_update,
        }
    }
}

/// Runtime objects built once from a config and shared by its episodes.
pub struct Scenario {
    pub dynamics: DynamicsModel,
    pub goal: GoalPrior,
    pub sensor: Sensor,
    pub planner_ckm: Box<dyn CkmField>,
    pub params: PlannerParams,
    pub initial: Belief,
}

impl Scenario {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dynamics = DynamicsModel::new(cfg.dynamics.dt, cfg.dynamics.sigma_w)
            .map_err(|e| relabel("dynamics", e))?;
        let reference = cfg.reference();
        let goal = GoalPrior::diagonal(cfg.goal.q_goal, cfg.goal.r_goal, cfg.goal.alpha, reference.clone())
            .map_err(|e| relabel("goal", e))?;
        let sensor = Sensor::new(cfg.field.clone(), cfg.k_set.clone(), cfg.miscalibration)
            .map_err(|e| relabel("field", e))?;
        let planner_ckm: Box<dyn CkmField> = match (&cfg.ckm.source, &cfg.ckm.path) {
            (CkmSource::Grid, Some(path)) => {
                let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
                let grid = GridCkm::load(std::io::BufReader::new(file))?;
                if let Some(k) = cfg.k_set.values().iter().find(|k| !grid.k_values().contains(k)) {
                    return Err(config_err("ckm.path", format!("grid has no layer for k={k}")));
                }
                Box::new(grid)
            }
            _ => Box::new(cfg.field.clone()),
        };
        let cov = DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.initial.cov_diag));
        let initial = Belief::new(Gaussian::new(reference.reference_at(0), cov)?, 0)?;
        Ok(Self {
            dynamics,
            goal,
            sensor,
            planner_ckm,
            params: cfg.planner_params(),
            initial,
        })
    }
}
