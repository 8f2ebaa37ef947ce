//! TOML run configuration. Every section is optional; missing keys take
//! the defaults of the hexagon task.

use std::path::{Path, PathBuf};

use mpctune_bo::campaign::CampaignConfig;
use mpctune_bo::space::{Dimension, ParamSpace};
use mpctune_core::controller::Feedforward;
use mpctune_core::ddp::SolverConfig;
use mpctune_core::dynamics::{bundled_model, load_model_file, RobotModel};
use mpctune_core::ocp::DerivativeMode;
use mpctune_core::sim::{EpisodeConfig, ObjectiveConfig, SolveTiming, HOME_POSTURE};
use mpctune_core::trajectory::ShapeKind;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotSection {
    /// Bundled model name or a model file path relative to the config file.
    pub model: String,
    pub q0: Vec<f64>,
}

impl Default for RobotSection {
    fn default() -> Self {
        Self {
            model: "ur10e_approx".into(),
            q0: HOME_POSTURE.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// `square`, `hexagon` or `circle`.
    pub shape: String,
    /// Side length (polygons) or radius (circle), m.
    pub size: f64,
    /// Time for one lap, s.
    pub duration: f64,
    /// Simulated time per episode; one lap when absent.
    pub episode_duration: Option<f64>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            shape: "hexagon".into(),
            size: 0.1,
            duration: 10.0,
            episode_duration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    pub dt_ocp: f64,
    pub control_period: f64,
    pub mpc_period: f64,
    pub physics_dt: f64,
    pub warm_start: bool,
    pub feedforward: Feedforward,
    pub derivatives: DerivativeMode,
    pub divergence_threshold: f64,
    /// Replace measured solve times by `iterations × per_iteration`.
    pub deterministic_time: bool,
    pub per_iteration: f64,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt_ocp: 0.0025,
            control_period: 0.002,
            mpc_period: 0.004,
            physics_dt: 0.0005,
            warm_start: true,
            feedforward: Feedforward::ZeroOrderHold,
            derivatives: DerivativeMode::InverseDynamics,
            divergence_threshold: 0.5,
            deterministic_time: false,
            per_iteration: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub alpha: f64,
    pub normalize: bool,
    pub failure_factor: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let o = ObjectiveConfig::default();
        Self {
            alpha: o.alpha,
            normalize: o.normalize,
            failure_factor: o.failure_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub robot: RobotSection,
    pub task: TaskSection,
    pub mpc: MpcSection,
    pub solver: SolverConfig,
    pub objective: ObjectiveSection,
    pub campaign: CampaignConfig,
    /// Custom search space; the 12-D default is used when empty.
    pub bounds: Vec<Dimension>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::parse(&text, &path.display().to_string())?, base))
    }

    pub fn model(&self, base: &Path) -> Result<RobotModel, CliError> {
        if let Some(m) = bundled_model(&self.robot.model) {
            return Ok(m);
        }
        load_model_file(base.join(&self.robot.model)).map_err(|e| CliError::Config(format!("robot.model: {e}")))
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.objective.alpha,
            normalize: self.objective.normalize,
            failure_factor: self.objective.failure_factor,
        }
    }

    pub fn space(&self) -> Result<ParamSpace, CliError> {
        if self.bounds.is_empty() {
            return Ok(ParamSpace::mpc_default());
        }
        if self.bounds.len() != 12 {
            return Err(CliError::Config(format!("bounds: expected 12 dimensions, got {}", self.bounds.len())));
        }
        ParamSpace::new(self.bounds.clone()).map_err(|e| CliError::Config(format!("bounds: {e}")))
    }

    /// Episode configuration with default weights and gains.
    pub fn episode(&self, base: &Path) -> Result<EpisodeConfig, CliError> {
        let model = self.model(base)?;
        let kind: ShapeKind = self.task.shape.parse().map_err(|e| CliError::Config(format!("task.shape: {e}")))?;
        let q0 = DVector::from_column_slice(&self.robot.q0);
        if q0.len() != model.nq() {
            return Err(CliError::Config(format!(
                "robot.q0: expected {} joint values, got {}",
                model.nq(),
                q0.len()
            )));
        }
        let mut c = EpisodeConfig::task(model, q0, kind, self.task.size, self.task.duration)
            .map_err(|e| CliError::Config(format!("task: {e}")))?;
        let m = &self.mpc;
        c.horizon = m.horizon;
        c.dt_ocp = m.dt_ocp;
        c.control_period = m.control_period;
        c.mpc_period = m.mpc_period;
        c.physics_dt = m.physics_dt;
        c.warm_start = m.warm_start;
        c.feedforward = m.feedforward;
        c.derivatives = m.derivatives;
        c.divergence_threshold = m.divergence_threshold;
        if let Some(d) = self.task.episode_duration {
            c.duration = d;
        }
        c.solver = self.solver.clone();
        c.seed = self.campaign.seed;
        c.timing = if m.deterministic_time {
            SolveTiming::Deterministic {
                per_iteration: m.per_iteration,
            }
        } else {
            SolveTiming::WallClock
        };
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }
}
