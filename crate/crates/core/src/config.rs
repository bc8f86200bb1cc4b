//! The JSON scenario file: vehicle, world, targets and every tunable of the
//! planner, reward and trainer in one document.
//!
//! Omitted sections take their defaults. Unknown keys are rejected.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsError, QuadParams};
use crate::planner::{PlanResult, PrmConfig, Track};
use crate::policy::PpoConfig;
use crate::progress::{CurriculumConfig, RewardWeights};
use crate::trainer::{Environment, TrainConfig, TrainError};
use crate::world::{
    analytic_distance, Aabb, Esdf, Obstacle, Orientation, Scenario, Waypoint, WorldError,
};

fn default_resolution() -> f64 {
    0.05
}

fn default_d_c() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartState {
    pub position: Vector3<f64>,
    #[serde(default = "Vector3::zeros")]
    pub velocity: Vector3<f64>,
    #[serde(default)]
    pub attitude: Orientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub quad: QuadParams,
    pub bounds: Aabb,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    /// ESDF grid spacing, m.
    #[serde(default = "default_resolution")]
    pub esdf_resolution: f64,
    pub start: StartState,
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub end: Option<Waypoint>,
    /// Collision clearance, m.
    #[serde(default = "default_d_c")]
    pub d_c: f64,
    #[serde(default)]
    pub reward: RewardWeights,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub prm: PrmConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

/// A rejected scenario file, naming the offending field.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Turns a `section.field must ...` message from a module validator into a
/// field-tagged error.
fn split_prefixed(section: &str, msg: String) -> ConfigError {
    let first = msg.split_whitespace().next().unwrap_or("");
    let field = first.trim_end_matches(',');
    if field.starts_with(section) && field.len() > section.len() {
        ConfigError::new(field, msg.clone())
    } else {
        ConfigError::new(section, msg)
    }
}

impl ScenarioFile {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let file: Self = serde_json::from_str(text)
            .map_err(|e| ConfigError::new("<document>", e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.quad.validate().map_err(|e| match e {
            DynamicsError::InvalidParam { field, reason } => {
                ConfigError::new(format!("quad.{field}"), reason)
            }
            other => ConfigError::new("quad", other.to_string()),
        })?;
        if !(self.esdf_resolution > 0.0) {
            return Err(ConfigError::new(
                "esdf_resolution",
                format!("must be positive, got {}", self.esdf_resolution),
            ));
        }
        if !(self.d_c >= 0.0) {
            return Err(ConfigError::new(
                "d_c",
                format!("must be non-negative, got {}", self.d_c),
            ));
        }
        let named = |i: usize| {
            if i < self.waypoints.len() {
                format!("waypoints[{i}]")
            } else {
                "end".to_string()
            }
        };
        self.scenario().validate().map_err(|e| match e {
            WorldError::EmptyBounds => ConfigError::new("bounds", e.to_string()),
            WorldError::InvalidObstacle { index, reason } => {
                ConfigError::new(format!("obstacles[{index}]"), reason)
            }
            WorldError::InvalidWaypoint { index, reason } => {
                let field = if reason.starts_with("r_tol") {
                    format!("{}.r_tol", named(index))
                } else if self.waypoints.is_empty() && self.end.is_none() {
                    "waypoints".into()
                } else {
                    format!("{}.center", named(index))
                };
                ConfigError::new(field, reason)
            }
            WorldError::StartInCollision(_) => ConfigError::new("start.position", e.to_string()),
            other => ConfigError::new("<document>", other.to_string()),
        })?;
        for (i, w) in self.scenario().targets().iter().enumerate() {
            if analytic_distance(&self.obstacles, &self.bounds, &w.center) <= self.d_c {
                return Err(ConfigError::new(
                    format!("{}.center", named(i)),
                    "target is within d_c of an obstacle or wall",
                ));
            }
        }
        let r = &self.reward;
        for (name, v) in [
            ("k_p", r.k_p),
            ("k_wp", r.k_wp),
            ("k_omega", r.k_omega),
            ("r_terminal", r.r_terminal),
        ] {
            if !v.is_finite() {
                return Err(ConfigError::new(format!("reward.{name}"), "must be finite"));
            }
        }
        if let Some(k) = r.k_s {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(ConfigError::new(
                    "reward.k_s",
                    "must be finite and non-negative",
                ));
            }
        }
        self.curriculum
            .validate()
            .map_err(|m| split_prefixed("curriculum", m))?;
        let p = &self.prm;
        if p.initial_samples == 0 || p.neighbors == 0 || p.k_paths == 0 || p.max_combinations == 0 {
            return Err(ConfigError::new(
                "prm",
                "initial_samples, neighbors, k_paths and max_combinations must be positive",
            ));
        }
        if !(p.resample_spacing > 0.0) || p.homotopy_points < 2 || !(p.clearance_margin >= 0.0) {
            return Err(ConfigError::new(
                "prm",
                "resample_spacing must be positive, homotopy_points at least 2, clearance_margin non-negative",
            ));
        }
        if !(p.sample_growth >= 1.0 && p.axis_growth >= 1.0) {
            return Err(ConfigError::new("prm", "growth factors must be at least 1"));
        }
        self.ppo.validate().map_err(|m| split_prefixed("ppo", m))?;
        self.train
            .validate()
            .map_err(|m| split_prefixed("train", m))?;
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            start_position: self.start.position,
            start_velocity: self.start.velocity,
            start_attitude: self.start.attitude,
            waypoints: self.waypoints.clone(),
            end: self.end,
            obstacles: self.obstacles.clone(),
            bounds: self.bounds,
            d_c: self.d_c,
        }
    }

    pub fn build_esdf(&self) -> Result<Esdf, WorldError> {
        Esdf::build(&self.obstacles, &self.bounds, self.esdf_resolution)
    }

    pub fn environment(&self, esdf: Esdf, tracks: Vec<Track>) -> Result<Environment, TrainError> {
        Environment::new(
            self.scenario(),
            esdf,
            tracks,
            self.quad.clone(),
            self.reward,
            self.curriculum,
            self.train.dt,
            self.train.projection_window,
        )
    }

    /// Environment over the planned combinations.
    pub fn environment_from_plan(
        &self,
        esdf: Esdf,
        plan: &PlanResult,
    ) -> Result<Environment, TrainError> {
        self.environment(esdf, plan.tracks.clone())
    }

    /// A minimal scenario: empty box, one waypoint `distance` metres ahead
    /// of the start along x.
    pub fn single_waypoint(distance: f64) -> Self {
        let margin = 4.0;
        Self {
            quad: QuadParams::default(),
            bounds: Aabb::new(
                Vector3::new(-margin, -margin, -margin),
                Vector3::new(distance + margin, margin, margin),
            ),
            obstacles: Vec::new(),
            esdf_resolution: default_resolution(),
            start: StartState {
                position: Vector3::zeros(),
                velocity: Vector3::zeros(),
                attitude: Orientation::default(),
            },
            waypoints: vec![Waypoint::new(Vector3::new(distance, 0.0, 0.0), 0.3)],
            end: None,
            d_c: default_d_c(),
            reward: RewardWeights::default(),
            curriculum: CurriculumConfig::default(),
            prm: PrmConfig::default(),
            ppo: PpoConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}
