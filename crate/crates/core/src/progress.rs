//! Progress-along-path reward, curriculum scaling, and the farthest visible
//! point on the guiding path.
//!
//! The per-step reward is
//!
//! ```text
//! r = scale * (k_p * r_p + k_s * s) + k_wp * exp(-d_wp / r_tol) * [passed]
//!     + r_T * [collided] - k_omega * |w|
//! ```
//!
//! where `s` is the reached distance along the guiding path, `r_p` its
//! per-step increase, and `scale` the curriculum factor (1 in the fast stage).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::path::{GuidingPath, PathProjection};
use crate::world::Esdf;

/// Arclength spacing of the candidates scanned by [`farthest_visible`].
pub const VISIBILITY_SPACING: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub k_p: f64,
    /// Weight of the reached distance. `None` derives it from the slow-stage
    /// speed limit and the track length, see [`k_s_init`].
    pub k_s: Option<f64>,
    pub k_wp: f64,
    pub k_omega: f64,
    /// Added on the step that collides.
    pub r_terminal: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            k_p: 5.0,
            k_s: None,
            k_wp: 5.0,
            k_omega: 0.01,
            r_terminal: -10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Slow,
    Fast,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Slow => "slow",
            Stage::Fast => "fast",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slow" => Ok(Stage::Slow),
            "fast" => Ok(Stage::Fast),
            other => Err(format!("unknown stage `{other}` (expected slow or fast)")),
        }
    }
}

/// Slow-stage speed window and path proximity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub v_min: f64,
    pub v_max: f64,
    pub d_max: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            v_min: 1.0,
            v_max: 2.0,
            d_max: 0.3,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.v_min >= 0.0 && self.v_min < self.v_max) {
            return Err(format!(
                "curriculum.v_max must exceed curriculum.v_min >= 0, got {} and {}",
                self.v_min, self.v_max
            ));
        }
        if !(self.d_max > 0.0) {
            return Err(format!(
                "curriculum.d_max must be positive, got {}",
                self.d_max
            ));
        }
        Ok(())
    }

    /// Slow-stage validity of a state: inside the speed window and close to
    /// the path.
    pub fn admits(&self, speed: f64, path_distance: f64) -> bool {
        self.v_min < speed && speed < self.v_max && path_distance < self.d_max
    }
}

/// Reward factor applied to the progress and reached-distance terms.
pub fn curriculum_scale(
    stage: Stage,
    speed: f64,
    path_distance: f64,
    cfg: &CurriculumConfig,
) -> f64 {
    if stage == Stage::Fast {
        return 1.0;
    }
    let s_vmax = if speed > cfg.v_max {
        10f64.powf(cfg.v_max - speed)
    } else {
        1.0
    };
    let s_vmin = if speed < cfg.v_min {
        10f64.powf(speed - cfg.v_min)
    } else {
        1.0
    };
    let s_gd = if path_distance > cfg.d_max {
        (-path_distance + cfg.d_max).exp()
    } else {
        1.0
    };
    s_vmax * s_vmin * s_gd
}

/// Initial reached-distance weight `2 v_max dt / L`: at the slow-stage speed
/// limit the reached-distance term collects about as much per step as the
/// progress term.
pub fn k_s_init(v_max: f64, dt: f64, path_length: f64) -> Result<f64, String> {
    if !(path_length > 0.0) {
        return Err(format!("path length must be positive, got {path_length}"));
    }
    Ok(2.0 * v_max * dt / path_length)
}

pub fn progress_reward(s_now: f64, s_prev: f64) -> f64 {
    s_now - s_prev
}

/// Waypoint bonus in `(exp(-1), 1]` for a pass with miss distance `d_wp`.
pub fn waypoint_reward(d_wp: f64, r_tol: f64) -> f64 {
    (-d_wp / r_tol).exp()
}

/// What happened during one simulation step, as seen by the reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvents {
    pub projection: PathProjection,
    pub prev_arclength: f64,
    pub speed: f64,
    /// Miss distance and tolerance of a waypoint passed during this step.
    pub waypoint: Option<(f64, f64)>,
    pub collided: bool,
    pub body_rates: Vector3<f64>,
}

/// Individual reward contributions; [`RewardTerms::total`] sums them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RewardTerms {
    /// Scaled `k_p * r_p`.
    pub progress: f64,
    /// Scaled `k_s * s`.
    pub reached: f64,
    pub waypoint: f64,
    pub terminal: f64,
    /// `-k_omega * |w|`, non-positive.
    pub rate_penalty: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.progress + self.reached + self.waypoint + self.terminal + self.rate_penalty
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.progress,
            self.reached,
            self.waypoint,
            self.terminal,
            self.rate_penalty,
        ]
    }
}

pub fn total_reward(
    ev: &StepEvents,
    weights: &RewardWeights,
    stage: Stage,
    cfg: &CurriculumConfig,
) -> RewardTerms {
    let scale = curriculum_scale(stage, ev.speed, ev.projection.distance, cfg);
    let s = ev.projection.arclength;
    RewardTerms {
        progress: scale * weights.k_p * progress_reward(s, ev.prev_arclength),
        reached: scale * weights.k_s.unwrap_or(0.0) * s,
        waypoint: ev
            .waypoint
            .map_or(0.0, |(d, r_tol)| weights.k_wp * waypoint_reward(d, r_tol)),
        terminal: if ev.collided { weights.r_terminal } else { 0.0 },
        rate_penalty: -weights.k_omega * ev.body_rates.norm(),
    }
}

/// Farthest point of the path, scanning forward from the projection of `p`
/// in [`VISIBILITY_SPACING`] steps, that is reachable by a collision-free
/// segment from `p` with every earlier candidate also reachable. Falls back
/// to the projected point when even that is occluded.
pub fn farthest_visible(
    path: &GuidingPath,
    p: &Vector3<f64>,
    proj: &PathProjection,
    esdf: &Esdf,
    d_c: f64,
) -> Vector3<f64> {
    let start = proj.arclength;
    if !esdf.segment_free(p, &proj.point, d_c) {
        return proj.point;
    }
    let len = path.length();
    let mut best = proj.point;
    let mut k = (start / VISIBILITY_SPACING).floor() as usize + 1;
    loop {
        let s = (k as f64 * VISIBILITY_SPACING).min(len);
        if s <= start {
            if s >= len {
                break;
            }
            k += 1;
            continue;
        }
        let candidate = path.point_at(s);
        if !esdf.segment_free(p, &candidate, d_c) {
            break;
        }
        best = candidate;
        if s >= len {
            break;
        }
        k += 1;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Aabb, Obstacle};
    use approx::assert_relative_eq;

    fn cfg() -> CurriculumConfig {
        CurriculumConfig::default()
    }

    #[test]
    fn scale_examples() {
        assert_eq!(curriculum_scale(Stage::Slow, 2.0, 0.1, &cfg()), 1.0);
        assert_relative_eq!(
            curriculum_scale(Stage::Slow, 3.0, 0.1, &cfg()),
            0.1,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            curriculum_scale(Stage::Slow, 1.5, 0.4, &cfg()),
            0.904_837_418_035_959_6,
            epsilon = 1e-12
        );
        assert_eq!(curriculum_scale(Stage::Fast, 30.0, 5.0, &cfg()), 1.0);
    }

    #[test]
    fn slow_speed_is_penalised() {
        assert_relative_eq!(
            curriculum_scale(Stage::Slow, 0.0, 0.0, &cfg()),
            0.1,
            epsilon = 1e-15
        );
    }

    #[test]
    fn k_s_examples() {
        assert_relative_eq!(k_s_init(2.0, 0.02, 10.0).unwrap(), 0.008, epsilon = 1e-15);
        assert_relative_eq!(
            k_s_init(2.0, 0.02, 20.0).unwrap(),
            k_s_init(2.0, 0.02, 10.0).unwrap() / 2.0
        );
        let k = k_s_init(2.0, 0.02, 7.3).unwrap();
        assert_relative_eq!(k * 7.3, 2.0 * 2.0 * 0.02, epsilon = 1e-15);
        assert!(k_s_init(2.0, 0.02, 0.0).is_err());
    }

    #[test]
    fn progress_sign() {
        assert_eq!(progress_reward(1.0, 1.0), 0.0);
        assert!(progress_reward(0.5, 0.7) < 0.0);
    }

    fn path() -> GuidingPath {
        GuidingPath::new(vec![Vector3::zeros(), Vector3::new(4.0, 0.0, 0.0)]).unwrap()
    }

    fn events(path: &GuidingPath, p: Vector3<f64>) -> StepEvents {
        let projection = path.project(&p);
        StepEvents {
            projection,
            prev_arclength: projection.arclength,
            speed: 0.0,
            waypoint: None,
            collided: false,
            body_rates: Vector3::zeros(),
        }
    }

    #[test]
    fn hover_at_start_earns_nothing() {
        let w = RewardWeights {
            k_s: Some(0.01),
            ..Default::default()
        };
        let r = total_reward(&events(&path(), Vector3::zeros()), &w, Stage::Slow, &cfg());
        assert_eq!(r.total(), 0.0);
        let mut ev = events(&path(), Vector3::zeros());
        ev.body_rates = Vector3::new(3.0, 4.0, 0.0);
        let r = total_reward(&ev, &w, Stage::Slow, &cfg());
        assert_relative_eq!(r.total(), -0.05, epsilon = 1e-15);
    }

    #[test]
    fn waypoint_and_terminal_terms() {
        let w = RewardWeights::default();
        let mut ev = events(&path(), Vector3::zeros());
        ev.waypoint = Some((0.0, 0.3));
        assert_eq!(total_reward(&ev, &w, Stage::Fast, &cfg()).waypoint, 5.0);
        ev.waypoint = None;
        ev.collided = true;
        assert_eq!(total_reward(&ev, &w, Stage::Fast, &cfg()).terminal, -10.0);
    }

    #[test]
    fn scaling_touches_only_progress_terms() {
        let w = RewardWeights {
            k_s: Some(0.01),
            ..Default::default()
        };
        let mut ev = events(&path(), Vector3::new(2.0, 0.0, 0.0));
        ev.prev_arclength = 1.9;
        ev.speed = 3.0;
        ev.waypoint = Some((0.1, 0.3));
        ev.body_rates = Vector3::new(1.0, 0.0, 0.0);
        let slow = total_reward(&ev, &w, Stage::Slow, &cfg());
        let fast = total_reward(&ev, &w, Stage::Fast, &cfg());
        assert_relative_eq!(slow.progress, 0.1 * fast.progress, epsilon = 1e-12);
        assert_relative_eq!(slow.reached, 0.1 * fast.reached, epsilon = 1e-12);
        assert_eq!(slow.waypoint, fast.waypoint);
        assert_eq!(slow.rate_penalty, fast.rate_penalty);
    }

    fn open_world() -> Esdf {
        let bounds = Aabb::new(Vector3::new(-2.0, -3.0, -2.0), Vector3::new(8.0, 3.0, 2.0));
        Esdf::build(&[], &bounds, 0.1).unwrap()
    }

    #[test]
    fn open_world_sees_the_end() {
        let esdf = open_world();
        let path = path();
        for p in [Vector3::new(0.5, 0.2, 0.0), Vector3::new(-1.5, 0.0, 0.0)] {
            let proj = path.project(&p);
            assert_eq!(farthest_visible(&path, &p, &proj, &esdf, 0.15), path.end());
        }
    }

    #[test]
    fn wall_limits_visibility() {
        // Path bends around a wall; beyond the corner it is hidden.
        let bounds = Aabb::new(Vector3::new(-2.0, -3.0, -2.0), Vector3::new(8.0, 5.0, 2.0));
        let wall = Obstacle::Box {
            center: Vector3::new(2.0, 2.0, 0.0),
            half_extents: Vector3::new(1.0, 1.0, 1.9),
            orientation: Default::default(),
        };
        let esdf = Esdf::build(&[wall], &bounds, 0.05).unwrap();
        let path = GuidingPath::new(vec![
            Vector3::zeros(),
            Vector3::new(4.0, 0.0, 0.0),
            Vector3::new(4.0, 4.0, 0.0),
            Vector3::new(0.0, 4.0, 0.0),
        ])
        .unwrap();
        let p = Vector3::new(0.5, 0.0, 0.0);
        let proj = path.project(&p);
        let gamma = farthest_visible(&path, &p, &proj, &esdf, 0.15);
        assert!(esdf.segment_free(&p, &gamma, 0.15));
        let s_gamma = path.project(&gamma).arclength;
        // The leg returning behind the wall starts at s = 8.
        assert!(s_gamma <= 8.0 + VISIBILITY_SPACING, "{s_gamma}");
        assert!(s_gamma > 4.0);
    }
}
