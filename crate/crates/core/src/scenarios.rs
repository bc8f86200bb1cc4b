//! Seeded scenario generators: a cylinder forest, a pillar slalom, and a
//! ring of oriented gates. The same seed always yields the same document.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ScenarioFile, StartState};
use crate::seed::derive_seed;
use crate::world::{Aabb, Obstacle, Orientation, Waypoint};

const STREAM: u64 = 0x5343_454e;
const FLIGHT_HEIGHT: f64 = 1.5;
const CEILING: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Forest,
    Slalom,
    Gates,
    /// Empty box with one waypoint 5 m ahead.
    SingleWaypoint,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Forest,
        ScenarioKind::Slalom,
        ScenarioKind::Gates,
        ScenarioKind::SingleWaypoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Forest => "forest",
            ScenarioKind::Slalom => "slalom",
            ScenarioKind::Gates => "gates",
            ScenarioKind::SingleWaypoint => "single-waypoint",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scenario kind `{s}`, expected forest, slalom, gates or single-waypoint"))
    }
}

pub fn generate(kind: ScenarioKind, seed: u64) -> ScenarioFile {
    match kind {
        ScenarioKind::Forest => forest(seed),
        ScenarioKind::Slalom => slalom(seed),
        ScenarioKind::Gates => gates(seed),
        ScenarioKind::SingleWaypoint => {
            let mut f = ScenarioFile::single_waypoint(5.0);
            f.seed = seed;
            f
        }
    }
}

fn rng_for(seed: u64, kind: ScenarioKind) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM, kind as u64))
}

/// Vertical cylinder spanning floor to ceiling.
fn pillar(x: f64, y: f64, radius: f64) -> Obstacle {
    Obstacle::Cylinder {
        center: Vector3::new(x, y, CEILING / 2.0),
        radius,
        half_height: CEILING / 2.0 + 0.5,
        orientation: Orientation::default(),
    }
}

fn base(bounds: Aabb, start: Vector3<f64>, waypoints: Vec<Waypoint>, seed: u64) -> ScenarioFile {
    let mut f = ScenarioFile::single_waypoint(1.0);
    f.bounds = bounds;
    f.start = StartState {
        position: start,
        velocity: Vector3::zeros(),
        attitude: Orientation::default(),
    };
    f.waypoints = waypoints;
    f.seed = seed;
    f
}

/// Up to 14 floor-to-ceiling trees between a start at the origin and a goal
/// 20 m down the x axis. Trees keep 1 m of free space between trunks and
/// 1 m around start and goal.
pub fn forest(seed: u64) -> ScenarioFile {
    let mut rng = rng_for(seed, ScenarioKind::Forest);
    let start = Vector3::new(0.0, 0.0, FLIGHT_HEIGHT);
    let goal = Vector3::new(20.0, 0.0, FLIGHT_HEIGHT);
    let mut trees: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..200 {
        if trees.len() == 14 {
            break;
        }
        let x = rng.random_range(3.0..17.0);
        let y = rng.random_range(-3.5..3.5);
        let r = rng.random_range(0.2..0.45);
        let clear_ends = [start, goal]
            .iter()
            .all(|e| ((e.x - x).powi(2) + (e.y - y).powi(2)).sqrt() > r + 1.0);
        let spaced = trees
            .iter()
            .all(|&(tx, ty, tr)| ((tx - x).powi(2) + (ty - y).powi(2)).sqrt() > r + tr + 1.0);
        if clear_ends && spaced {
            trees.push((x, y, r));
        }
    }
    let mut f = base(
        Aabb::new(
            Vector3::new(-2.0, -5.0, 0.0),
            Vector3::new(22.0, 5.0, CEILING),
        ),
        start,
        vec![Waypoint::new(goal, 0.5)],
        seed,
    );
    f.obstacles = trees.into_iter().map(|(x, y, r)| pillar(x, y, r)).collect();
    f
}

/// Three pillars on the x axis at roughly 4, 8 and 12 m, a waypoint beside
/// each on alternating sides, and a last waypoint on the axis at 16 m.
pub fn slalom(seed: u64) -> ScenarioFile {
    let mut rng = rng_for(seed, ScenarioKind::Slalom);
    let mut obstacles = Vec::new();
    let mut waypoints = Vec::new();
    for i in 0..3 {
        let x = 4.0 * (i + 1) as f64 + rng.random_range(-0.3..0.3);
        let r = rng.random_range(0.25..0.4);
        obstacles.push(pillar(x, 0.0, r));
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let offset = rng.random_range(1.3..1.7);
        waypoints.push(Waypoint::new(
            Vector3::new(x, side * offset, FLIGHT_HEIGHT),
            0.4,
        ));
    }
    waypoints.push(Waypoint::new(Vector3::new(16.0, 0.0, FLIGHT_HEIGHT), 0.4));
    let mut f = base(
        Aabb::new(
            Vector3::new(-2.0, -4.0, 0.0),
            Vector3::new(19.0, 4.0, CEILING),
        ),
        Vector3::new(0.0, 0.0, FLIGHT_HEIGHT),
        waypoints,
        seed,
    );
    f.obstacles = obstacles;
    f
}

/// Six gates on a jittered circle of radius about 6 m, each facing along the
/// counter-clockwise tangent and framed by two posts.
pub fn gates(seed: u64) -> ScenarioFile {
    let mut rng = rng_for(seed, ScenarioKind::Gates);
    let n = 6;
    let half_width = 0.8;
    let mut obstacles = Vec::new();
    let mut waypoints = Vec::new();
    for i in 0..n {
        let theta = 2.0 * PI * (i as f64 + 0.5) / n as f64;
        let radius = 6.0 + rng.random_range(-0.5..0.5);
        let height = FLIGHT_HEIGHT + rng.random_range(-0.3..0.3);
        let center = Vector3::new(radius * theta.cos(), radius * theta.sin(), height);
        let yaw = theta + PI / 2.0;
        let orientation = Orientation::from_yaw(yaw);
        let lateral = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
        for s in [-1.0, 1.0] {
            let post = center + lateral * (s * (half_width + 0.1));
            obstacles.push(Obstacle::Box {
                center: Vector3::new(post.x, post.y, CEILING / 2.0),
                half_extents: Vector3::new(0.1, 0.1, CEILING / 2.0 + 0.5),
                orientation,
            });
        }
        waypoints.push(Waypoint {
            center,
            orientation,
            r_tol: 0.5,
        });
    }
    let mut f = base(
        Aabb::new(
            Vector3::new(-9.0, -9.0, 0.0),
            Vector3::new(9.0, 9.0, CEILING),
        ),
        Vector3::new(6.0, -1.5, FLIGHT_HEIGHT),
        waypoints,
        seed,
    );
    f.obstacles = obstacles;
    f
}
