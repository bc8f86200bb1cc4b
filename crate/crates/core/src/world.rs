//! Obstacles, the signed distance grid built from them, and waypoint geometry.
//!
//! The arena walls count as obstacles: inside the bounds the field is the
//! smaller of the distance to the nearest primitive and the distance to the
//! nearest wall.

use std::io::{self, BufRead, Write};

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Upper bound on the gradient norm of a trilinearly interpolated
/// 1-Lipschitz grid.
const INTERP_LIPSCHITZ: f64 = 1.732_050_808 * (1.0 + 1e-6);
/// Absolute slack for f32 storage of the grid.
const STORAGE_SLACK: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("resolution must be positive, got {0}")]
    NonPositiveResolution(f64),
    #[error("world bounds are empty or degenerate")]
    EmptyBounds,
    #[error("invalid obstacle #{index}: {reason}")]
    InvalidObstacle { index: usize, reason: String },
    #[error("invalid waypoint #{index}: {reason}")]
    InvalidWaypoint { index: usize, reason: String },
    #[error("start position {0:?} is in collision")]
    StartInCollision([f64; 3]),
    #[error("malformed ESDF file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Unit quaternion stored as `[w, x, y, z]` in files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Orientation(pub UnitQuaternion<f64>);

impl Default for Orientation {
    fn default() -> Self {
        Self(UnitQuaternion::identity())
    }
}

impl From<[f64; 4]> for Orientation {
    fn from(q: [f64; 4]) -> Self {
        Self(UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        )))
    }
}

impl From<Orientation> for [f64; 4] {
    fn from(o: Orientation) -> Self {
        let q = o.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

impl Orientation {
    pub fn from_yaw(yaw: f64) -> Self {
        Self(UnitQuaternion::from_euler_angles(0.0, 0.0, yaw))
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|i| !(self.max[i] > self.min[i]))
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| p[i].clamp(self.min[i], self.max[i]))
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) / 2.0
    }

    /// Distance to the nearest wall: positive inside, negative outside.
    pub fn wall_distance(&self, p: &Vector3<f64>) -> f64 {
        -box_sdf(&(p - self.center()), &((self.max - self.min) / 2.0))
    }
}

/// Obstacle primitive. Boxes and cylinders may be rotated; the cylinder axis
/// is the local z axis and its caps are flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Obstacle {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    Box {
        center: Vector3<f64>,
        half_extents: Vector3<f64>,
        #[serde(default)]
        orientation: Orientation,
    },
    Cylinder {
        center: Vector3<f64>,
        radius: f64,
        half_height: f64,
        #[serde(default)]
        orientation: Orientation,
    },
}

fn box_sdf(local: &Vector3<f64>, half: &Vector3<f64>) -> f64 {
    let q = local.abs() - half;
    let outside = q.map(|x| x.max(0.0)).norm();
    outside + q.max().min(0.0)
}

impl Obstacle {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Obstacle::Sphere { radius, .. } if !(*radius > 0.0) => {
                Err(format!("sphere radius must be positive, got {radius}"))
            }
            Obstacle::Box { half_extents, .. } if half_extents.iter().any(|h| !(*h > 0.0)) => {
                Err("box half extents must be positive".into())
            }
            Obstacle::Cylinder {
                radius,
                half_height,
                ..
            } if !(*radius > 0.0 && *half_height > 0.0) => {
                Err("cylinder radius and half height must be positive".into())
            }
            _ => Ok(()),
        }
    }

    /// Exact signed distance, negative inside.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Obstacle::Sphere { center, radius } => (p - center).norm() - radius,
            Obstacle::Box {
                center,
                half_extents,
                orientation,
            } => {
                let local = orientation.0.inverse_transform_vector(&(p - center));
                box_sdf(&local, half_extents)
            }
            Obstacle::Cylinder {
                center,
                radius,
                half_height,
                orientation,
            } => {
                let local = orientation.0.inverse_transform_vector(&(p - center));
                let d = Vector2::new(
                    Vector2::new(local.x, local.y).norm() - radius,
                    local.z.abs() - half_height,
                );
                d.x.max(d.y).min(0.0) + d.map(|x| x.max(0.0)).norm()
            }
        }
    }
}

/// Analytic signed distance to the nearest obstacle or arena wall.
pub fn analytic_distance(obstacles: &[Obstacle], bounds: &Aabb, p: &Vector3<f64>) -> f64 {
    obstacles
        .iter()
        .map(|o| o.signed_distance(p))
        .fold(bounds.wall_distance(p), f64::min)
}

/// Result of an ESDF lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceQuery {
    pub distance: f64,
    pub in_bounds: bool,
}

/// Regular grid of signed distances. Node `(i, j, k)` sits at
/// `origin + resolution * (i, j, k)`; values are stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Esdf {
    pub origin: Vector3<f64>,
    pub resolution: f64,
    pub dims: [usize; 3],
    pub bounds: Aabb,
    pub values: Vec<f32>,
}

const ESDF_MAGIC: &str = "ESDF1";

impl Esdf {
    pub fn build(
        obstacles: &[Obstacle],
        bounds: &Aabb,
        resolution: f64,
    ) -> Result<Self, WorldError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(WorldError::NonPositiveResolution(resolution));
        }
        if bounds.is_degenerate() {
            return Err(WorldError::EmptyBounds);
        }
        for (index, o) in obstacles.iter().enumerate() {
            o.validate()
                .map_err(|reason| WorldError::InvalidObstacle { index, reason })?;
        }
        let extent = bounds.max - bounds.min;
        let dims = [0, 1, 2].map(|a| (extent[a] / resolution - 1e-9).ceil() as usize + 1);
        let origin = bounds.min;
        let (nx, ny) = (dims[0], dims[1]);
        let mut values = vec![0.0f32; dims[0] * dims[1] * dims[2]];
        values
            .par_chunks_mut(nx * ny)
            .enumerate()
            .for_each(|(k, slab)| {
                for j in 0..ny {
                    for i in 0..nx {
                        let p = origin + Vector3::new(i as f64, j as f64, k as f64) * resolution;
                        slab[i + nx * j] = analytic_distance(obstacles, bounds, &p) as f32;
                    }
                }
            });
        Ok(Self {
            origin,
            resolution,
            dims,
            bounds: *bounds,
            values,
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.resolution
    }

    /// Trilinear lookup. Points outside the world bounds report zero.
    pub fn query(&self, p: &Vector3<f64>) -> DistanceQuery {
        if !self.bounds.contains(p) {
            return DistanceQuery {
                distance: 0.0,
                in_bounds: false,
            };
        }
        let f = (p - self.origin) / self.resolution;
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            if n == 1 {
                base[a] = 0;
                t[a] = 0.0;
                continue;
            }
            let fl = f[a].floor().clamp(0.0, (n - 2) as f64);
            base[a] = fl as usize;
            t[a] = (f[a] - fl).clamp(0.0, 1.0);
        }
        let step = [
            usize::from(self.dims[0] > 1),
            usize::from(self.dims[1] > 1),
            usize::from(self.dims[2] > 1),
        ];
        let v = |di: usize, dj: usize, dk: usize| -> f64 {
            self.values[self.index(
                base[0] + di * step[0],
                base[1] + dj * step[1],
                base[2] + dk * step[2],
            )] as f64
        };
        let lerp = |a: f64, b: f64, s: f64| a + (b - a) * s;
        let c00 = lerp(v(0, 0, 0), v(1, 0, 0), t[0]);
        let c10 = lerp(v(0, 1, 0), v(1, 1, 0), t[0]);
        let c01 = lerp(v(0, 0, 1), v(1, 0, 1), t[0]);
        let c11 = lerp(v(0, 1, 1), v(1, 1, 1), t[0]);
        let c0 = lerp(c00, c10, t[1]);
        let c1 = lerp(c01, c11, t[1]);
        DistanceQuery {
            distance: lerp(c0, c1, t[2]),
            in_bounds: true,
        }
    }

    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.query(p).distance
    }

    /// Collision means clearance at or below `d_c`.
    pub fn is_collision(&self, p: &Vector3<f64>, d_c: f64) -> bool {
        self.distance(p) <= d_c
    }

    /// Checks the segment at equally spaced samples no further apart than
    /// half a voxel. Samples that are provably clear, given the field's
    /// Lipschitz bound and an already visited sample, are skipped; the
    /// result equals visiting every sample.
    pub fn segment_free(&self, a: &Vector3<f64>, b: &Vector3<f64>, d_c: f64) -> bool {
        // Canonical direction so that the sample set does not depend on order.
        let (a, b) = if lex_less(b, a) { (b, a) } else { (a, b) };
        // Bounds are convex: with both ends inside every sample is inside.
        if !self.bounds.contains(a) || !self.bounds.contains(b) {
            return self.sample_all(a, b, d_c);
        }
        let delta = b - a;
        let len = delta.norm();
        let h_max = self.resolution / 2.0;
        let n = (len / h_max).ceil().max(1.0) as usize;
        let h = len / n as f64;
        let mut i = 0usize;
        while i <= n {
            let p = if i == n {
                *b
            } else {
                a + delta * (i as f64 / n as f64)
            };
            let d = self.distance(&p);
            if d <= d_c {
                return false;
            }
            if h == 0.0 {
                break;
            }
            let reach = (d - d_c) / INTERP_LIPSCHITZ - STORAGE_SLACK;
            let skip = if reach > h {
                (reach / h).ceil() as usize
            } else {
                1
            };
            i += skip.max(1);
        }
        true
    }

    fn sample_all(&self, a: &Vector3<f64>, b: &Vector3<f64>, d_c: f64) -> bool {
        let n = ((b - a).norm() / (self.resolution / 2.0)).ceil().max(1.0) as usize;
        (0..=n).all(|i| !self.is_collision(&(a + (b - a) * (i as f64 / n as f64)), d_c))
    }

    /// Raw export: a text header followed by little-endian `f32` values,
    /// x-fastest.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let o = self.origin;
        let (lo, hi) = (self.bounds.min, self.bounds.max);
        writeln!(w, "{ESDF_MAGIC}")?;
        writeln!(w, "origin {} {} {}", o.x, o.y, o.z)?;
        writeln!(w, "resolution {}", self.resolution)?;
        writeln!(w, "dims {} {} {}", self.dims[0], self.dims[1], self.dims[2])?;
        writeln!(
            w,
            "bounds {} {} {} {} {} {}",
            lo.x, lo.y, lo.z, hi.x, hi.y, hi.z
        )?;
        writeln!(w, "data f32le")?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, WorldError> {
        let fmt = |m: &str| WorldError::Format(m.to_string());
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String, WorldError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(fmt("unexpected end of header"));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != ESDF_MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut origin = None;
        let mut resolution = None;
        let mut dims = None;
        let mut bounds = None;
        loop {
            let l = next_line(&mut r)?;
            let mut it = l.split_whitespace();
            let key = it.next().ok_or_else(|| fmt("empty header line"))?;
            let nums: Vec<&str> = it.collect();
            let floats = || -> Result<Vec<f64>, WorldError> {
                nums.iter()
                    .map(|s| s.parse::<f64>().map_err(|_| fmt("bad number")))
                    .collect()
            };
            match key {
                "origin" => {
                    let v = floats()?;
                    if v.len() != 3 {
                        return Err(fmt("origin needs 3 values"));
                    }
                    origin = Some(Vector3::new(v[0], v[1], v[2]));
                }
                "resolution" => {
                    let v = floats()?;
                    resolution = v.first().copied();
                }
                "dims" => {
                    let v: Result<Vec<usize>, _> =
                        nums.iter().map(|s| s.parse::<usize>()).collect();
                    let v = v.map_err(|_| fmt("bad dims"))?;
                    if v.len() != 3 {
                        return Err(fmt("dims needs 3 values"));
                    }
                    dims = Some([v[0], v[1], v[2]]);
                }
                "bounds" => {
                    let v = floats()?;
                    if v.len() != 6 {
                        return Err(fmt("bounds needs 6 values"));
                    }
                    bounds = Some(Aabb::new(
                        Vector3::new(v[0], v[1], v[2]),
                        Vector3::new(v[3], v[4], v[5]),
                    ));
                }
                "data" => break,
                _ => return Err(fmt("unknown header key")),
            }
        }
        let origin = origin.ok_or_else(|| fmt("missing origin"))?;
        let resolution = resolution.ok_or_else(|| fmt("missing resolution"))?;
        let dims = dims.ok_or_else(|| fmt("missing dims"))?;
        let count = dims[0] * dims[1] * dims[2];
        let bounds = bounds.unwrap_or_else(|| {
            let ext =
                Vector3::new(dims[0] - 1, dims[1] - 1, dims[2] - 1).cast::<f64>() * resolution;
            Aabb::new(origin, origin + ext)
        });
        let mut bytes = Vec::with_capacity(count * 4);
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 4 {
            return Err(fmt("payload size does not match dims"));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            origin,
            resolution,
            dims,
            bounds,
            values,
        })
    }
}

fn lex_less(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    for i in 0..3 {
        if a[i] != b[i] {
            return a[i] < b[i];
        }
    }
    false
}

pub fn default_r_tol() -> f64 {
    0.3
}

/// Gate to fly through. The gate plane is the local y-z plane; its normal is
/// the local x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub center: Vector3<f64>,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default = "default_r_tol")]
    pub r_tol: f64,
}

impl Waypoint {
    pub fn new(center: Vector3<f64>, r_tol: f64) -> Self {
        Self {
            center,
            orientation: Orientation::default(),
            r_tol,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.orientation.0 * Vector3::x()
    }

    /// Corners of the `2 r_tol` square in the gate plane, in the order
    /// (+y+z), (+y-z), (-y-z), (-y+z) of the local frame.
    pub fn corners(&self) -> [Vector3<f64>; 4] {
        let r = self.r_tol;
        [(r, r), (r, -r), (-r, -r), (-r, r)]
            .map(|(y, z)| self.center + self.orientation.0 * Vector3::new(0.0, y, z))
    }

    /// Miss distance if the step `prev -> p` passes the gate: either it
    /// crosses the gate plane within `r_tol` of the center, or `p` ends
    /// within `r_tol` of the center.
    pub fn passed(&self, prev: &Vector3<f64>, p: &Vector3<f64>) -> Option<f64> {
        let mut best: Option<f64> = None;
        let n = self.normal();
        let d0 = n.dot(&(prev - self.center));
        let d1 = n.dot(&(p - self.center));
        if d0 * d1 <= 0.0 && d0 != d1 {
            let s = d0 / (d0 - d1);
            let crossing = prev + (p - prev) * s;
            let miss = (crossing - self.center).norm();
            if miss <= self.r_tol {
                best = Some(miss);
            }
        }
        let end = (p - self.center).norm();
        if end <= self.r_tol {
            best = Some(best.map_or(end, |b| b.min(end)));
        }
        best
    }
}

/// Geometric description of a task: start, targets, obstacles and arena.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub start_position: Vector3<f64>,
    pub start_velocity: Vector3<f64>,
    pub start_attitude: Orientation,
    pub waypoints: Vec<Waypoint>,
    /// Optional final target after the last waypoint.
    pub end: Option<Waypoint>,
    pub obstacles: Vec<Obstacle>,
    pub bounds: Aabb,
    /// Collision clearance, m.
    pub d_c: f64,
}

impl Scenario {
    /// All targets in flight order, the end target last.
    pub fn targets(&self) -> Vec<Waypoint> {
        let mut t = self.waypoints.clone();
        t.extend(self.end);
        t
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.bounds.is_degenerate() {
            return Err(WorldError::EmptyBounds);
        }
        for (index, o) in self.obstacles.iter().enumerate() {
            o.validate()
                .map_err(|reason| WorldError::InvalidObstacle { index, reason })?;
        }
        let targets = self.targets();
        if targets.is_empty() {
            return Err(WorldError::InvalidWaypoint {
                index: 0,
                reason: "scenario needs at least one waypoint".into(),
            });
        }
        for (index, w) in targets.iter().enumerate() {
            if !(w.r_tol > 0.0) {
                return Err(WorldError::InvalidWaypoint {
                    index,
                    reason: format!("r_tol must be positive, got {}", w.r_tol),
                });
            }
            if !self.bounds.contains(&w.center) {
                return Err(WorldError::InvalidWaypoint {
                    index,
                    reason: "center outside world bounds".into(),
                });
            }
        }
        let p = self.start_position;
        if analytic_distance(&self.obstacles, &self.bounds, &p) <= self.d_c {
            return Err(WorldError::StartInCollision([p.x, p.y, p.z]));
        }
        Ok(())
    }
}
