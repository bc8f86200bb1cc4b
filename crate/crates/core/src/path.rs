//! Polyline guiding paths with an arclength table, and closest-point
//! projection onto them.

use nalgebra::Vector3;

/// Distances closer than this are treated as ties during projection.
const PROJECTION_TIE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PathError {
    #[error("a path needs at least two distinct points, got {0}")]
    TooShort(usize),
    #[error("path contains a non-finite point")]
    NonFinite,
    #[error("paths to concatenate do not share endpoints")]
    Discontinuous,
}

/// Polyline `g_1..g_n` with cumulative arclengths. Consecutive duplicate
/// points are dropped on construction, so the arclength table is strictly
/// increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidingPath {
    points: Vec<Vector3<f64>>,
    cumulative: Vec<f64>,
}

impl GuidingPath {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, PathError> {
        if points.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(PathError::NonFinite);
        }
        let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(points.len());
        for p in points {
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
        if pts.len() < 2 {
            return Err(PathError::TooShort(pts.len()));
        }
        let mut cumulative = Vec::with_capacity(pts.len());
        cumulative.push(0.0);
        for w in pts.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + (w[1] - w[0]).norm());
        }
        Ok(Self {
            points: pts,
            cumulative,
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Arclength at each vertex.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn segment_count(&self) -> usize {
        self.points.len() - 1
    }

    pub fn start(&self) -> Vector3<f64> {
        self.points[0]
    }

    pub fn end(&self) -> Vector3<f64> {
        *self.points.last().unwrap()
    }

    /// Segment containing arclength `s` (clamped to the path).
    pub fn segment_at(&self, s: f64) -> usize {
        let s = s.clamp(0.0, self.length());
        let idx = self.cumulative.partition_point(|&c| c <= s);
        idx.saturating_sub(1).min(self.segment_count() - 1)
    }

    /// Point at arclength `s`, clamped to the path.
    pub fn point_at(&self, s: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, self.length());
        let l = self.segment_at(s);
        let seg_len = self.cumulative[l + 1] - self.cumulative[l];
        let t = ((s - self.cumulative[l]) / seg_len).clamp(0.0, 1.0);
        self.points[l] + (self.points[l + 1] - self.points[l]) * t
    }

    /// Same geometry with extra vertices so that no segment exceeds
    /// `max_spacing`.
    pub fn resampled(&self, max_spacing: f64) -> Self {
        let mut out = vec![self.points[0]];
        for w in self.points.windows(2) {
            let len = (w[1] - w[0]).norm();
            let n = (len / max_spacing).ceil().max(1.0) as usize;
            for i in 1..n {
                out.push(w[0] + (w[1] - w[0]) * (i as f64 / n as f64));
            }
            out.push(w[1]);
        }
        Self::new(out).expect("resampling keeps at least two points")
    }

    /// `n >= 2` points at equal arclength spacing, endpoints included.
    pub fn equal_arclength(&self, n: usize) -> Vec<Vector3<f64>> {
        let n = n.max(2);
        let len = self.length();
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    self.end()
                } else {
                    self.point_at(len * i as f64 / (n - 1) as f64)
                }
            })
            .collect()
    }

    /// Joins paths whose endpoints coincide exactly; the shared vertex is kept
    /// once. Also returns the vertex index of every junction and of the final
    /// point.
    pub fn concat(parts: &[GuidingPath]) -> Result<(Self, Vec<usize>), PathError> {
        let first = parts.first().ok_or(PathError::TooShort(0))?;
        let mut pts = first.points.clone();
        let mut junctions = vec![pts.len() - 1];
        for part in &parts[1..] {
            if pts.last() != Some(&part.points[0]) {
                return Err(PathError::Discontinuous);
            }
            pts.extend_from_slice(&part.points[1..]);
            junctions.push(pts.len() - 1);
        }
        Ok((Self::new(pts)?, junctions))
    }

    /// Closest point over all segments.
    pub fn project(&self, p: &Vector3<f64>) -> PathProjection {
        self.project_range(p, 0, self.segment_count())
    }

    /// Closest point over segments within `half_window` of `segment`.
    pub fn project_window(
        &self,
        p: &Vector3<f64>,
        segment: usize,
        half_window: usize,
    ) -> PathProjection {
        self.project_window_until(p, segment, half_window, self.points.len() - 1)
    }

    /// As [`project_window`](Self::project_window), but never past vertex
    /// `end`.
    pub fn project_window_until(
        &self,
        p: &Vector3<f64>,
        segment: usize,
        half_window: usize,
        end: usize,
    ) -> PathProjection {
        let end = end.clamp(1, self.segment_count());
        let lo = segment.saturating_sub(half_window);
        let hi = (segment + half_window + 1).min(end);
        self.project_range(p, lo.min(hi - 1), hi)
    }

    fn project_range(&self, p: &Vector3<f64>, lo: usize, hi: usize) -> PathProjection {
        let mut best: Option<PathProjection> = None;
        for l in lo..hi {
            let a = self.points[l];
            let d = self.points[l + 1] - a;
            let len2 = d.norm_squared();
            if len2 == 0.0 {
                continue;
            }
            let t = ((p - a).dot(&d) / len2).clamp(0.0, 1.0);
            let point = a + d * t;
            let dist = (p - point).norm();
            let candidate = PathProjection {
                segment: l,
                t,
                point,
                distance: dist,
                arclength: self.cumulative[l] + (point - a).norm(),
            };
            best = match best {
                None => Some(candidate),
                Some(b) => {
                    let closer = candidate.distance < b.distance - PROJECTION_TIE;
                    let tie = (candidate.distance - b.distance).abs() <= PROJECTION_TIE;
                    if closer || (tie && candidate.arclength > b.arclength) {
                        Some(candidate)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best.expect("path has at least one segment")
    }

    /// Arclength up to the projected point: the full segments before
    /// `proj.segment` plus the partial one.
    pub fn reached_distance(&self, proj: &PathProjection) -> f64 {
        self.cumulative[proj.segment] + (proj.point - self.points[proj.segment]).norm()
    }
}

/// Closest point of a position on a guiding path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathProjection {
    /// Index of the segment `g_l -> g_{l+1}`, zero-based.
    pub segment: usize,
    /// Position along the segment in `[0, 1]`.
    pub t: f64,
    pub point: Vector3<f64>,
    /// Distance from the query position to `point`.
    pub distance: f64,
    /// Reached distance `s` along the path.
    pub arclength: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn elbow() -> GuidingPath {
        GuidingPath::new(vec![
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
        ])
        .unwrap()
    }

    #[test]
    fn projection_examples() {
        let path = elbow();
        let a = path.project(&Vector3::new(0.5, 0.2, 0.0));
        assert_eq!(a.segment, 0);
        assert_relative_eq!(a.t, 0.5);
        assert_relative_eq!(a.point, Vector3::new(0.5, 0.0, 0.0));
        assert_relative_eq!(a.arclength, 0.5);

        let b = path.project(&Vector3::new(1.2, 0.5, 0.0));
        assert_eq!(b.segment, 1);
        assert_relative_eq!(b.point, Vector3::new(1.0, 0.5, 0.0));
        assert_relative_eq!(b.arclength, 1.5);
        assert_relative_eq!(b.distance, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn vertex_projection_uses_cumulative_length() {
        let path = elbow();
        let v = path.project(&Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(v.arclength, 1.0);
        assert_eq!(path.reached_distance(&path.project(&Vector3::zeros())), 0.0);
        assert_eq!(
            path.reached_distance(&path.project(&Vector3::new(1.0, 1.0, 0.0))),
            path.length()
        );
    }

    #[test]
    fn ties_prefer_larger_reached_distance() {
        // U-turn: the query is equidistant from the outgoing and returning legs.
        let path = GuidingPath::new(vec![
            Vector3::zeros(),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(2.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ])
        .unwrap();
        let p = path.project(&Vector3::new(1.0, 0.5, 0.0));
        assert_eq!(p.segment, 2);
        assert_relative_eq!(p.arclength, 4.0);
    }

    #[test]
    fn duplicates_are_removed_and_short_paths_rejected() {
        let p = GuidingPath::new(vec![Vector3::zeros(), Vector3::zeros(), Vector3::x()]).unwrap();
        assert_eq!(p.points().len(), 2);
        assert_eq!(
            GuidingPath::new(vec![Vector3::zeros(), Vector3::zeros()]),
            Err(PathError::TooShort(1))
        );
    }

    #[test]
    fn resampling_keeps_geometry() {
        let path = elbow();
        let r = path.resampled(0.3);
        assert_relative_eq!(r.length(), path.length(), epsilon = 1e-12);
        assert!(r
            .points()
            .windows(2)
            .all(|w| (w[1] - w[0]).norm() <= 0.3 + 1e-12));
    }

    #[test]
    fn window_restricts_search() {
        // Path that comes back close to its start.
        let path = GuidingPath::new(vec![
            Vector3::zeros(),
            Vector3::new(4.0, 0.0, 0.0),
            Vector3::new(4.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ])
        .unwrap()
        .resampled(0.5);
        let p = Vector3::new(0.2, 0.6, 0.0);
        let global = path.project(&p);
        let local = path.project_window(&p, 0, 2);
        assert!(global.arclength > 8.0);
        assert!(local.arclength < 1.0);
    }

    #[test]
    fn concat_shares_junctions() {
        let a = GuidingPath::new(vec![Vector3::zeros(), Vector3::x()]).unwrap();
        let b = GuidingPath::new(vec![Vector3::x(), Vector3::new(1.0, 2.0, 0.0)]).unwrap();
        let (c, j) = GuidingPath::concat(&[a.clone(), b]).unwrap();
        assert_eq!(c.points().len(), 3);
        assert_eq!(j, vec![1, 2]);
        assert_relative_eq!(c.length(), 3.0);
        let off = GuidingPath::new(vec![Vector3::y(), Vector3::z()]).unwrap();
        assert_eq!(
            GuidingPath::concat(&[a, off]).unwrap_err(),
            PathError::Discontinuous
        );
    }
}
