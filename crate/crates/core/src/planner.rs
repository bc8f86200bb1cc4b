//! Topological guiding paths between consecutive waypoints.
//!
//! For every pair of consecutive targets a probabilistic roadmap is grown
//! from samples inside a prolate spheroid whose foci are the two targets.
//! The spheroid and the sample count grow until the targets are connected.
//! Distinct paths are then extracted by repeatedly running Dijkstra and
//! deleting the least-clear interior node of the last path found. Each path
//! is shortcut and resampled, and paths that can be swept into a shorter one
//! without collision are dropped as the same homotopy class.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{self, BufRead, Write};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::path::GuidingPath;
use crate::seed::derive_seed;
use crate::world::{Aabb, Esdf, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrmConfig {
    /// Samples in the first growth round.
    pub initial_samples: usize,
    pub max_rounds: usize,
    /// Sample count multiplier per round.
    pub sample_growth: f64,
    /// Major-axis multiplier per round.
    pub axis_growth: f64,
    /// Candidate edges per node (k nearest).
    pub neighbors: usize,
    /// Distinct paths extracted per pair.
    pub k_paths: usize,
    /// Extra clearance over `d_c` required of roadmap nodes and edges.
    pub clearance_margin: f64,
    /// Maximum vertex spacing of emitted paths, m.
    pub resample_spacing: f64,
    /// Points per path in the homotopy sweep.
    pub homotopy_points: usize,
    /// Full-track combinations kept for training.
    pub max_combinations: usize,
}

impl Default for PrmConfig {
    fn default() -> Self {
        Self {
            initial_samples: 256,
            max_rounds: 6,
            sample_growth: 2.0,
            axis_growth: 1.5,
            neighbors: 10,
            k_paths: 4,
            clearance_margin: 0.1,
            resample_spacing: 0.5,
            homotopy_points: 64,
            max_combinations: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("major axis {c_max} is shorter than the focal distance {focal}")]
    AxisTooShort { c_max: f64, focal: f64 },
    #[error("pair {pair} ({from:?} -> {to:?}): endpoint is in collision")]
    EndpointInCollision {
        pair: usize,
        from: [f64; 3],
        to: [f64; 3],
    },
    #[error("pair {pair} ({from:?} -> {to:?}): no connection after {rounds} growth rounds")]
    Unreachable {
        pair: usize,
        from: [f64; 3],
        to: [f64; 3],
        rounds: usize,
    },
    #[error("malformed path file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl PlanError {
    /// Index of the waypoint pair that failed, if any.
    pub fn pair(&self) -> Option<usize> {
        match self {
            PlanError::EndpointInCollision { pair, .. } | PlanError::Unreachable { pair, .. } => {
                Some(*pair)
            }
            _ => None,
        }
    }
}

/// Uniform sample inside the prolate spheroid with foci `a`, `b` and major
/// axis `c_max`, optionally clamped into `bounds`.
pub fn sample_ellipsoid<R: Rng + ?Sized>(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c_max: f64,
    bounds: Option<&Aabb>,
    rng: &mut R,
) -> Result<Vector3<f64>, PlanError> {
    let focal = (b - a).norm();
    if c_max < focal {
        return Err(PlanError::AxisTooShort { c_max, focal });
    }
    let semi_major = c_max / 2.0;
    let semi_minor = (c_max * c_max - focal * focal).max(0.0).sqrt() / 2.0;

    // Uniform in the unit ball.
    let dir = loop {
        let g = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = g.norm();
        if n > 1e-12 {
            break g / n;
        }
    };
    let radius = rng.random::<f64>().cbrt();
    let unit = dir * radius;
    let local = Vector3::new(
        unit.x * semi_major,
        unit.y * semi_minor,
        unit.z * semi_minor,
    );

    let axis = if focal > 0.0 {
        (b - a) / focal
    } else {
        Vector3::x()
    };
    let rot = Rotation3::rotation_between(&Vector3::x(), &axis)
        .unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI));
    let p = (a + b) / 2.0 + rot * local;
    Ok(match bounds {
        Some(bb) => bb.clamp(&p),
        None => p,
    })
}

/// Undirected visibility graph between two waypoint centers.
#[derive(Debug, Clone)]
pub struct Roadmap {
    pub nodes: Vec<Vector3<f64>>,
    /// ESDF distance at each node.
    pub clearance: Vec<f64>,
    /// Adjacency lists of `(neighbor, length)`, sorted by neighbor.
    pub edges: Vec<Vec<(usize, f64)>>,
    removed_nodes: Vec<bool>,
    removed_edges: HashSet<(usize, usize)>,
}

impl Roadmap {
    pub const START: usize = 0;
    pub const GOAL: usize = 1;

    /// Graph over the given nodes; node 0 is the start and node 1 the goal.
    pub fn from_edges(
        nodes: Vec<Vector3<f64>>,
        clearance: Vec<f64>,
        edge_list: &[(usize, usize, f64)],
    ) -> Self {
        let mut edges = vec![Vec::new(); nodes.len()];
        for &(i, j, w) in edge_list {
            edges[i].push((j, w));
            edges[j].push((i, w));
        }
        for list in &mut edges {
            list.sort_by_key(|x| x.0);
            list.dedup_by_key(|e| e.0);
        }
        Self {
            removed_nodes: vec![false; nodes.len()],
            nodes,
            clearance,
            edges,
            removed_edges: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn remove_node(&mut self, i: usize) {
        self.removed_nodes[i] = true;
    }

    pub fn remove_edge(&mut self, i: usize, j: usize) {
        self.removed_edges.insert((i.min(j), i.max(j)));
    }

    fn edge_alive(&self, i: usize, j: usize) -> bool {
        !self.removed_nodes[j] && !self.removed_edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![Self::START];
        seen[Self::START] = true;
        while let Some(u) = stack.pop() {
            if u == Self::GOAL {
                return true;
            }
            for &(v, _) in &self.edges[u] {
                if !seen[v] && self.edge_alive(u, v) {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        false
    }

    pub fn path_cost(&self, path: &[usize]) -> f64 {
        path.windows(2)
            .map(|w| {
                self.edges[w[0]]
                    .iter()
                    .find(|e| e.0 == w[1])
                    .map(|e| e.1)
                    .unwrap_or(f64::INFINITY)
            })
            .sum()
    }

    pub fn positions(&self, path: &[usize]) -> Vec<Vector3<f64>> {
        path.iter().map(|&i| self.nodes[i]).collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct QueueEntry {
    cost: f64,
    node: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on cost, then on node index.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from start to goal. Among equal-cost predecessors the smaller
/// node index wins.
pub fn shortest_path(map: &Roadmap) -> Option<(Vec<usize>, f64)> {
    let n = map.len();
    if map.removed_nodes[Roadmap::START] || map.removed_nodes[Roadmap::GOAL] {
        return None;
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[Roadmap::START] = 0.0;
    heap.push(QueueEntry {
        cost: 0.0,
        node: Roadmap::START,
    });
    while let Some(QueueEntry { cost, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == Roadmap::GOAL {
            break;
        }
        for &(v, w) in &map.edges[u] {
            if done[v] || !map.edge_alive(u, v) {
                continue;
            }
            let nd = cost + w;
            if nd < dist[v] || (nd == dist[v] && u < pred[v]) {
                dist[v] = nd;
                pred[v] = u;
                heap.push(QueueEntry { cost: nd, node: v });
            }
        }
    }
    if !dist[Roadmap::GOAL].is_finite() {
        return None;
    }
    let mut path = vec![Roadmap::GOAL];
    while *path.last().unwrap() != Roadmap::START {
        path.push(pred[*path.last().unwrap()]);
    }
    path.reverse();
    Some((path, dist[Roadmap::GOAL]))
}

/// Up to `k_paths` node sequences, each found after deleting the least-clear
/// interior node of the previous one. A direct start-goal edge has no
/// interior node; that edge is deleted instead.
pub fn distinct_paths(map: &Roadmap, k_paths: usize) -> Vec<(Vec<usize>, f64)> {
    let mut map = map.clone();
    let mut out = Vec::new();
    while out.len() < k_paths.max(1) {
        let Some((path, cost)) = shortest_path(&map) else {
            break;
        };
        if path.len() > 2 {
            let worst = path[1..path.len() - 1]
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    map.clearance[a]
                        .total_cmp(&map.clearance[b])
                        .then(a.cmp(&b))
                })
                .unwrap();
            map.remove_node(worst);
        } else {
            map.remove_edge(path[0], path[1]);
        }
        out.push((path, cost));
    }
    out
}

/// Grows a roadmap between `a` and `b` until they are connected.
pub fn build_roadmap<R: Rng + ?Sized>(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    esdf: &Esdf,
    d_c: f64,
    cfg: &PrmConfig,
    rng: &mut R,
) -> Result<Roadmap, PlanError> {
    let clear = d_c + cfg.clearance_margin;
    let focal = (b - a).norm();
    let mut c_max = (1.2 * focal).max(focal + 1.0);
    let mut n_samples = cfg.initial_samples as f64;
    for _round in 0..cfg.max_rounds.max(1) {
        let mut nodes = vec![*a, *b];
        let mut clearance = vec![esdf.distance(a), esdf.distance(b)];
        for _ in 0..n_samples.round() as usize {
            let p = sample_ellipsoid(a, b, c_max, Some(&esdf.bounds), rng)?;
            let d = esdf.distance(&p);
            if d > clear {
                nodes.push(p);
                clearance.push(d);
            }
        }
        let edges = connect_neighbors(&nodes, esdf, clear, cfg.neighbors);
        let map = Roadmap::from_edges(nodes, clearance, &edges);
        if map.is_connected() {
            return Ok(map);
        }
        c_max *= cfg.axis_growth;
        n_samples *= cfg.sample_growth;
    }
    Err(PlanError::Unreachable {
        pair: 0,
        from: [a.x, a.y, a.z],
        to: [b.x, b.y, b.z],
        rounds: cfg.max_rounds.max(1),
    })
}

fn connect_neighbors(
    nodes: &[Vector3<f64>],
    esdf: &Esdf,
    clear: f64,
    k: usize,
) -> Vec<(usize, usize, f64)> {
    let n = nodes.len();
    let mut candidates: Vec<(usize, usize)> = Vec::with_capacity(n * k);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        dists.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| ((nodes[j] - nodes[i]).norm_squared(), j)),
        );
        let kk = k.min(dists.len());
        if kk == 0 {
            continue;
        }
        if kk < dists.len() {
            dists.select_nth_unstable_by(kk - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        }
        for &(_, j) in &dists[..kk] {
            candidates.push((i.min(j), i.max(j)));
        }
    }
    candidates.sort_unstable();
    candidates.dedup();
    candidates
        .into_iter()
        .filter(|&(i, j)| esdf.segment_free(&nodes[i], &nodes[j], clear))
        .map(|(i, j)| (i, j, (nodes[j] - nodes[i]).norm()))
        .collect()
}

/// Greedy shortcutting to a fixpoint: from each kept vertex jump to the
/// farthest later vertex that is directly reachable.
pub fn shortcut(points: &[Vector3<f64>], esdf: &Esdf, clear: f64) -> Vec<Vector3<f64>> {
    let mut pts = points.to_vec();
    loop {
        if pts.len() <= 2 {
            return pts;
        }
        let mut out = vec![pts[0]];
        let mut i = 0;
        while i < pts.len() - 1 {
            let mut j = pts.len() - 1;
            while j > i + 1 && !esdf.segment_free(&pts[i], &pts[j], clear) {
                j -= 1;
            }
            out.push(pts[j]);
            i = j;
        }
        if out.len() == pts.len() {
            return out;
        }
        pts = out;
    }
}

/// Shortcut, then resample to at most `cfg.resample_spacing` between vertices.
pub fn shorten(points: &[Vector3<f64>], esdf: &Esdf, d_c: f64, cfg: &PrmConfig) -> GuidingPath {
    let short = shortcut(points, esdf, d_c + cfg.clearance_margin);
    GuidingPath::new(short)
        .expect("shortened path keeps distinct endpoints")
        .resampled(cfg.resample_spacing)
}

/// Whether `a` can be swept onto `b` with collision-free rungs between
/// equal-arclength samples.
pub fn same_homotopy_class(
    a: &GuidingPath,
    b: &GuidingPath,
    esdf: &Esdf,
    d_c: f64,
    n_points: usize,
) -> bool {
    let pa = a.equal_arclength(n_points);
    let pb = b.equal_arclength(n_points);
    pa.iter()
        .zip(&pb)
        .all(|(x, y)| esdf.segment_free(x, y, d_c))
}

/// Keeps the shortest path of every sweep-equivalence class, shortest first.
pub fn dedup_homotopy(
    mut paths: Vec<GuidingPath>,
    esdf: &Esdf,
    d_c: f64,
    n_points: usize,
) -> Vec<GuidingPath> {
    paths.sort_by(|x, y| x.length().total_cmp(&y.length()));
    let mut kept: Vec<GuidingPath> = Vec::new();
    for p in paths {
        if !kept
            .iter()
            .any(|k| same_homotopy_class(&p, k, esdf, d_c, n_points))
        {
            kept.push(p);
        }
    }
    kept
}

/// Distinct, shortened, deduplicated paths between two points, by length.
pub fn plan_pair<R: Rng + ?Sized>(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    esdf: &Esdf,
    d_c: f64,
    cfg: &PrmConfig,
    rng: &mut R,
) -> Result<Vec<GuidingPath>, PlanError> {
    if esdf.is_collision(a, d_c) || esdf.is_collision(b, d_c) {
        return Err(PlanError::EndpointInCollision {
            pair: 0,
            from: [a.x, a.y, a.z],
            to: [b.x, b.y, b.z],
        });
    }
    let map = build_roadmap(a, b, esdf, d_c, cfg, rng)?;
    let raw = distinct_paths(&map, cfg.k_paths);
    let shortened: Vec<GuidingPath> = raw
        .iter()
        .map(|(nodes, _)| shorten(&map.positions(nodes), esdf, d_c, cfg))
        .collect();
    Ok(dedup_homotopy(shortened, esdf, d_c, cfg.homotopy_points))
}

/// One full-track polyline built from a choice of path per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub path: GuidingPath,
    /// Index into each pair's path list.
    pub choice: Vec<usize>,
    /// Arclength of each target along `path`.
    pub target_arclength: Vec<f64>,
    /// Vertex of `path` at each target.
    pub target_vertex: Vec<usize>,
}

impl Track {
    pub fn from_choice(pairs: &[Vec<GuidingPath>], choice: &[usize]) -> Result<Self, PlanError> {
        let parts: Vec<GuidingPath> = choice
            .iter()
            .zip(pairs)
            .map(|(&c, paths)| paths[c].clone())
            .collect();
        let (path, junctions) =
            GuidingPath::concat(&parts).map_err(|e| PlanError::Format(e.to_string()))?;
        let target_arclength = junctions.iter().map(|&j| path.cumulative()[j]).collect();
        Ok(Self {
            path,
            choice: choice.to_vec(),
            target_arclength,
            target_vertex: junctions,
        })
    }

    /// Index of the first target strictly ahead of arclength `s`.
    pub fn next_target(&self, s: f64) -> usize {
        self.target_arclength
            .iter()
            .position(|&t| t > s)
            .unwrap_or(self.target_arclength.len() - 1)
    }
}

/// Guiding paths for every consecutive pair plus the shortest full-track
/// combinations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub pairs: Vec<Vec<GuidingPath>>,
    pub tracks: Vec<Track>,
}

/// The `k` cheapest ways of picking one path per pair. Sums are additive so
/// keeping the best `k` partial sums after every pair is exact.
pub fn best_combinations(pairs: &[Vec<GuidingPath>], k: usize) -> Vec<Vec<usize>> {
    let mut beam: Vec<(f64, Vec<usize>)> = vec![(0.0, Vec::new())];
    for paths in pairs {
        let mut next = Vec::with_capacity(beam.len() * paths.len());
        for (cost, choice) in &beam {
            for (i, p) in paths.iter().enumerate() {
                let mut c = choice.clone();
                c.push(i);
                next.push((cost + p.length(), c));
            }
        }
        next.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
        next.truncate(k.max(1));
        beam = next;
    }
    beam.into_iter().map(|(_, c)| c).collect()
}

pub fn tracks_from_pairs(pairs: &[Vec<GuidingPath>], k: usize) -> Result<Vec<Track>, PlanError> {
    best_combinations(pairs, k)
        .iter()
        .map(|c| Track::from_choice(pairs, c))
        .collect()
}

/// Plans every pair `start -> t_1 -> ... -> t_N`. Pair `i` draws from its
/// own generator seeded from `seed`, so results do not depend on threading.
pub fn plan_guiding_paths(
    scenario: &Scenario,
    esdf: &Esdf,
    cfg: &PrmConfig,
    seed: u64,
) -> Result<PlanResult, PlanError> {
    let mut stops = vec![scenario.start_position];
    stops.extend(scenario.targets().iter().map(|w| w.center));
    let pairs: Vec<Vec<GuidingPath>> = (0..stops.len() - 1)
        .into_par_iter()
        .map(|pair| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x504c_414e, pair as u64));
            plan_pair(
                &stops[pair],
                &stops[pair + 1],
                esdf,
                scenario.d_c,
                cfg,
                &mut rng,
            )
            .map_err(|e| match e {
                PlanError::Unreachable {
                    from, to, rounds, ..
                } => PlanError::Unreachable {
                    pair,
                    from,
                    to,
                    rounds,
                },
                PlanError::EndpointInCollision { from, to, .. } => {
                    PlanError::EndpointInCollision { pair, from, to }
                }
                other => other,
            })
        })
        .collect::<Result<_, _>>()?;
    let tracks = tracks_from_pairs(&pairs, cfg.max_combinations)?;
    Ok(PlanResult { pairs, tracks })
}

/// Plain-text path list: one `x y z` line per vertex, a blank line between
/// paths.
pub fn write_paths<W: Write>(mut w: W, paths: &[GuidingPath]) -> io::Result<()> {
    for (i, p) in paths.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        for v in p.points() {
            writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
        }
    }
    Ok(())
}

pub fn read_paths<R: BufRead>(r: R) -> Result<Vec<GuidingPath>, PlanError> {
    let mut out = Vec::new();
    let mut current: Vec<Vector3<f64>> = Vec::new();
    let flush = |current: &mut Vec<Vector3<f64>>, out: &mut Vec<GuidingPath>| {
        if current.is_empty() {
            return Ok(());
        }
        let p = GuidingPath::new(std::mem::take(current))
            .map_err(|e| PlanError::Format(e.to_string()))?;
        out.push(p);
        Ok::<(), PlanError>(())
    };
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            flush(&mut current, &mut out)?;
            continue;
        }
        let v: Result<Vec<f64>, _> = t.split_whitespace().map(str::parse::<f64>).collect();
        match v {
            Ok(v) if v.len() == 3 => current.push(Vector3::new(v[0], v[1], v[2])),
            _ => {
                return Err(PlanError::Format(format!(
                    "line {}: expected `x y z`",
                    lineno + 1
                )))
            }
        }
    }
    flush(&mut current, &mut out)?;
    Ok(out)
}
