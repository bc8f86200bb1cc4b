use nalgebra::{UnitQuaternion, Vector3, Vector4};
use proptest::prelude::*;

use minflight::dynamics::{
    allocate, drag_force, step, step_with_drag, thrust_torque, MotorCommand, QuadParams, QuadState,
};
use minflight::path::GuidingPath;
use minflight::planner::{distinct_paths, shorten, shortest_path, PrmConfig, Roadmap};
use minflight::policy::{action_decode, build_observation, ACT_DIM};
use minflight::progress::{
    curriculum_scale, farthest_visible, progress_reward, waypoint_reward, CurriculumConfig, Stage,
};
use minflight::world::{analytic_distance, Aabb, Esdf, Obstacle, Orientation, Waypoint};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn quaternion() -> impl Strategy<Value = UnitQuaternion<f64>> {
    (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64)
        .prop_map(|(r, p, y)| UnitQuaternion::from_euler_angles(r, p, y))
}

fn state() -> impl Strategy<Value = QuadState> {
    let hover = QuadParams::default().hover_rotor_speed();
    (
        vec3(5.0),
        quaternion(),
        vec3(8.0),
        vec3(4.0),
        prop::array::uniform4(0.5..1.5f64),
    )
        .prop_map(move |(p, q, v, w, o)| QuadState {
            position: p,
            attitude: q,
            velocity: v,
            body_rates: w,
            rotor_speeds: Vector4::from(o) * hover,
        })
}

fn polyline() -> impl Strategy<Value = GuidingPath> {
    prop::collection::vec(vec3(2.0), 1..8).prop_map(|steps| {
        let mut pts = vec![Vector3::zeros()];
        for s in steps {
            // Keep consecutive points apart so no segment degenerates.
            let s = if s.norm() < 1e-3 { Vector3::x() } else { s };
            pts.push(pts.last().unwrap() + s);
        }
        GuidingPath::new(pts).unwrap()
    })
}

fn world() -> (Vec<Obstacle>, Aabb) {
    let obstacles = vec![
        Obstacle::Sphere {
            center: Vector3::new(0.5, 0.3, 0.0),
            radius: 0.6,
        },
        Obstacle::Box {
            center: Vector3::new(-1.2, -0.8, 0.4),
            half_extents: Vector3::new(0.4, 0.3, 0.8),
            orientation: Orientation::from_yaw(0.4),
        },
        Obstacle::Cylinder {
            center: Vector3::new(1.5, -1.3, 0.0),
            radius: 0.3,
            half_height: 2.0,
            orientation: Orientation::default(),
        },
    ];
    (
        obstacles,
        Aabb::new(Vector3::new(-3.0, -3.0, -2.0), Vector3::new(3.0, 3.0, 2.0)),
    )
}

fn esdf() -> &'static Esdf {
    use std::sync::OnceLock;
    static GRID: OnceLock<Esdf> = OnceLock::new();
    GRID.get_or_init(|| {
        let (obstacles, bounds) = world();
        Esdf::build(&obstacles, &bounds, 0.1).unwrap()
    })
}

// Dynamics

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quaternion_stays_unit(s in state(), cmd in prop::array::uniform4(0.3..1.6f64)) {
        let params = QuadParams::default();
        let cmd = MotorCommand { rotor_speeds: Vector4::from(cmd) * params.hover_rotor_speed() };
        let mut x = s;
        for _ in 0..20 {
            x = step(&x, &cmd, 0.02, &params).unwrap();
            prop_assert!((x.attitude.coords.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn free_fall_conserves_energy(p in vec3(3.0), v in vec3(5.0), q in quaternion()) {
        let params = QuadParams::default();
        let g = params.gravity.norm();
        let energy = |s: &QuadState| 0.5 * params.mass * s.velocity.norm_squared() + params.mass * g * s.position.z;
        let mut s = QuadState {
            position: p,
            attitude: q,
            velocity: v,
            body_rates: Vector3::zeros(),
            rotor_speeds: Vector4::zeros(),
        };
        let e0 = energy(&s);
        let zero = MotorCommand { rotor_speeds: Vector4::zeros() };
        for _ in 0..500 {
            s = step_with_drag(&s, &zero, 0.02, &params, &Vector3::zeros()).unwrap();
        }
        let scale = e0.abs().max(params.mass * g);
        prop_assert!((energy(&s) - e0).abs() / scale < 1e-6);
    }

    #[test]
    fn allocation_inverts_mixing(f in prop::array::uniform4(0.0..7.0f64)) {
        let params = QuadParams::default();
        let f = Vector4::from(f);
        let (force, torque) = thrust_torque(&f, &params).unwrap();
        let back = allocate(force.z, &torque, &params);
        prop_assert!((back - f).amax() < 1e-9);
    }

    #[test]
    fn drag_is_odd(v in vec3(20.0), k in vec3(1.0)) {
        prop_assert_eq!(drag_force(&-v, &k), -drag_force(&v, &k));
    }
}

// World

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn interpolation_underestimates_by_at_most_half_diagonal(p in vec3(2.9)) {
        let (obstacles, bounds) = world();
        let grid = esdf();
        let exact = analytic_distance(&obstacles, &bounds, &p);
        prop_assert!(grid.distance(&p) >= exact - grid.resolution * 3f64.sqrt() / 2.0 - 1e-5);
    }

    #[test]
    fn segment_free_is_symmetric(a in vec3(2.9), b in vec3(2.9), d_c in 0.0..0.4f64) {
        let grid = esdf();
        prop_assert_eq!(grid.segment_free(&a, &b, d_c), grid.segment_free(&b, &a, d_c));
    }

    #[test]
    fn waypoint_pass_is_equivariant(
        prev in vec3(1.0),
        next in vec3(1.0),
        yaw in -3.1..3.1f64,
        q in quaternion(),
        shift in vec3(10.0),
    ) {
        let base = Waypoint {
            center: Vector3::zeros(),
            orientation: Orientation::from_yaw(yaw),
            r_tol: 0.5,
        };
        let moved = Waypoint {
            center: shift,
            orientation: Orientation(q * base.orientation.0),
            r_tol: 0.5,
        };
        let a = base.passed(&prev, &next);
        let b = moved.passed(&(q * prev + shift), &(q * next + shift));
        match (a, b) {
            (None, None) => {}
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
            // Crossings exactly on the tolerance circle can flip with rounding.
            (Some(x), None) | (None, Some(x)) => prop_assert!((x - 0.5).abs() < 1e-9),
        }
    }
}

#[test]
fn esdf_is_one_lipschitz_on_adjacent_nodes() {
    let grid = esdf();
    let [nx, ny, nz] = grid.dims;
    let tol = grid.resolution * (1.0 + 1e-6) + 1e-5;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = grid.values[grid.index(i, j, k)] as f64;
                for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (a, b, c) = (i + di, j + dj, k + dk);
                    if a < nx && b < ny && c < nz {
                        let w = grid.values[grid.index(a, b, c)] as f64;
                        assert!((v - w).abs() <= tol, "({i},{j},{k}) {v} vs {w}");
                    }
                }
            }
        }
    }
}

// Planner

fn roadmap() -> impl Strategy<Value = (Vec<(usize, usize, f64)>, usize)> {
    (4usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec((0..n, 0..n, 1u32..6), n..4 * n),
            Just(n),
        )
            .prop_map(|(edges, n)| {
                let e = edges
                    .into_iter()
                    .filter(|(i, j, _)| i != j)
                    .map(|(i, j, w)| (i, j, w as f64))
                    .collect();
                (e, n)
            })
    })
}

fn build(edges: &[(usize, usize, f64)], n: usize, scale: f64) -> Roadmap {
    let nodes = (0..n).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    let clearance = (0..n).map(|i| 1.0 + (i * 7 % 5) as f64).collect();
    let scaled: Vec<_> = edges.iter().map(|&(i, j, w)| (i, j, w * scale)).collect();
    Roadmap::from_edges(nodes, clearance, &scaled)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dijkstra_invariant_under_scaling((edges, n) in roadmap(), k in -3i32..4) {
        let scale = 2f64.powi(k);
        let a = shortest_path(&build(&edges, n, 1.0));
        let b = shortest_path(&build(&edges, n, scale));
        match (a, b) {
            (None, None) => {}
            (Some((pa, ca)), Some((pb, cb))) => {
                prop_assert_eq!(pa, pb);
                prop_assert!((ca * scale - cb).abs() < 1e-12);
            }
            _ => prop_assert!(false, "reachability changed under scaling"),
        }
    }

    #[test]
    fn distinct_path_costs_do_not_decrease((edges, n) in roadmap(), k in 1usize..6) {
        let paths = distinct_paths(&build(&edges, n, 1.0), k);
        for w in paths.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn shorten_never_lengthens(steps in prop::collection::vec(vec3(0.6), 1..10)) {
        // A wandering polyline in the free corner of the world.
        let mut pts = vec![Vector3::new(-2.5, 2.0, -1.0)];
        for s in steps {
            let next = pts.last().unwrap() + s;
            pts.push(Vector3::new(next.x.clamp(-2.5, -0.5), next.y.clamp(1.2, 2.5), next.z.clamp(-1.5, 1.5)));
        }
        pts.dedup_by(|a, b| (*a - *b).norm() < 1e-6);
        prop_assume!(pts.len() >= 2);
        let original = GuidingPath::new(pts.clone()).unwrap();
        let short = shorten(&pts, esdf(), 0.1, &PrmConfig::default());
        prop_assert!(short.length() <= original.length() + 1e-9);
        prop_assert_eq!(short.start(), original.start());
        prop_assert_eq!(short.end(), original.end());
    }
}

// Progress

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn progress_telescopes(path in polyline(), moves in prop::collection::vec(vec3(0.5), 1..60)) {
        let mut p = path.start();
        let s0 = path.project(&p).arclength;
        let mut prev = s0;
        let mut sum = 0.0;
        for m in moves {
            p += m;
            let s = path.project(&p).arclength;
            sum += progress_reward(s, prev);
            prev = s;
        }
        prop_assert!((sum - (prev - s0)).abs() <= 1e-9);
    }

    #[test]
    fn projection_is_global_minimum(path in polyline(), p in vec3(6.0)) {
        let proj = path.project(&p);
        for v in path.points() {
            prop_assert!(proj.distance <= (p - v).norm() + 1e-12);
        }
        prop_assert!(proj.arclength >= 0.0 && proj.arclength <= path.length() + 1e-12);
        prop_assert!(((path.point_at(proj.arclength) - proj.point).norm()) < 1e-9);
    }

    #[test]
    fn curriculum_scale_in_unit_interval(v in 0.0..10.0f64, d in 0.0..3.0f64) {
        let c = CurriculumConfig::default();
        let s = curriculum_scale(Stage::Slow, v, d, &c);
        prop_assert!(s > 0.0 && s <= 1.0);
        if c.admits(v, d) {
            prop_assert_eq!(s, 1.0);
        } else {
            prop_assert!(s < 1.0);
        }
        prop_assert_eq!(curriculum_scale(Stage::Fast, v, d, &c), 1.0);
    }

    #[test]
    fn waypoint_reward_range(r_tol in 0.05..2.0f64, frac in 0.0..=1.0f64) {
        let r = waypoint_reward(frac * r_tol, r_tol);
        prop_assert!(r > (-1.0f64).exp() - 1e-15 && r <= 1.0);
    }

    #[test]
    fn gamma_is_visible(t in 0.0..1.0f64, offset in vec3(0.3)) {
        // Guiding path through the world's free space, around the sphere.
        let path = GuidingPath::new(vec![
            Vector3::new(-2.5, 2.0, 0.0),
            Vector3::new(0.5, 1.6, 0.0),
            Vector3::new(2.5, 1.0, 0.0),
            Vector3::new(2.5, -2.5, 0.0),
        ])
        .unwrap()
        .resampled(0.5);
        let grid = esdf();
        let p = path.point_at(t * path.length()) + offset;
        let proj = path.project(&p);
        prop_assume!(grid.segment_free(&p, &proj.point, 0.15));
        let gamma = farthest_visible(&path, &p, &proj, grid, 0.15);
        prop_assert!(grid.segment_free(&p, &gamma, 0.15));
    }
}

// Policy interface

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn action_decode_monotone(a in prop::array::uniform4(-1.0..1.0f64), i in 0usize..ACT_DIM, da in 0.0..1.0f64) {
        let params = QuadParams::default();
        let mut b = a;
        b[i] = (a[i] + da).min(1.0);
        let (ca, cb) = (action_decode(&a, &params), action_decode(&b, &params));
        let va = [ca.collective_thrust, ca.body_rates.x, ca.body_rates.y, ca.body_rates.z];
        let vb = [cb.collective_thrust, cb.body_rates.x, cb.body_rates.y, cb.body_rates.z];
        prop_assert!(vb[i] >= va[i]);
        for j in (0..ACT_DIM).filter(|&j| j != i) {
            prop_assert_eq!(va[j], vb[j]);
        }
        prop_assert!(va[0] >= 4.0 * params.thrust_min && va[0] <= 4.0 * params.thrust_max);
        prop_assert!(ca.body_rates.amax() <= params.max_body_rate);
    }

    #[test]
    fn observation_is_injective(s in state(), which in 0usize..5, delta in vec3(1.0)) {
        prop_assume!(delta.norm() > 1e-3);
        let wp = Waypoint::new(Vector3::new(3.0, 1.0, 0.5), 0.4);
        let gamma = Vector3::new(1.0, 2.0, 3.0);
        let base = build_observation(&s, &wp, &gamma).unwrap();
        let (mut s2, mut wp2, mut g2) = (s, wp, gamma);
        match which {
            0 => s2.position += delta,
            1 => s2.attitude = UnitQuaternion::from_scaled_axis(delta) * s.attitude,
            2 => s2.velocity += delta,
            3 => wp2.center += delta,
            _ => g2 += delta,
        }
        let other = build_observation(&s2, &wp2, &g2).unwrap();
        prop_assert_ne!(base, other);
    }
}

#[test]
fn action_box_corners() {
    let params = QuadParams::default();
    let lo = action_decode(&[-1.0; 4], &params);
    let hi = action_decode(&[1.0; 4], &params);
    assert_eq!(lo.collective_thrust, 4.0 * params.thrust_min);
    assert_eq!(hi.collective_thrust, 4.0 * params.thrust_max);
    assert_eq!(lo.body_rates, Vector3::repeat(-params.max_body_rate));
    assert_eq!(hi.body_rates, Vector3::repeat(params.max_body_rate));
}
