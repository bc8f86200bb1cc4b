//! Minimum-time quadrotor flight through cluttered scenes.
//!
//! The crate covers a full pipeline: a rotor-level quadrotor simulator, a
//! Euclidean signed distance field of the scene, a roadmap planner that
//! produces topologically distinct guiding paths through the waypoints, a
//! progress-along-path reward, and a PPO trainer that learns a body-rate
//! policy with a two-stage curriculum.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dynamics;
pub mod path;
pub mod planner;
pub mod policy;
pub mod progress;
pub mod scenarios;
pub mod seed;
pub mod trainer;
pub mod world;

// Book chapters are compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    struct Overview;
    #[doc = include_str!("../../../book/src/dynamics.md")]
    struct Dynamics;
    #[doc = include_str!("../../../book/src/world.md")]
    struct World;
    #[doc = include_str!("../../../book/src/planning.md")]
    struct Planning;
    #[doc = include_str!("../../../book/src/reward.md")]
    struct Reward;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
