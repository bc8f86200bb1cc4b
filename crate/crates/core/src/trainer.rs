//! Parallel agents, episode management and the two-stage training loop.
//!
//! Every agent owns its simulator state, a drag sample, a generator, and a
//! cache of valid states binned by reached distance. Episodes restart from a
//! random cached state, so agents see the whole track early in training.
//! Training alternates rollout collection over all agents with a PPO update.
//! The slow stage scales the progress reward by the curriculum factor; once
//! the mean-action policy completes the track in enough consecutive
//! evaluations, training switches to the unscaled fast stage.

use std::collections::BTreeMap;
use std::io::{self, Write};

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{low_level_control, step_with_drag, QuadParams, QuadState};
use crate::path::PathProjection;
use crate::planner::Track;
use crate::policy::{
    action_decode, build_observation, gaussian_log_prob, ppo_update, sample_action, ActorCritic,
    Adam, NetShape, PpoConfig, PpoError, PpoStats, RolloutBatch, StepEnd, ACT_DIM, OBS_DIM,
};
use crate::progress::{
    farthest_visible, k_s_init, total_reward, CurriculumConfig, RewardTerms, RewardWeights, Stage,
    StepEvents,
};
use crate::seed::derive_seed;
use crate::world::{Esdf, Scenario, Waypoint};

const STREAM_AGENT: u64 = 0x4147_454e;
const STREAM_EVAL: u64 = 0x4556_414c;
const STREAM_INIT: u64 = 0x494e_4954;
const STREAM_UPDATE: u64 = 0x5550_4454;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_agents: usize,
    /// Episodes are truncated after this many steps.
    pub max_episode_steps: usize,
    /// Environment-step budget over all agents.
    pub max_env_steps: u64,
    /// Policy period, s.
    pub dt: f64,
    /// Iterations between evaluations.
    pub eval_interval: usize,
    /// Drag-randomized mean-action runs per evaluation, used for the success
    /// target.
    pub eval_runs: usize,
    /// Stop once the fast stage reaches this evaluation success rate.
    pub target_success: Option<f64>,
    /// Consecutive completed deterministic evaluations needed to leave the
    /// slow stage.
    pub switch_after: usize,
    pub start_stage: Stage,
    /// Fast-stage environment steps to run before the success target may
    /// stop training.
    pub min_fast_steps: u64,
    /// Width of a valid-state bin, m of reached distance.
    pub bin_size: f64,
    /// Segments searched on each side of the last projection.
    pub projection_window: usize,
    pub drag_randomization: bool,
    /// Iterations between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_agents: 100,
            max_episode_steps: 1500,
            max_env_steps: 2_000_000,
            dt: 0.02,
            eval_interval: 5,
            eval_runs: 20,
            target_success: None,
            switch_after: 3,
            start_stage: Stage::Slow,
            min_fast_steps: 0,
            bin_size: 1.0,
            projection_window: 8,
            drag_randomization: true,
            checkpoint_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_agents == 0 {
            return Err("train.n_agents must be at least 1".into());
        }
        if self.max_episode_steps == 0 {
            return Err("train.max_episode_steps must be positive".into());
        }
        if !(self.dt > 0.0) {
            return Err(format!("train.dt must be positive, got {}", self.dt));
        }
        if !(self.bin_size > 0.0) {
            return Err(format!(
                "train.bin_size must be positive, got {}",
                self.bin_size
            ));
        }
        if let Some(t) = self.target_success {
            if !(0.0..=1.0).contains(&t) {
                return Err(format!("train.target_success must be in [0, 1], got {t}"));
            }
        }
        if self.eval_interval == 0 {
            return Err("train.eval_interval must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("training aborted at iteration {iteration}: {source}")]
    NonFinite {
        iteration: usize,
        #[source]
        source: PpoError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Everything an agent needs that does not change during training.
#[derive(Debug, Clone)]
pub struct Environment {
    pub scenario: Scenario,
    pub esdf: Esdf,
    pub tracks: Vec<Track>,
    pub params: QuadParams,
    /// Reward weights with `k_s` resolved.
    pub weights: RewardWeights,
    pub curriculum: CurriculumConfig,
    pub dt: f64,
    pub projection_window: usize,
    targets: Vec<Waypoint>,
}

impl Environment {
    /// An unset `k_s` is derived from the shortest track.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scenario: Scenario,
        esdf: Esdf,
        tracks: Vec<Track>,
        params: QuadParams,
        mut weights: RewardWeights,
        curriculum: CurriculumConfig,
        dt: f64,
        projection_window: usize,
    ) -> Result<Self, TrainError> {
        if tracks.is_empty() {
            return Err(TrainError::Config(
                "no guiding-path combination available".into(),
            ));
        }
        let targets = scenario.targets();
        for t in &tracks {
            if t.target_arclength.len() != targets.len() {
                return Err(TrainError::Config(format!(
                    "track has {} targets, scenario has {}",
                    t.target_arclength.len(),
                    targets.len()
                )));
            }
        }
        params
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        curriculum.validate().map_err(TrainError::Config)?;
        if weights.k_s.is_none() {
            let k = k_s_init(curriculum.v_max, dt, tracks[0].path.length())
                .map_err(TrainError::Config)?;
            weights.k_s = Some(k);
        }
        Ok(Self {
            scenario,
            esdf,
            tracks,
            params,
            weights,
            curriculum,
            dt,
            projection_window,
            targets,
        })
    }

    pub fn targets(&self) -> &[Waypoint] {
        &self.targets
    }

    pub fn start_state(&self) -> QuadState {
        let mut s = QuadState::hover(self.scenario.start_position, &self.params);
        s.velocity = self.scenario.start_velocity;
        s.attitude = self.scenario.start_attitude.0;
        s
    }

    /// Windowed projection that stops at the active target, so flying past
    /// a waypoint without passing it earns no progress.
    fn project(
        &self,
        track: &Track,
        p: &Vector3<f64>,
        anchor: usize,
        waypoint: usize,
    ) -> PathProjection {
        let end = track.target_vertex[waypoint.min(track.target_vertex.len() - 1)];
        track
            .path
            .project_window_until(p, anchor, self.projection_window, end)
    }

    /// Fresh episode from the scenario start on track `combo`.
    pub fn start_episode(&self, combo: usize) -> Episode {
        let state = self.start_state();
        let track = &self.tracks[combo];
        let proj = track.path.project_window_until(
            &state.position,
            0,
            usize::MAX / 2,
            track.target_vertex[0],
        );
        Episode {
            state,
            waypoint: 0,
            combo,
            proj,
            steps: 0,
            from_start: true,
        }
    }

    /// Observation of the episode's current state, with the farthest visible
    /// path point as `gamma`.
    pub fn observe(&self, ep: &Episode) -> [f64; OBS_DIM] {
        let path = &self.tracks[ep.combo].path;
        let gamma = farthest_visible(
            path,
            &ep.state.position,
            &ep.proj,
            &self.esdf,
            self.scenario.d_c,
        );
        let wp = &self.targets[ep.waypoint.min(self.targets.len() - 1)];
        build_observation(&ep.state, wp, &gamma).unwrap_or([0.0; OBS_DIM])
    }

    /// Applies one normalized action for `dt`.
    pub fn step(
        &self,
        ep: &mut Episode,
        action: &[f64; ACT_DIM],
        drag: &Vector3<f64>,
        stage: Stage,
        max_steps: usize,
    ) -> StepOutcome {
        let prev = ep.state;
        let cmd = action_decode(action, &self.params);
        let ctl = low_level_control(&prev, &cmd, &self.params);
        let next = step_with_drag(&prev, &ctl.command, self.dt, &self.params, drag)
            .ok()
            .filter(QuadState::is_finite);
        let track = &self.tracks[ep.combo];
        ep.steps += 1;

        let Some(next) = next else {
            let terms = RewardTerms {
                terminal: self.weights.r_terminal,
                ..Default::default()
            };
            return StepOutcome {
                terms,
                end: EpisodeEnd::NonFinite,
            };
        };
        ep.state = next;
        let d_c = self.scenario.d_c;
        let collided = !self.esdf.segment_free(&prev.position, &next.position, d_c);
        let proj = self.project(track, &next.position, ep.proj.segment, ep.waypoint);
        let target = &self.targets[ep.waypoint];
        let pass = if collided {
            None
        } else {
            target.passed(&prev.position, &next.position)
        };
        let ev = StepEvents {
            projection: proj,
            prev_arclength: ep.proj.arclength,
            speed: next.velocity.norm(),
            waypoint: pass.map(|d| (d, target.r_tol)),
            collided,
            body_rates: next.body_rates,
        };
        let terms = total_reward(&ev, &self.weights, stage, &self.curriculum);
        ep.proj = proj;

        let end = if collided {
            EpisodeEnd::Collision
        } else if pass.is_some() && ep.waypoint + 1 == self.targets.len() {
            EpisodeEnd::Completed
        } else {
            if pass.is_some() {
                ep.waypoint += 1;
                // Re-anchor the window at the passed waypoint.
                let anchor = track
                    .path
                    .segment_at(track.target_arclength[ep.waypoint - 1]);
                ep.proj = self.project(track, &next.position, anchor, ep.waypoint);
            }
            if ep.steps >= max_steps {
                EpisodeEnd::Truncated
            } else {
                EpisodeEnd::Running
            }
        };
        StepOutcome { terms, end }
    }
}

/// Simulator-side episode state of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub state: QuadState,
    /// Index of the active target.
    pub waypoint: usize,
    /// Guiding-path combination used for reward and observation.
    pub combo: usize,
    /// Projection onto the combination's path after the last step.
    pub proj: PathProjection,
    pub steps: usize,
    /// Whether the episode began at the scenario start.
    pub from_start: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeEnd {
    Running,
    Collision,
    Completed,
    Truncated,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub terms: RewardTerms,
    pub end: EpisodeEnd,
}

/// A cached state and where it lies on its track.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidEntry {
    pub state: QuadState,
    pub proj: PathProjection,
    /// Active target when the state was stored.
    pub waypoint: usize,
}

/// Valid states keyed by `(combination, bin)`; a newer state overwrites the
/// bin.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidStates {
    pub bins: BTreeMap<(usize, usize), ValidEntry>,
}

impl ValidStates {
    pub fn populated(&self, combo: usize) -> Vec<usize> {
        self.bins
            .range((combo, 0)..(combo + 1, 0))
            .map(|(k, _)| k.1)
            .collect()
    }
}

/// One parallel agent.
#[derive(Debug, Clone)]
pub struct AgentSlot {
    pub episode: Episode,
    pub drag: Vector3<f64>,
    pub valid: ValidStates,
    pub rng: ChaCha8Rng,
    pub episode_return: f64,
    obs: [f32; OBS_DIM],
}

impl AgentSlot {
    pub fn new(env: &Environment, rng: ChaCha8Rng) -> Self {
        let episode = env.start_episode(0);
        let mut slot = Self {
            episode,
            drag: env.params.drag,
            valid: ValidStates::default(),
            rng,
            episode_return: 0.0,
            obs: [0.0; OBS_DIM],
        };
        slot.refresh_obs(env);
        slot
    }

    pub fn observation(&self) -> &[f32; OBS_DIM] {
        &self.obs
    }

    fn refresh_obs(&mut self, env: &Environment) {
        self.obs = env.observe(&self.episode).map(|x| x as f32);
    }
}

/// Per-axis drag `max(0, N(0, k_v))`.
pub fn sample_drag<R: Rng + ?Sized>(nominal: &Vector3<f64>, rng: &mut R) -> Vector3<f64> {
    nominal.map(|k| {
        if k > 0.0 {
            Normal::new(0.0, k)
                .expect("positive std")
                .sample(rng)
                .max(0.0)
        } else {
            0.0
        }
    })
}

/// Restarts the agent: picks a combination uniformly, then a populated bin
/// of it uniformly (the scenario start when none is), and resamples drag.
pub fn reset_agent(slot: &mut AgentSlot, env: &Environment, randomize_drag: bool) {
    let combo = slot.rng.random_range(0..env.tracks.len());
    let bins = slot.valid.populated(combo);
    slot.episode = if bins.is_empty() {
        env.start_episode(combo)
    } else {
        let bin = bins[slot.rng.random_range(0..bins.len())];
        let entry = &slot.valid.bins[&(combo, bin)];
        Episode {
            state: entry.state,
            waypoint: entry.waypoint,
            combo,
            proj: entry.proj,
            steps: 0,
            from_start: false,
        }
    };
    slot.drag = if randomize_drag {
        sample_drag(&env.params.drag, &mut slot.rng)
    } else {
        env.params.drag
    };
    slot.episode_return = 0.0;
    slot.refresh_obs(env);
}

/// Stores the current state in its reached-distance bin if it satisfies the
/// stage's validity rule. Returns whether it was stored.
pub fn record_valid_state(
    slot: &mut AgentSlot,
    stage: Stage,
    curriculum: &CurriculumConfig,
    bin_size: f64,
) -> bool {
    let ep = &slot.episode;
    let ok = match stage {
        Stage::Slow => curriculum.admits(ep.state.velocity.norm(), ep.proj.distance),
        Stage::Fast => true,
    };
    if ok {
        let bin = (ep.proj.arclength / bin_size).floor().max(0.0) as usize;
        slot.valid.bins.insert(
            (ep.combo, bin),
            ValidEntry {
                state: ep.state,
                proj: ep.proj,
                waypoint: ep.waypoint,
            },
        );
    }
    ok
}

/// Whether the last `k` deterministic evaluations all completed the track.
pub fn stage_switch_check(history: &[bool], k: usize, stage: Stage) -> bool {
    stage == Stage::Slow
        && k > 0
        && history.len() >= k
        && history[history.len() - k..].iter().all(|&c| c)
}

/// Result of one agent step within a rollout.
#[derive(Debug, Clone)]
struct AgentTransition {
    obs: [f32; OBS_DIM],
    action: [f32; ACT_DIM],
    log_prob: f32,
    reward: f64,
    value: f64,
    end: EpisodeEnd,
    /// Observation whose value bootstraps a truncated or completed step.
    final_obs: Option<[f32; OBS_DIM]>,
    lap_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RolloutStats {
    pub steps: u64,
    pub reward_sum: f64,
    pub episodes: usize,
    pub completions: usize,
    pub collisions: usize,
    pub non_finite: usize,
    pub lap_times: usize,
    pub lap_time_sum: f64,
    pub best_lap_time: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn agent_step(
    slot: &mut AgentSlot,
    mean: &[f32],
    log_std: &[f32],
    value: f32,
    env: &Environment,
    stage: Stage,
    cfg: &TrainConfig,
) -> AgentTransition {
    let obs = slot.obs;
    let raw = sample_action(mean, log_std, &mut slot.rng);
    let log_prob = gaussian_log_prob(&raw, mean, log_std);
    let action: [f64; ACT_DIM] = std::array::from_fn(|i| (raw[i] as f64).clamp(-1.0, 1.0));
    let out = env.step(
        &mut slot.episode,
        &action,
        &slot.drag,
        stage,
        cfg.max_episode_steps,
    );
    let reward = out.terms.total();
    slot.episode_return += reward;
    let mut tr = AgentTransition {
        obs,
        action: std::array::from_fn(|i| raw[i]),
        log_prob,
        reward,
        value: value as f64,
        end: out.end,
        final_obs: None,
        lap_time: None,
    };
    match out.end {
        EpisodeEnd::Running => {
            record_valid_state(slot, stage, &env.curriculum, cfg.bin_size);
            slot.refresh_obs(env);
        }
        EpisodeEnd::Truncated => {
            record_valid_state(slot, stage, &env.curriculum, cfg.bin_size);
            slot.refresh_obs(env);
            tr.final_obs = Some(slot.obs);
            reset_agent(slot, env, cfg.drag_randomization);
        }
        EpisodeEnd::Completed => {
            if slot.episode.from_start {
                tr.lap_time = Some(slot.episode.steps as f64 * env.dt);
            }
            // Finishing is not a terminal state: the agent carries on from
            // its reset state, whose value is the bootstrap.
            reset_agent(slot, env, cfg.drag_randomization);
            tr.final_obs = Some(slot.obs);
        }
        EpisodeEnd::Collision | EpisodeEnd::NonFinite => {
            reset_agent(slot, env, cfg.drag_randomization);
        }
    }
    tr
}

fn obs_matrix<'a>(rows: impl Iterator<Item = &'a [f32; OBS_DIM]>) -> Array2<f32> {
    let flat: Vec<f32> = rows.flat_map(|r| r.iter().copied()).collect();
    let n = flat.len() / OBS_DIM;
    Array2::from_shape_vec((n, OBS_DIM), flat).expect("observation rows")
}

/// Steps every agent `steps` times under `model` and returns the
/// transitions with advantages not yet computed. The last transition of each
/// agent bootstraps from the value of its current state.
pub fn collect_rollout(
    slots: &mut [AgentSlot],
    model: &ActorCritic<f32>,
    env: &Environment,
    stage: Stage,
    cfg: &TrainConfig,
    steps: usize,
) -> (RolloutBatch, RolloutStats) {
    let mut batch = RolloutBatch::default();
    let mut stats = RolloutStats::default();
    let log_std = model.log_std.to_vec();
    let mut last = vec![usize::MAX; slots.len()];
    for _ in 0..steps {
        let obs = obs_matrix(slots.iter().map(|s| &s.obs));
        let (mean, value) = model.forward(obs.view());
        let results: Vec<AgentTransition> = slots
            .par_iter_mut()
            .enumerate()
            .map(|(i, slot)| {
                let m = mean.row(i);
                agent_step(
                    slot,
                    m.as_slice().unwrap(),
                    &log_std,
                    value[i],
                    env,
                    stage,
                    cfg,
                )
            })
            .collect();
        let trunc: Vec<usize> = (0..results.len())
            .filter(|&i| results[i].final_obs.is_some())
            .collect();
        let mut boot = vec![0.0; results.len()];
        if !trunc.is_empty() {
            let o = obs_matrix(
                trunc
                    .iter()
                    .map(|&i| results[i].final_obs.as_ref().unwrap()),
            );
            let (_, v) = model.forward(o.view());
            for (k, &i) in trunc.iter().enumerate() {
                boot[i] = v[k] as f64;
            }
        }
        for (i, tr) in results.into_iter().enumerate() {
            let end = match tr.end {
                EpisodeEnd::Running => StepEnd::Continue,
                EpisodeEnd::Truncated | EpisodeEnd::Completed => {
                    StepEnd::Truncated { bootstrap: boot[i] }
                }
                _ => StepEnd::Terminal,
            };
            stats.steps += 1;
            stats.reward_sum += tr.reward;
            match tr.end {
                EpisodeEnd::Running => {}
                EpisodeEnd::Completed => {
                    stats.episodes += 1;
                    stats.completions += 1;
                }
                EpisodeEnd::Collision => {
                    stats.episodes += 1;
                    stats.collisions += 1;
                }
                EpisodeEnd::NonFinite => {
                    stats.episodes += 1;
                    stats.non_finite += 1;
                }
                EpisodeEnd::Truncated => stats.episodes += 1,
            }
            if let Some(l) = tr.lap_time {
                stats.lap_times += 1;
                stats.lap_time_sum += l;
                stats.best_lap_time = Some(stats.best_lap_time.map_or(l, |b: f64| b.min(l)));
            }
            last[i] = batch.len();
            batch.push(
                &tr.obs,
                &tr.action,
                tr.log_prob,
                tr.reward,
                tr.value,
                end,
                i,
            );
        }
    }
    if steps > 0 {
        let obs = obs_matrix(slots.iter().map(|s| &s.obs));
        let (_, value) = model.forward(obs.view());
        for (i, &t) in last.iter().enumerate() {
            if batch.ends[t] == StepEnd::Continue {
                batch.ends[t] = StepEnd::Truncated {
                    bootstrap: value[i] as f64,
                };
            }
        }
    }
    (batch, stats)
}

/// Settings of [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub runs: usize,
    pub drag_randomization: bool,
    pub seed: u64,
    pub max_steps: usize,
    /// Stage whose reward is reported in trajectories.
    pub stage: Stage,
    /// Guiding-path combination used for observation and reward.
    pub combo: usize,
    pub record_trajectories: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            runs: 1,
            drag_randomization: false,
            seed: 0,
            max_steps: 1500,
            stage: Stage::Fast,
            combo: 0,
            record_trajectories: false,
        }
    }
}

/// Columns of a trajectory CSV.
pub const TRAJECTORY_COLUMNS: [&str; 28] = [
    "t",
    "px",
    "py",
    "pz",
    "qw",
    "qx",
    "qy",
    "qz",
    "vx",
    "vy",
    "vz",
    "wx",
    "wy",
    "wz",
    "omega1",
    "omega2",
    "omega3",
    "omega4",
    "a_thrust",
    "a_wx",
    "a_wy",
    "a_wz",
    "r_progress",
    "r_reached",
    "r_waypoint",
    "r_terminal",
    "r_rate",
    "waypoint",
];

pub type TrajectoryRow = [f64; 28];

fn trajectory_row(
    t: f64,
    s: &QuadState,
    action: &[f64; ACT_DIM],
    terms: &RewardTerms,
    waypoint: usize,
) -> TrajectoryRow {
    let q = s.attitude.quaternion();
    let mut r = [0.0; 28];
    let vals = [
        t,
        s.position.x,
        s.position.y,
        s.position.z,
        q.w,
        q.i,
        q.j,
        q.k,
    ];
    r[..8].copy_from_slice(&vals);
    r[8..11].copy_from_slice(s.velocity.as_slice());
    r[11..14].copy_from_slice(s.body_rates.as_slice());
    r[14..18].copy_from_slice(s.rotor_speeds.as_slice());
    r[18..22].copy_from_slice(action);
    r[22..27].copy_from_slice(&terms.as_array());
    r[27] = waypoint as f64;
    r
}

pub fn write_trajectory_csv<W: Write>(mut w: W, rows: &[TrajectoryRow]) -> io::Result<()> {
    writeln!(w, "{}", TRAJECTORY_COLUMNS.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Outcome of one evaluation rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub success: bool,
    pub collided: bool,
    pub lap_time: Option<f64>,
    pub steps: usize,
    pub waypoints_passed: usize,
    pub episode_return: f64,
    pub drag: Vector3<f64>,
    pub trajectory: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EvalStats {
    pub runs: usize,
    pub success_rate: f64,
    /// Mean lap time over successful runs.
    #[serde(rename = "T_a_mean")]
    pub lap_mean: Option<f64>,
    #[serde(rename = "T_a_std")]
    pub lap_std: Option<f64>,
    /// Best lap time.
    #[serde(rename = "T_b")]
    pub lap_best: Option<f64>,
}

impl EvalStats {
    pub fn from_runs(runs: &[RunResult]) -> Self {
        let laps: Vec<f64> = runs.iter().filter_map(|r| r.lap_time).collect();
        let n = laps.len() as f64;
        let mean = (!laps.is_empty()).then(|| laps.iter().sum::<f64>() / n);
        let std = mean.map(|m| (laps.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / n).sqrt());
        Self {
            runs: runs.len(),
            success_rate: if runs.is_empty() {
                0.0
            } else {
                runs.iter().filter(|r| r.success).count() as f64 / runs.len() as f64
            },
            lap_mean: mean,
            lap_std: std,
            lap_best: laps.iter().copied().reduce(f64::min),
        }
    }
}

/// Mean-action rollouts from the scenario start.
pub fn evaluate(
    model: &ActorCritic<f32>,
    env: &Environment,
    opts: &EvalOptions,
) -> (EvalStats, Vec<RunResult>) {
    let runs: Vec<RunResult> = (0..opts.runs)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, STREAM_EVAL, k as u64));
            let drag = if opts.drag_randomization {
                sample_drag(&env.params.drag, &mut rng)
            } else {
                env.params.drag
            };
            run_episode(model, env, opts, drag)
        })
        .collect();
    (EvalStats::from_runs(&runs), runs)
}

fn run_episode(
    model: &ActorCritic<f32>,
    env: &Environment,
    opts: &EvalOptions,
    drag: Vector3<f64>,
) -> RunResult {
    let mut ep = env.start_episode(opts.combo.min(env.tracks.len() - 1));
    let mut traj = Vec::new();
    let mut ret = 0.0;
    if opts.record_trajectories {
        traj.push(trajectory_row(
            0.0,
            &ep.state,
            &[0.0; ACT_DIM],
            &RewardTerms::default(),
            ep.waypoint,
        ));
    }
    loop {
        let obs = env.observe(&ep).map(|x| x as f32);
        let out = model.output(&obs);
        let action: [f64; ACT_DIM] = std::array::from_fn(|i| (out.mean[i] as f64).clamp(-1.0, 1.0));
        let res = env.step(&mut ep, &action, &drag, opts.stage, opts.max_steps);
        ret += res.terms.total();
        if opts.record_trajectories {
            traj.push(trajectory_row(
                ep.steps as f64 * env.dt,
                &ep.state,
                &action,
                &res.terms,
                ep.waypoint,
            ));
        }
        if res.end != EpisodeEnd::Running {
            let success = res.end == EpisodeEnd::Completed;
            return RunResult {
                success,
                collided: matches!(res.end, EpisodeEnd::Collision | EpisodeEnd::NonFinite),
                lap_time: success.then_some(ep.steps as f64 * env.dt),
                steps: ep.steps,
                waypoints_passed: ep.waypoint + usize::from(success),
                episode_return: ret,
                drag,
                trajectory: traj,
            };
        }
    }
}

/// One training-log row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub env_steps: u64,
    /// Mean per-step reward of the rollout.
    pub mean_reward: f64,
    /// Completed episodes over finished episodes in the rollout, percent.
    pub success_pct: f64,
    /// Over episodes that started at the scenario start and completed.
    pub mean_lap_time: Option<f64>,
    pub best_lap_time: Option<f64>,
    pub stage: Stage,
    pub episodes: usize,
    pub collisions: usize,
    /// Lap time of the deterministic evaluation, when one ran.
    pub det_lap_time: Option<f64>,
    pub det_completed: Option<bool>,
    pub eval_success: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

pub const LOG_COLUMNS: [&str; 17] = [
    "iteration",
    "env_steps",
    "mean_reward",
    "success_pct",
    "mean_lap_time",
    "best_lap_time",
    "stage",
    "episodes",
    "collisions",
    "det_lap_time",
    "det_completed",
    "eval_success",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl LogRow {
    pub fn csv_header() -> String {
        LOG_COLUMNS.join(",")
    }

    pub fn csv_line(&self) -> String {
        [
            self.iteration.to_string(),
            self.env_steps.to_string(),
            self.mean_reward.to_string(),
            self.success_pct.to_string(),
            opt(self.mean_lap_time),
            opt(self.best_lap_time),
            self.stage.to_string(),
            self.episodes.to_string(),
            self.collisions.to_string(),
            opt(self.det_lap_time),
            self.det_completed
                .map(|b| (b as u8).to_string())
                .unwrap_or_default(),
            opt(self.eval_success),
            self.policy_loss.to_string(),
            self.value_loss.to_string(),
            self.entropy.to_string(),
            self.approx_kl.to_string(),
            self.clip_fraction.to_string(),
        ]
        .join(",")
    }
}

/// Where training starts from.
#[derive(Debug, Clone)]
pub struct TrainStart {
    pub model: ActorCritic<f32>,
    pub stage: Stage,
    pub iteration: usize,
    pub env_steps: u64,
}

/// Summary of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ActorCritic<f32>,
    pub stage: Stage,
    pub iterations: usize,
    pub env_steps: u64,
    pub log: Vec<LogRow>,
    pub switch_iteration: Option<usize>,
    /// Deterministic lap time at the moment of the stage switch.
    pub slow_lap_time: Option<f64>,
    /// Last completed deterministic lap time in the fast stage.
    pub fast_lap_time: Option<f64>,
    pub reached_target: bool,
}

/// Normalized thrust action that holds hover.
pub fn hover_action(params: &QuadParams) -> f64 {
    let hover = params.mass * params.gravity.norm();
    (hover - 4.0 * params.thrust_min) / (2.0 * (params.thrust_max - params.thrust_min)) - 1.0
}

/// Fresh network for `ppo`'s shape, seeded from `seed`. The thrust output
/// starts at hover.
pub fn initial_model(ppo: &PpoConfig, params: &QuadParams, seed: u64) -> ActorCritic<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT, 0));
    let mut m = ActorCritic::new(&NetShape::new(ppo.hidden_width), ppo.init_log_std, &mut rng);
    let a = hover_action(params).clamp(-0.99, 0.99);
    m.actor.layers.last_mut().unwrap().bias[0] = a.atanh() as f32;
    m
}

/// Runs training until the step budget is spent or the fast stage reaches
/// the success target. `on_iteration` sees every log row with the current
/// model; an error from it stops training.
#[allow(clippy::type_complexity)]
pub fn train(
    env: &Environment,
    cfg: &TrainConfig,
    ppo: &PpoConfig,
    seed: u64,
    start: Option<TrainStart>,
    on_iteration: &mut dyn FnMut(&LogRow, &ActorCritic<f32>, &TrainOutcome) -> io::Result<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    ppo.validate().map_err(TrainError::Config)?;
    let start = start.unwrap_or_else(|| TrainStart {
        model: initial_model(ppo, &env.params, seed),
        stage: cfg.start_stage,
        iteration: 0,
        env_steps: 0,
    });
    let mut out = TrainOutcome {
        model: start.model,
        stage: start.stage,
        iterations: start.iteration,
        env_steps: start.env_steps,
        log: Vec::new(),
        switch_iteration: None,
        slow_lap_time: None,
        fast_lap_time: None,
        reached_target: false,
    };
    let mut adam = Adam::new(&out.model);
    let mut slots: Vec<AgentSlot> = (0..cfg.n_agents)
        .map(|i| {
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_AGENT, i as u64));
            let mut s = AgentSlot::new(env, rng);
            reset_agent(&mut s, env, cfg.drag_randomization);
            s
        })
        .collect();
    let mut update_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_UPDATE, 0));
    let mut history: Vec<bool> = Vec::new();
    let mut fast_steps = 0u64;
    let per_iter = (cfg.n_agents * ppo.steps_per_iteration) as u64;

    while out.env_steps + per_iter <= cfg.max_env_steps {
        let (mut batch, rs) = collect_rollout(
            &mut slots,
            &out.model,
            env,
            out.stage,
            cfg,
            ppo.steps_per_iteration,
        );
        batch.compute_advantages(ppo.gamma, ppo.lambda);
        let stats: PpoStats = ppo_update(&mut out.model, &mut adam, &batch, ppo, &mut update_rng)
            .map_err(|source| TrainError::NonFinite {
            iteration: out.iterations,
            source,
        })?;
        out.env_steps += rs.steps;
        if out.stage == Stage::Fast {
            fast_steps += rs.steps;
        }
        out.iterations += 1;

        let mut row = LogRow {
            iteration: out.iterations,
            env_steps: out.env_steps,
            mean_reward: rs.reward_sum / rs.steps.max(1) as f64,
            success_pct: if rs.episodes > 0 {
                100.0 * rs.completions as f64 / rs.episodes as f64
            } else {
                0.0
            },
            mean_lap_time: (rs.lap_times > 0).then(|| rs.lap_time_sum / rs.lap_times as f64),
            best_lap_time: rs.best_lap_time,
            stage: out.stage,
            episodes: rs.episodes,
            collisions: rs.collisions,
            det_lap_time: None,
            det_completed: None,
            eval_success: None,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
        };

        let mut stop = false;
        if out.iterations.is_multiple_of(cfg.eval_interval) {
            let det = EvalOptions {
                runs: 1,
                drag_randomization: false,
                seed,
                max_steps: cfg.max_episode_steps,
                stage: out.stage,
                combo: 0,
                record_trajectories: false,
            };
            let (_, runs) = evaluate(&out.model, env, &det);
            let completed = runs[0].success;
            row.det_completed = Some(completed);
            row.det_lap_time = runs[0].lap_time;
            history.push(completed);
            if out.stage == Stage::Fast && completed {
                out.fast_lap_time = runs[0].lap_time;
            }
            if stage_switch_check(&history, cfg.switch_after, out.stage) {
                out.stage = Stage::Fast;
                out.switch_iteration = Some(out.iterations);
                out.slow_lap_time = runs[0].lap_time;
            } else if out.stage == Stage::Fast {
                if let Some(target) = cfg.target_success {
                    let ev = EvalOptions {
                        runs: cfg.eval_runs,
                        drag_randomization: cfg.drag_randomization,
                        seed: derive_seed(seed, STREAM_EVAL, out.iterations as u64),
                        ..det
                    };
                    let (st, _) = evaluate(&out.model, env, &ev);
                    row.eval_success = Some(st.success_rate);
                    if st.success_rate >= target && fast_steps >= cfg.min_fast_steps {
                        stop = true;
                        out.reached_target = true;
                    }
                }
            }
        }
        out.log.push(row.clone());
        on_iteration(&row, &out.model, &out)?;
        if stop {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::GuidingPath;
    use crate::planner::Track;
    use crate::world::{Aabb, Orientation};

    fn line_env(length: f64) -> Environment {
        let scenario = Scenario {
            start_position: Vector3::new(0.0, 0.0, 0.0),
            start_velocity: Vector3::zeros(),
            start_attitude: Orientation::default(),
            waypoints: vec![Waypoint::new(Vector3::new(length, 0.0, 0.0), 0.3)],
            end: None,
            obstacles: vec![],
            bounds: Aabb::new(
                Vector3::new(-3.0, -3.0, -3.0),
                Vector3::new(length + 3.0, 3.0, 3.0),
            ),
            d_c: 0.15,
        };
        let esdf = Esdf::build(&[], &scenario.bounds, 0.1).unwrap();
        let path = GuidingPath::new(vec![Vector3::zeros(), Vector3::new(length, 0.0, 0.0)])
            .unwrap()
            .resampled(0.5);
        let tracks = vec![Track::from_choice(&[vec![path]], &[0]).unwrap()];
        Environment::new(
            scenario,
            esdf,
            tracks,
            QuadParams::default(),
            RewardWeights::default(),
            CurriculumConfig::default(),
            0.02,
            8,
        )
        .unwrap()
    }

    fn slot(env: &Environment, seed: u64) -> AgentSlot {
        AgentSlot::new(env, ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn empty_cache_resets_to_start() {
        let env = line_env(5.0);
        let mut s = slot(&env, 1);
        s.episode.state.position = Vector3::new(2.0, 1.0, 0.0);
        reset_agent(&mut s, &env, true);
        assert_eq!(s.episode.state, env.start_state());
        assert_eq!(s.episode.waypoint, 0);
        assert!(s.episode.from_start);
        assert!(s.drag.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn valid_state_rules() {
        let env = line_env(5.0);
        let cur = CurriculumConfig::default();
        let mut s = slot(&env, 2);
        s.episode.state.velocity = Vector3::new(1.5, 0.0, 0.0);
        s.episode.state.position = Vector3::new(2.3, 0.1, 0.0);
        s.episode.proj = env.tracks[0].path.project(&s.episode.state.position);
        assert!(record_valid_state(&mut s, Stage::Slow, &cur, 1.0));
        assert_eq!(s.valid.populated(0), vec![2]);
        s.episode.state.velocity = Vector3::new(2.5, 0.0, 0.0);
        assert!(!record_valid_state(&mut s, Stage::Slow, &cur, 1.0));
        s.episode.state.velocity = Vector3::new(12.0, 0.0, 0.0);
        assert!(record_valid_state(&mut s, Stage::Fast, &cur, 1.0));
    }

    #[test]
    fn restored_state_sets_next_waypoint() {
        let env = line_env(5.0);
        let mut s = slot(&env, 3);
        s.episode.state.position = Vector3::new(3.2, 0.0, 0.0);
        s.episode.proj = env.tracks[0].path.project(&s.episode.state.position);
        record_valid_state(&mut s, Stage::Fast, &env.curriculum, 1.0);
        reset_agent(&mut s, &env, false);
        assert_eq!(s.episode.state.position, Vector3::new(3.2, 0.0, 0.0));
        assert_eq!(s.episode.waypoint, 0);
        assert!(!s.episode.from_start);
        assert_eq!(s.drag, env.params.drag);
    }

    #[test]
    fn missed_waypoint_stops_progress() {
        let scenario = Scenario {
            start_position: Vector3::zeros(),
            start_velocity: Vector3::zeros(),
            start_attitude: Orientation::default(),
            waypoints: vec![
                Waypoint::new(Vector3::new(2.0, 0.0, 0.0), 0.3),
                Waypoint::new(Vector3::new(4.0, 0.0, 0.0), 0.3),
            ],
            end: None,
            obstacles: vec![],
            bounds: Aabb::new(Vector3::new(-3.0, -3.0, -3.0), Vector3::new(7.0, 3.0, 3.0)),
            d_c: 0.15,
        };
        let esdf = Esdf::build(&[], &scenario.bounds, 0.1).unwrap();
        let leg = |a: f64, b: f64| {
            GuidingPath::new(vec![Vector3::new(a, 0.0, 0.0), Vector3::new(b, 0.0, 0.0)])
                .unwrap()
                .resampled(0.5)
        };
        let tracks =
            vec![Track::from_choice(&[vec![leg(0.0, 2.0)], vec![leg(2.0, 4.0)]], &[0, 0]).unwrap()];
        let env = Environment::new(
            scenario,
            esdf,
            tracks,
            QuadParams::default(),
            RewardWeights::default(),
            CurriculumConfig::default(),
            0.02,
            8,
        )
        .unwrap();
        // Fly beside the first gate, well outside its tolerance.
        let mut ep = env.start_episode(0);
        ep.state.position = Vector3::new(1.5, 1.0, 0.0);
        ep.state.velocity = Vector3::new(5.0, 0.0, 0.0);
        let hover = [-0.404, 0.0, 0.0, 0.0];
        for _ in 0..30 {
            env.step(&mut ep, &hover, &Vector3::zeros(), Stage::Fast, 100);
            assert_eq!(ep.waypoint, 0);
            assert!(ep.proj.arclength <= 2.0 + 1e-12, "{}", ep.proj.arclength);
        }
        assert!(ep.state.position.x > 3.0);
    }

    #[test]
    fn switch_rule() {
        assert!(stage_switch_check(
            &[false, true, true, true],
            3,
            Stage::Slow
        ));
        assert!(!stage_switch_check(&[false, true, true], 3, Stage::Slow));
        assert!(!stage_switch_check(&[true, false, true], 3, Stage::Slow));
        assert!(!stage_switch_check(&[true, true, true], 3, Stage::Fast));
    }

    #[test]
    fn completion_and_collision_end_episodes() {
        let env = line_env(1.0);
        // Start just behind the waypoint, moving through it.
        let mut ep = env.start_episode(0);
        ep.state.position = Vector3::new(0.9, 0.0, 0.0);
        ep.state.velocity = Vector3::new(10.0, 0.0, 0.0);
        ep.proj = env.tracks[0].path.project(&ep.state.position);
        let hover = [-0.404, 0.0, 0.0, 0.0];
        let out = env.step(&mut ep, &hover, &Vector3::zeros(), Stage::Fast, 100);
        assert_eq!(out.end, EpisodeEnd::Completed);
        assert!(out.terms.waypoint > 0.0);

        let mut ep = env.start_episode(0);
        ep.state.position = Vector3::new(0.5, 0.0, 2.9);
        ep.proj = env.tracks[0].path.project(&ep.state.position);
        let out = env.step(&mut ep, &hover, &Vector3::zeros(), Stage::Fast, 100);
        assert_eq!(out.end, EpisodeEnd::Collision);
        assert_eq!(out.terms.terminal, -10.0);
    }

    #[test]
    fn identical_seeds_give_identical_rollouts() {
        let env = line_env(5.0);
        let cfg = TrainConfig {
            n_agents: 3,
            ..Default::default()
        };
        let model = initial_model(&PpoConfig::default(), &env.params, 4);
        let mut a: Vec<_> = (0..3).map(|_| slot(&env, 9)).collect();
        let mut b = a.clone();
        let (ba, _) = collect_rollout(&mut a, &model, &env, Stage::Slow, &cfg, 20);
        let (bb, _) = collect_rollout(&mut b, &model, &env, Stage::Slow, &cfg, 20);
        assert_eq!(ba.rewards, bb.rewards);
        assert_eq!(ba.actions, bb.actions);
        // Same seed in every slot: per-step transitions agree across agents.
        for t in 0..20 {
            assert_eq!(ba.rewards[3 * t], ba.rewards[3 * t + 1]);
        }
    }

    #[test]
    fn zero_budget_returns_initial_model() {
        let env = line_env(5.0);
        let cfg = TrainConfig {
            n_agents: 2,
            max_env_steps: 0,
            ..Default::default()
        };
        let ppo = PpoConfig::default();
        let out = train(&env, &cfg, &ppo, 5, None, &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(out.model, initial_model(&ppo, &env.params, 5));
        assert_eq!(out.iterations, 0);
    }
}
