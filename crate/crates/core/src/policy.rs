//! Observation and action encoding, the actor-critic networks, and the
//! PPO-clip update.
//!
//! Both networks are plain tanh MLPs with hand-written backpropagation. They
//! are generic over the float type so that the production `f32` networks and
//! the `f64` networks used for gradient checking share one implementation.

use std::io::{self, BufRead, Write};

use nalgebra::Vector3;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{BodyRateCommand, QuadParams, QuadState};
use crate::world::Waypoint;

pub const OBS_DIM: usize = 30;
pub const ACT_DIM: usize = 4;
/// Positions are divided by this, m.
pub const POSITION_SCALE: f64 = 10.0;
/// Velocities are divided by this, m/s.
pub const VELOCITY_SCALE: f64 = 20.0;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn cast<T: NdFloat>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite observation input: {0}")]
pub struct ObservationError(pub &'static str);

/// `[p, R(q) row-major, v, W corners, gamma - p]`, scaled.
pub fn build_observation(
    state: &QuadState,
    waypoint: &Waypoint,
    gamma: &Vector3<f64>,
) -> Result<[f64; OBS_DIM], ObservationError> {
    if !state.is_finite() {
        return Err(ObservationError("state"));
    }
    if !gamma.iter().all(|x| x.is_finite()) {
        return Err(ObservationError("gamma"));
    }
    let corners = waypoint.corners();
    if !corners.iter().flat_map(|c| c.iter()).all(|x| x.is_finite()) {
        return Err(ObservationError("waypoint"));
    }
    let mut o = [0.0; OBS_DIM];
    let p = state.position;
    for i in 0..3 {
        o[i] = p[i] / POSITION_SCALE;
    }
    let r = state.attitude.to_rotation_matrix();
    for i in 0..3 {
        for j in 0..3 {
            o[3 + 3 * i + j] = r[(i, j)];
        }
    }
    for i in 0..3 {
        o[12 + i] = state.velocity[i] / VELOCITY_SCALE;
    }
    for (c, corner) in corners.iter().enumerate() {
        for i in 0..3 {
            o[15 + 3 * c + i] = corner[i] / POSITION_SCALE;
        }
    }
    for i in 0..3 {
        o[27 + i] = (gamma[i] - p[i]) / POSITION_SCALE;
    }
    Ok(o)
}

/// Maps a normalized action in `[-1, 1]^4` onto the command box.
pub fn action_decode(a: &[f64; ACT_DIM], params: &QuadParams) -> BodyRateCommand {
    let a = a.map(|x| x.clamp(-1.0, 1.0));
    let f_min = 4.0 * params.thrust_min;
    let f_span = 4.0 * (params.thrust_max - params.thrust_min);
    BodyRateCommand {
        collective_thrust: f_min + (a[0] + 1.0) / 2.0 * f_span,
        body_rates: Vector3::new(a[1], a[2], a[3]) * params.max_body_rate,
    }
}

/// Fully connected layer computing `x W + b` on row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `inputs x outputs`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Tanh MLP. The output layer is linear unless `output_tanh` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub output_tanh: bool,
}

impl<T: NdFloat> Mlp<T> {
    /// Normal init scaled by `1/sqrt(fan_in)`; the last layer is further
    /// scaled by `out_gain`. Biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        output_tanh: bool,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let gain = if l + 1 == n { out_gain } else { 1.0 };
                let std = gain / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    cast(rng.sample::<f64, _>(StandardNormal) * std)
                });
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self {
            layers,
            output_tanh,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|d| Dense {
                    weight: Array2::zeros(d.weight.raw_dim()),
                    bias: Array1::zeros(d.bias.raw_dim()),
                })
                .collect(),
            output_tanh: self.output_tanh,
        }
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weight.nrows()];
        s.extend(self.layers.iter().map(|d| d.weight.ncols()));
        s
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.forward_cached(x).pop().unwrap()
    }

    /// Input followed by every layer's post-activation output.
    pub fn forward_cached(&self, x: ArrayView2<T>) -> Vec<Array2<T>> {
        let mut acts = vec![x.to_owned()];
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.weight);
            z += &layer.bias;
            if l + 1 < n || self.output_tanh {
                z.mapv_inplace(|v| v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Accumulates parameter gradients into `grad` given `d_out`, the loss
    /// gradient with respect to the network output.
    pub fn backward(&self, acts: &[Array2<T>], d_out: Array2<T>, grad: &mut Mlp<T>) {
        let n = self.layers.len();
        let one = T::one();
        let mut dz = d_out;
        if self.output_tanh {
            dz.zip_mut_with(&acts[n], |d, &y| *d *= one - y * y);
        }
        for l in (0..n).rev() {
            let g = &mut grad.layers[l];
            general_mat_mul(one, &acts[l].t(), &dz, one, &mut g.weight);
            g.bias += &dz.sum_axis(Axis(0));
            if l > 0 {
                let mut da = dz.dot(&self.layers[l].weight.t());
                da.zip_mut_with(&acts[l], |d, &y| *d *= one - y * y);
                dz = da;
            }
        }
    }

    fn tensors(&self) -> Vec<&[T]> {
        let mut v = Vec::with_capacity(self.layers.len() * 2);
        for d in &self.layers {
            v.push(d.weight.as_slice().expect("standard layout"));
            v.push(d.bias.as_slice().expect("standard layout"));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = Vec::with_capacity(self.layers.len() * 2);
        for d in &mut self.layers {
            v.push(d.weight.as_slice_mut().expect("standard layout"));
            v.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        v
    }
}

/// Layer widths of an actor-critic pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub obs: usize,
    pub hidden: Vec<usize>,
    pub act: usize,
}

impl NetShape {
    pub fn new(hidden_width: usize) -> Self {
        Self {
            obs: OBS_DIM,
            hidden: vec![hidden_width, hidden_width],
            act: ACT_DIM,
        }
    }

    fn sizes(&self, out: usize) -> Vec<usize> {
        let mut s = vec![self.obs];
        s.extend(&self.hidden);
        s.push(out);
        s
    }
}

/// Gaussian policy with tanh-bounded mean and a state-independent log-std,
/// plus a separate value network.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic<T> {
    pub actor: Mlp<T>,
    pub log_std: Array1<T>,
    pub critic: Mlp<T>,
}

/// Single-observation network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub value: T,
}

impl<T: NdFloat> ActorCritic<T> {
    pub fn new<R: Rng + ?Sized>(shape: &NetShape, init_log_std: f64, rng: &mut R) -> Self {
        Self {
            actor: Mlp::new(&shape.sizes(shape.act), true, 0.01, rng),
            log_std: Array1::from_elem(
                shape.act,
                cast(init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)),
            ),
            critic: Mlp::new(&shape.sizes(1), false, 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            actor: self.actor.zeros_like(),
            log_std: Array1::zeros(self.log_std.raw_dim()),
            critic: self.critic.zeros_like(),
        }
    }

    pub fn shape(&self) -> NetShape {
        let s = self.actor.sizes();
        NetShape {
            obs: s[0],
            hidden: s[1..s.len() - 1].to_vec(),
            act: *s.last().unwrap(),
        }
    }

    /// Batched action means and values.
    pub fn forward(&self, obs: ArrayView2<T>) -> (Array2<T>, Array1<T>) {
        let mean = self.actor.forward(obs);
        let value = self.critic.forward(obs).index_axis_move(Axis(1), 0);
        (mean, value)
    }

    pub fn output(&self, obs: &[T]) -> PolicyOutput<T> {
        let x = ArrayView2::from_shape((1, obs.len()), obs).expect("observation row");
        let (mean, value) = self.forward(x);
        PolicyOutput {
            mean: mean.row(0).to_vec(),
            std: self.log_std.iter().map(|l| l.exp()).collect(),
            value: value[0],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Every parameter tensor in checkpoint order: actor layers, log-std,
    /// critic layers; each layer as weight then bias.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.actor.tensors();
        v.push(self.log_std.as_slice().expect("standard layout"));
        v.extend(self.critic.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.actor.tensors_mut();
        v.push(self.log_std.as_slice_mut().expect("standard layout"));
        v.extend(self.critic.tensors_mut());
        v
    }

    pub fn clamp_log_std(&mut self) {
        let (lo, hi) = (cast::<T>(LOG_STD_MIN), cast::<T>(LOG_STD_MAX));
        self.log_std.mapv_inplace(|x| x.max(lo).min(hi));
    }

    /// Same network in another float type.
    pub fn cast<U: NdFloat>(&self) -> ActorCritic<U> {
        let conv = |x: &T| -> U { U::from(*x).expect("finite parameter") };
        let mlp = |m: &Mlp<T>| Mlp {
            layers: m
                .layers
                .iter()
                .map(|d| Dense {
                    weight: d.weight.map(conv),
                    bias: d.bias.map(conv),
                })
                .collect(),
            output_tanh: m.output_tanh,
        };
        ActorCritic {
            actor: mlp(&self.actor),
            log_std: self.log_std.map(conv),
            critic: mlp(&self.critic),
        }
    }
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob<T: NdFloat>(action: &[T], mean: &[T], log_std: &[T]) -> T {
    let half = cast::<T>(0.5);
    let c = cast::<T>(HALF_LN_2PI);
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .fold(T::zero(), |acc, ((&u, &m), &ls)| {
            let z = (u - m) / ls.exp();
            acc - half * z * z - ls - c
        })
}

/// Entropy of a diagonal Gaussian.
pub fn gaussian_entropy<T: NdFloat>(log_std: &[T]) -> T {
    let c = cast::<T>(0.5 + HALF_LN_2PI);
    log_std.iter().fold(T::zero(), |acc, &ls| acc + ls + c)
}

/// Raw Gaussian sample around `mean`. The environment clamps it; the raw
/// value is what the log-probability refers to.
pub fn sample_action<T: NdFloat, R: Rng + ?Sized>(
    mean: &[T],
    log_std: &[T],
    rng: &mut R,
) -> Vec<T> {
    mean.iter()
        .zip(log_std)
        .map(|(&m, &ls)| m + ls.exp() * cast::<T>(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Clip ratio epsilon.
    pub clip: f64,
    /// Discount.
    pub gamma: f64,
    /// GAE lambda.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub steps_per_iteration: usize,
    /// Global gradient-norm clip; zero or negative disables it.
    pub max_grad_norm: f64,
    pub hidden_width: usize,
    pub init_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            learning_rate: 3e-4,
            epochs: 10,
            minibatch_size: 2048,
            entropy_coef: 0.0,
            value_coef: 0.5,
            steps_per_iteration: 250,
            max_grad_norm: 0.5,
            hidden_width: 128,
            init_log_std: -1.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(format!("ppo.clip must be in (0, 1), got {}", self.clip));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("ppo.gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("ppo.lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) {
            return Err("ppo.learning_rate must be positive".into());
        }
        if self.minibatch_size == 0 || self.steps_per_iteration == 0 || self.hidden_width == 0 {
            return Err(
                "ppo.minibatch_size, ppo.steps_per_iteration and ppo.hidden_width must be positive"
                    .into(),
            );
        }
        Ok(())
    }
}

/// How a transition ends its agent's trajectory segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepEnd {
    Continue,
    /// Collision or numerical failure: no bootstrap.
    Terminal,
    /// Step cap or end of the rollout window: bootstrap with the value of
    /// the next state.
    Truncated {
        bootstrap: f64,
    },
}

/// Backward GAE recursion over one agent's consecutive transitions. The
/// last transition must not be `Continue`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    ends: &[StepEnd],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && ends.len() == n);
    assert!(
        n == 0 || ends[n - 1] != StepEnd::Continue,
        "trajectory must end with a terminal or truncated step"
    );
    let mut adv = vec![0.0; n];
    for t in (0..n).rev() {
        adv[t] = match ends[t] {
            StepEnd::Terminal => rewards[t] - values[t],
            StepEnd::Truncated { bootstrap } => rewards[t] + gamma * bootstrap - values[t],
            StepEnd::Continue => {
                rewards[t] + gamma * values[t + 1] - values[t] + gamma * lambda * adv[t + 1]
            }
        };
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Transitions from all agents, in collection order.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub obs: Vec<f32>,
    /// Raw (unclamped) sampled actions.
    pub actions: Vec<f32>,
    pub log_probs: Vec<f32>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub ends: Vec<StepEnd>,
    pub agents: Vec<usize>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        obs: &[f32],
        action: &[f32],
        log_prob: f32,
        reward: f64,
        value: f64,
        end: StepEnd,
        agent: usize,
    ) {
        debug_assert_eq!(obs.len(), OBS_DIM);
        debug_assert_eq!(action.len(), ACT_DIM);
        self.obs.extend_from_slice(obs);
        self.actions.extend_from_slice(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.ends.push(end);
        self.agents.push(agent);
    }

    /// Runs GAE separately over each agent's transitions.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        let n = self.len();
        let n_agents = self.agents.iter().copied().max().map_or(0, |m| m + 1);
        let mut per_agent: Vec<Vec<usize>> = vec![Vec::new(); n_agents];
        for (i, &a) in self.agents.iter().enumerate() {
            per_agent[a].push(i);
        }
        self.advantages = vec![0.0; n];
        self.returns = vec![0.0; n];
        for idx in per_agent {
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
            let e: Vec<StepEnd> = idx.iter().map(|&i| self.ends[i]).collect();
            let (adv, ret) = gae_advantages(&r, &v, &e, gamma, lambda);
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = adv[k];
                self.returns[i] = ret[k];
            }
        }
    }
}

/// Training rows for one loss evaluation.
#[derive(Debug, Clone)]
pub struct Minibatch<T> {
    pub obs: Array2<T>,
    pub actions: Array2<T>,
    pub old_log_probs: Array1<T>,
    pub advantages: Array1<T>,
    pub returns: Array1<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossStats {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// PPO-clip loss `policy + c_v * value - c_e * entropy` and its exact
/// gradient, accumulated into `grad`.
pub fn loss_and_grad<T: NdFloat>(
    model: &ActorCritic<T>,
    mb: &Minibatch<T>,
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
    grad: &mut ActorCritic<T>,
) -> LossStats {
    let n = mb.obs.nrows();
    let nf = cast::<T>(n as f64);
    let one = T::one();
    let eps = cast::<T>(clip);
    let cv = cast::<T>(value_coef);
    let ce = cast::<T>(entropy_coef);

    let actor_acts = model.actor.forward_cached(mb.obs.view());
    let mean = actor_acts.last().unwrap();
    let critic_acts = model.critic.forward_cached(mb.obs.view());
    let value = critic_acts.last().unwrap().column(0).to_owned();

    let log_std = model.log_std.as_slice().unwrap();
    let inv_var: Vec<T> = log_std.iter().map(|&l| (-(l + l)).exp()).collect();

    let mut policy_loss = T::zero();
    let mut kl = T::zero();
    let mut clipped = 0usize;
    let mut d_mean = Array2::<T>::zeros(mean.raw_dim());
    let mut d_log_std = vec![-ce; log_std.len()];
    for i in 0..n {
        let u = mb.actions.row(i);
        let mu = mean.row(i);
        let logp = gaussian_log_prob(u.as_slice().unwrap(), mu.as_slice().unwrap(), log_std);
        let log_ratio = logp - mb.old_log_probs[i];
        let ratio = log_ratio.exp();
        let a = mb.advantages[i];
        let surr1 = ratio * a;
        let surr2 = ratio.max(one - eps).min(one + eps) * a;
        policy_loss -= surr1.min(surr2);
        kl = kl + (ratio - one) - log_ratio;
        if (ratio - one).abs() > eps {
            clipped += 1;
        }
        if surr1 <= surr2 {
            // d loss / d logp for this row.
            let g = -surr1 / nf;
            for j in 0..mu.len() {
                let diff = u[j] - mu[j];
                d_mean[(i, j)] = g * diff * inv_var[j];
                d_log_std[j] += g * (diff * diff * inv_var[j] - one);
            }
        }
    }
    policy_loss /= nf;

    let mut value_loss = T::zero();
    let mut d_value = Array2::<T>::zeros((n, 1));
    for i in 0..n {
        let e = value[i] - mb.returns[i];
        value_loss += e * e;
        d_value[(i, 0)] = cv * cast::<T>(2.0) * e / nf;
    }
    value_loss /= nf;
    let entropy = gaussian_entropy(log_std);

    model.actor.backward(&actor_acts, d_mean, &mut grad.actor);
    model
        .critic
        .backward(&critic_acts, d_value, &mut grad.critic);
    for (g, d) in grad.log_std.iter_mut().zip(d_log_std) {
        *g += d;
    }

    let to = |x: T| x.to_f64().unwrap_or(f64::NAN);
    let total = policy_loss + cv * value_loss - ce * entropy;
    LossStats {
        total: to(total),
        policy_loss: to(policy_loss),
        value_loss: to(value_loss),
        entropy: to(entropy),
        approx_kl: to(kl) / n as f64,
        clip_fraction: clipped as f64 / n as f64,
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    m: ActorCritic<T>,
    v: ActorCritic<T>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: NdFloat> Adam<T> {
    pub fn new(model: &ActorCritic<T>) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, model: &mut ActorCritic<T>, grad: &ActorCritic<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (cast::<T>(self.beta1), cast::<T>(self.beta2));
        let one = T::one();
        let c1 = one - b1.powi(self.t);
        let c2 = one - b2.powi(self.t);
        let lr = cast::<T>(lr);
        let eps = cast::<T>(self.eps);
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in model.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scales `grad` so its global L2 norm is at most `max_norm`. Returns the
/// norm before scaling.
pub fn clip_grad_norm<T: NdFloat>(grad: &mut ActorCritic<T>, max_norm: f64) -> f64 {
    let norm = grad
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = cast::<T>(max_norm / norm);
        for t in grad.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Averages over all minibatches of the update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PpoError {
    #[error(
        "non-finite loss in epoch {epoch}, minibatch {minibatch}: policy {policy_loss}, value {value_loss}, grad norm {grad_norm}"
    )]
    NonFinite {
        epoch: usize,
        minibatch: usize,
        policy_loss: f64,
        value_loss: f64,
        grad_norm: f64,
    },
    #[error("rollout batch is empty or has no computed advantages")]
    EmptyBatch,
}

/// Several epochs of minibatch PPO over `batch`. Advantages are normalized
/// over the whole batch first. On a non-finite loss the model and optimizer
/// are left as they were before the call.
pub fn ppo_update<R: Rng + ?Sized>(
    model: &mut ActorCritic<f32>,
    adam: &mut Adam<f32>,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats, PpoError> {
    let n = batch.len();
    if n == 0 || batch.advantages.len() != n {
        return Err(PpoError::EmptyBatch);
    }
    let mean = batch.advantages.iter().sum::<f64>() / n as f64;
    let var = batch
        .advantages
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt() + 1e-8;

    let obs = Array2::from_shape_vec((n, OBS_DIM), batch.obs.clone()).expect("obs rows");
    let actions = Array2::from_shape_vec((n, ACT_DIM), batch.actions.clone()).expect("action rows");
    let old_lp = Array1::from_vec(batch.log_probs.clone());
    let adv = Array1::from_iter(batch.advantages.iter().map(|a| ((a - mean) / std) as f32));
    let ret = Array1::from_iter(batch.returns.iter().map(|&r| r as f32));

    let model_backup = model.clone();
    let adam_backup = adam.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    let mut grad = model.zeros_like();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (k, idx) in order.chunks(cfg.minibatch_size.max(1)).enumerate() {
            let mb = Minibatch {
                obs: obs.select(Axis(0), idx),
                actions: actions.select(Axis(0), idx),
                old_log_probs: old_lp.select(Axis(0), idx),
                advantages: adv.select(Axis(0), idx),
                returns: ret.select(Axis(0), idx),
            };
            for t in grad.tensors_mut() {
                t.fill(0.0);
            }
            let ls = loss_and_grad(
                model,
                &mb,
                cfg.clip,
                cfg.value_coef,
                cfg.entropy_coef,
                &mut grad,
            );
            let gn = clip_grad_norm(&mut grad, cfg.max_grad_norm);
            if !ls.total.is_finite() || !gn.is_finite() {
                *model = model_backup;
                *adam = adam_backup;
                return Err(PpoError::NonFinite {
                    epoch,
                    minibatch: k,
                    policy_loss: ls.policy_loss,
                    value_loss: ls.value_loss,
                    grad_norm: gn,
                });
            }
            adam.step(model, &grad, cfg.learning_rate);
            model.clamp_log_std();
            stats.policy_loss += ls.policy_loss;
            stats.value_loss += ls.value_loss;
            stats.entropy += ls.entropy;
            stats.approx_kl += ls.approx_kl;
            stats.clip_fraction += ls.clip_fraction;
            stats.grad_norm += gn;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let m = stats.minibatches as f64;
        stats.policy_loss /= m;
        stats.value_loss /= m;
        stats.entropy /= m;
        stats.approx_kl /= m;
        stats.clip_fraction /= m;
        stats.grad_norm /= m;
    }
    Ok(stats)
}

const CHECKPOINT_MAGIC: &str = "AMTP1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a policy checkpoint or unsupported version (header {0:?})")]
    Version(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch { expected: NetShape, found: NetShape },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes `AMTP1`, a text header, then every tensor as little-endian f32 in
/// [`ActorCritic::tensors`] order.
pub fn save_checkpoint<W: Write>(model: &ActorCritic<f32>, mut w: W) -> io::Result<()> {
    let shape = model.shape();
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(w, "obs {}", shape.obs)?;
    let hidden: Vec<String> = shape.hidden.iter().map(|h| h.to_string()).collect();
    writeln!(w, "hidden {}", hidden.join(" "))?;
    writeln!(w, "act {}", shape.act)?;
    writeln!(w, "log_std {}", model.log_std.len())?;
    writeln!(w, "params {}", model.num_params())?;
    writeln!(w, "data f32le")?;
    for t in model.tensors() {
        for x in t {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint. With `expected` set, a differently shaped network is
/// rejected.
pub fn load_checkpoint<R: BufRead>(
    mut r: R,
    expected: Option<&NetShape>,
) -> Result<ActorCritic<f32>, CheckpointError> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String, CheckpointError> {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    let magic = next_line(&mut r)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Version(magic));
    }
    let field = |l: String, key: &str| -> Result<Vec<usize>, CheckpointError> {
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return Err(CheckpointError::Corrupt(format!(
                "expected `{key}` line, got {l:?}"
            )));
        }
        it.map(|t| {
            t.parse::<usize>()
                .map_err(|_| CheckpointError::Corrupt(format!("bad number in {l:?}")))
        })
        .collect()
    };
    let obs = field(next_line(&mut r)?, "obs")?;
    let hidden = field(next_line(&mut r)?, "hidden")?;
    let act = field(next_line(&mut r)?, "act")?;
    let log_std = field(next_line(&mut r)?, "log_std")?;
    let params = field(next_line(&mut r)?, "params")?;
    if next_line(&mut r)? != "data f32le" {
        return Err(CheckpointError::Corrupt("missing data marker".into()));
    }
    if obs.len() != 1
        || act.len() != 1
        || log_std.len() != 1
        || params.len() != 1
        || hidden.is_empty()
    {
        return Err(CheckpointError::Corrupt("malformed header".into()));
    }
    let shape = NetShape {
        obs: obs[0],
        hidden,
        act: act[0],
    };
    if log_std[0] != shape.act {
        return Err(CheckpointError::Corrupt(
            "log-std count differs from action size".into(),
        ));
    }
    if let Some(exp) = expected {
        if *exp != shape {
            return Err(CheckpointError::ShapeMismatch {
                expected: exp.clone(),
                found: shape,
            });
        }
    }
    if shape.obs == 0 || shape.act == 0 || shape.hidden.iter().any(|&h| h == 0 || h > 1 << 16) {
        return Err(CheckpointError::Corrupt("zero or oversized layer".into()));
    }
    let mut model = ActorCritic::<f32> {
        actor: Mlp {
            layers: Vec::new(),
            output_tanh: true,
        },
        log_std: Array1::zeros(shape.act),
        critic: Mlp {
            layers: Vec::new(),
            output_tanh: false,
        },
    };
    for (mlp, out) in [(&mut model.actor, shape.act), (&mut model.critic, 1)] {
        let sizes = shape.sizes(out);
        mlp.layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
    }
    if model.num_params() != params[0] {
        return Err(CheckpointError::Corrupt(format!(
            "header declares {} parameters, shape implies {}",
            params[0],
            model.num_params()
        )));
    }
    let mut buf = [0u8; 4];
    for t in model.tensors_mut() {
        for x in t.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => {
                    CheckpointError::Corrupt("truncated weights".into())
                }
                _ => CheckpointError::Io(e),
            })?;
            *x = f32::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(CheckpointError::Corrupt(
            "trailing bytes after weights".into(),
        ));
    }
    if !model.is_finite() {
        return Err(CheckpointError::Corrupt("non-finite weights".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn observation_layout() {
        let p = QuadParams::default();
        let s = QuadState::hover(Vector3::new(1.0, 2.0, 3.0), &p);
        let wp = Waypoint::new(Vector3::new(5.0, 0.0, 1.0), 0.3);
        let gamma = Vector3::new(2.0, 2.0, 3.0);
        let o = build_observation(&s, &wp, &gamma).unwrap();
        assert_eq!(o.len(), 3 + 9 + 3 + 12 + 3);
        assert_eq!(&o[3..12], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_relative_eq!(o[27], 0.1);

        let d = Vector3::new(-3.0, 4.0, 0.5);
        let mut s2 = s;
        s2.position += d;
        let wp2 = Waypoint::new(wp.center + d, 0.3);
        let o2 = build_observation(&s2, &wp2, &(gamma + d)).unwrap();
        for i in 0..3 {
            assert_relative_eq!(o2[i] - o[i], d[i] / 10.0, epsilon = 1e-12);
            assert_relative_eq!(o2[27 + i], o[27 + i], epsilon = 1e-12);
        }
        for c in 0..4 {
            for i in 0..3 {
                assert_relative_eq!(
                    o2[15 + 3 * c + i] - o[15 + 3 * c + i],
                    d[i] / 10.0,
                    epsilon = 1e-12
                );
            }
        }
        let mut bad = s;
        bad.velocity.x = f64::NAN;
        assert!(build_observation(&bad, &wp, &gamma).is_err());
    }

    #[test]
    fn rotation_block_is_row_major() {
        let p = QuadParams::default();
        let mut s = QuadState::hover(Vector3::zeros(), &p);
        s.attitude = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let o =
            build_observation(&s, &Waypoint::new(Vector3::x(), 0.3), &Vector3::zeros()).unwrap();
        let r = s.attitude.to_rotation_matrix();
        assert_eq!(o[3 + 1], r[(0, 1)]);
        assert_eq!(o[3 + 3], r[(1, 0)]);
    }

    #[test]
    fn action_decode_examples() {
        let p = QuadParams::default();
        let c = action_decode(&[-1.0, 0.0, 0.0, 0.0], &p);
        assert_eq!(c.collective_thrust, 0.0);
        assert_eq!(c.body_rates, Vector3::zeros());
        assert_eq!(
            action_decode(&[1.0, 0.0, 0.0, 0.0], &p).collective_thrust,
            28.0
        );
        assert_eq!(
            action_decode(&[0.0, 1.0, 0.0, 0.0], &p).body_rates,
            Vector3::new(15.0, 0.0, 0.0)
        );
        assert_eq!(
            action_decode(&[3.0, -7.0, 0.0, 0.0], &p),
            action_decode(&[1.0, -1.0, 0.0, 0.0], &p)
        );
    }

    fn small_net(seed: u64) -> ActorCritic<f64> {
        let shape = NetShape {
            obs: OBS_DIM,
            hidden: vec![8, 8],
            act: ACT_DIM,
        };
        let mut net = ActorCritic::<f64>::new(&shape, -0.3, &mut rng(seed));
        // Non-trivial biases and output scale so every path is exercised.
        let mut r = rng(seed + 1);
        for t in net.tensors_mut() {
            for x in t.iter_mut() {
                *x += 0.3 * r.sample::<f64, _>(StandardNormal);
            }
        }
        net
    }

    fn oracle_forward(net: &ActorCritic<f64>, x: &[f64]) -> (Vec<f64>, f64) {
        let run = |mlp: &Mlp<f64>| {
            let mut a = x.to_vec();
            for (l, d) in mlp.layers.iter().enumerate() {
                let mut z = vec![0.0; d.weight.ncols()];
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = d.bias[j];
                    for (i, ai) in a.iter().enumerate() {
                        *zj += ai * d.weight[(i, j)];
                    }
                }
                if l + 1 < mlp.layers.len() || mlp.output_tanh {
                    z.iter_mut().for_each(|v| *v = v.tanh());
                }
                a = z;
            }
            a
        };
        (run(&net.actor), run(&net.critic)[0])
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let net = small_net(3);
        let mut r = rng(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..OBS_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
            let out = net.output(&x);
            let (m, v) = oracle_forward(&net, &x);
            for (a, b) in out.mean.iter().zip(&m) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!((out.value - v).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = small_net(1).zeros_like();
        let out = net.output(&[0.5; OBS_DIM]);
        assert_eq!(out.mean, vec![0.0; ACT_DIM]);
        assert_eq!(out.value, 0.0);
        assert_eq!(out.std, vec![1.0; ACT_DIM]);
    }

    #[test]
    fn value_head_is_linear() {
        let mut net = small_net(4);
        let x = [0.2; OBS_DIM];
        let v0 = net.output(&x).value;
        let last = net.critic.layers.last_mut().unwrap();
        last.weight *= 3.0;
        last.bias *= 3.0;
        assert_relative_eq!(net.output(&x).value, 3.0 * v0, epsilon = 1e-12);
    }

    #[test]
    fn log_prob_matches_closed_form() {
        let lp = gaussian_log_prob(&[0.5], &[0.0], &[0.0f64]);
        assert_relative_eq!(
            lp,
            -0.125 - 0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn gae_base_cases() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let v = [0.5, -0.2, 0.3, 0.1];
        let ends = [
            StepEnd::Continue,
            StepEnd::Continue,
            StepEnd::Continue,
            StepEnd::Truncated { bootstrap: 0.7 },
        ];
        let (adv, _) = gae_advantages(&r, &v, &ends, 0.9, 0.0);
        for t in 0..3 {
            assert_relative_eq!(adv[t], r[t] + 0.9 * v[t + 1] - v[t], epsilon = 1e-15);
        }
        assert_relative_eq!(adv[3], 4.0 + 0.9 * 0.7 - 0.1, epsilon = 1e-15);

        let ends = [
            StepEnd::Continue,
            StepEnd::Continue,
            StepEnd::Continue,
            StepEnd::Terminal,
        ];
        let (adv, ret) = gae_advantages(&r, &[0.0; 4], &ends, 1.0, 1.0);
        assert_eq!(adv, vec![10.0, 9.0, 7.0, 4.0]);
        assert_eq!(ret, adv);
    }

    #[test]
    fn batch_gae_is_per_agent() {
        let mut b = RolloutBatch::default();
        let o = [0.0f32; OBS_DIM];
        let a = [0.0f32; ACT_DIM];
        b.push(&o, &a, 0.0, 1.0, 0.0, StepEnd::Continue, 0);
        b.push(&o, &a, 0.0, 5.0, 0.0, StepEnd::Terminal, 1);
        b.push(&o, &a, 0.0, 2.0, 0.0, StepEnd::Terminal, 0);
        b.compute_advantages(1.0, 1.0);
        assert_eq!(b.advantages, vec![3.0, 5.0, 2.0]);
    }

    fn random_minibatch(net: &ActorCritic<f64>, n: usize, seed: u64) -> Minibatch<f64> {
        let mut r = rng(seed);
        let obs = Array2::from_shape_simple_fn((n, OBS_DIM), || r.random_range(-1.0..1.0));
        let (mean, _) = net.forward(obs.view());
        let ls = net.log_std.to_vec();
        let mut actions = Array2::zeros((n, ACT_DIM));
        let mut old = Array1::zeros(n);
        for i in 0..n {
            let u = sample_action(mean.row(i).as_slice().unwrap(), &ls, &mut r);
            // Old policy slightly different so ratios are not all one.
            old[i] = gaussian_log_prob(&u, mean.row(i).as_slice().unwrap(), &ls)
                + r.random_range(-0.3..0.3);
            actions.row_mut(i).assign(&Array1::from_vec(u));
        }
        Minibatch {
            obs,
            actions,
            old_log_probs: old,
            advantages: Array1::from_shape_simple_fn(n, || r.random_range(-2.0..2.0)),
            returns: Array1::from_shape_simple_fn(n, || r.random_range(-2.0..2.0)),
        }
    }

    #[test]
    fn zero_advantages_leave_actor_gradient_zero() {
        let net = small_net(5);
        let mut mb = random_minibatch(&net, 16, 6);
        mb.advantages.fill(0.0);
        let mut g = net.zeros_like();
        loss_and_grad(&net, &mb, 0.2, 0.5, 0.0, &mut g);
        assert!(g
            .actor
            .tensors()
            .iter()
            .all(|t| t.iter().all(|&x| x == 0.0)));
        assert!(g.log_std.iter().all(|&x| x == 0.0));
        assert!(g
            .critic
            .tensors()
            .iter()
            .any(|t| t.iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let net = ActorCritic::<f32>::new(&NetShape::new(16), -0.5, &mut rng(2));
        let mut buf = Vec::new();
        save_checkpoint(&net, &mut buf).unwrap();
        let back = load_checkpoint(&buf[..], Some(&NetShape::new(16))).unwrap();
        for (a, b) in net.tensors().iter().zip(back.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(matches!(
            load_checkpoint(&buf[..buf.len() - 3], None),
            Err(CheckpointError::Corrupt(_))
        ));
        assert!(matches!(
            load_checkpoint(&buf[..], Some(&NetShape::new(8))),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
        let mut wrong = buf.clone();
        wrong[4] = b'9';
        assert!(matches!(
            load_checkpoint(&wrong[..], None),
            Err(CheckpointError::Version(_))
        ));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut net = small_net(8);
        let before = net.clone();
        let mut g = net.zeros_like();
        g.log_std.fill(1.0);
        let mut adam = Adam::new(&net);
        adam.step(&mut net, &g, 0.01);
        for j in 0..ACT_DIM {
            assert_relative_eq!(net.log_std[j], before.log_std[j] - 0.01, epsilon = 1e-9);
        }
        assert_eq!(net.actor, before.actor);
    }

    #[test]
    fn grad_clipping_caps_norm() {
        let mut g = small_net(1).zeros_like();
        g.log_std.fill(3.0);
        let n = clip_grad_norm(&mut g, 0.5);
        assert_relative_eq!(n, 6.0);
        assert_relative_eq!(g.log_std[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = small_net(11);
        let mb = random_minibatch(&net, 32, 12);
        let (clip, cv, ce) = (0.2, 0.5, 0.01);
        let mut g = net.zeros_like();
        loss_and_grad(&net, &mb, clip, cv, ce, &mut g);
        let analytic: Vec<f64> = g.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut k = 0;
        let mut probe = net.clone();
        let n_tensors = probe.tensors().len();
        for ti in 0..n_tensors {
            let len = probe.tensors()[ti].len();
            for i in 0..len {
                let x0 = probe.tensors()[ti][i];
                probe.tensors_mut()[ti][i] = x0 + h;
                let up = loss_and_grad(&probe, &mb, clip, cv, ce, &mut net.zeros_like()).total;
                probe.tensors_mut()[ti][i] = x0 - h;
                let down = loss_and_grad(&probe, &mb, clip, cv, ce, &mut net.zeros_like()).total;
                probe.tensors_mut()[ti][i] = x0;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                k += 1;
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
