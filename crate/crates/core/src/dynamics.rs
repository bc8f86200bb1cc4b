//! Quadrotor rigid-body model.
//!
//! State is `[p, q, v, w, Omega]`: world position, world-from-body attitude,
//! world velocity, body rates and the four rotor speeds. Rotor thrust is
//! `c_f * Omega^2`, rotors follow a first-order lag towards their commanded
//! speed, and a linear drag acts on the body-frame velocity. The whole state,
//! rotor speeds included, is advanced by one RK4 integrator.
//!
//! Rotor layout (body x forward, y left, z up), matching the mixing below:
//!
//! ```text
//!   tau_x = l/sqrt(2) * ( f1 - f2 - f3 + f4)
//!   tau_y = l/sqrt(2) * (-f1 - f2 + f3 + f4)
//!   tau_z = kappa     * ( f1 - f2 + f3 - f4)
//! ```

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// Relative slack when checking thrusts against the motor limits.
const THRUST_RANGE_SLACK: f64 = 1e-9;

/// Sign pattern of each rotor in the roll, pitch and yaw rows of the mixer.
const ROLL_SIGNS: [f64; 4] = [1.0, -1.0, -1.0, 1.0];
const PITCH_SIGNS: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];
const YAW_SIGNS: [f64; 4] = [1.0, -1.0, 1.0, -1.0];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("rotor speed must be non-negative, got {0} rad/s")]
    NegativeRotorSpeed(f64),
    #[error("thrust must be non-negative, got {0} N")]
    NegativeThrust(f64),
    #[error("motor {motor} thrust {thrust} N outside [{min}, {max}] N")]
    ThrustOutOfRange {
        motor: usize,
        thrust: f64,
        min: f64,
        max: f64,
    },
    #[error("time step must be positive, got {0} s")]
    NonPositiveStep(f64),
    #[error("invalid quadrotor parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
}

/// Physical parameters of the vehicle and its low-level rate loop.
///
/// Defaults are the identified race quadrotor: 0.85 kg, 0.15 m arms,
/// 0..7 N per motor, 15 rad/s body-rate limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the inertia matrix, kg m^2.
    pub inertia: Vector3<f64>,
    /// m
    pub arm_length: f64,
    /// Rotor drag torque per unit thrust.
    pub kappa: f64,
    /// `c_f`, N s^2 / rad^2.
    pub thrust_coeff: f64,
    /// Per-motor thrust bounds, N.
    pub thrust_min: f64,
    pub thrust_max: f64,
    /// First-order rotor time constant, s.
    pub motor_time_constant: f64,
    /// Linear body-frame drag coefficients, N s / m.
    pub drag: Vector3<f64>,
    /// rad/s
    pub max_body_rate: f64,
    /// m/s^2, world frame.
    pub gravity: Vector3<f64>,
    /// Proportional gains of the body-rate loop, 1/s.
    pub rate_gain: Vector3<f64>,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.85,
            inertia: Vector3::new(1.0e-3, 1.0e-3, 1.7e-3),
            arm_length: 0.15,
            kappa: 0.05,
            thrust_coeff: 1.563e-6,
            thrust_min: 0.0,
            thrust_max: 7.0,
            motor_time_constant: 0.033,
            drag: Vector3::new(0.26, 0.28, 0.42),
            max_body_rate: 15.0,
            gravity: Vector3::new(0.0, 0.0, -9.81),
            rate_gain: Vector3::new(20.0, 20.0, 8.0),
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        fn bad(field: &'static str, reason: impl Into<String>) -> Result<(), DynamicsError> {
            Err(DynamicsError::InvalidParam {
                field,
                reason: reason.into(),
            })
        }
        if !(self.mass > 0.0) || !self.mass.is_finite() {
            return bad("mass", format!("must be positive, got {}", self.mass));
        }
        if self.inertia.iter().any(|j| !(*j > 0.0) || !j.is_finite()) {
            return bad("inertia", "all components must be positive");
        }
        if !(self.arm_length > 0.0) {
            return bad("arm_length", "must be positive");
        }
        if !(self.kappa > 0.0) {
            return bad("kappa", "must be positive");
        }
        if !(self.thrust_coeff > 0.0) {
            return bad("thrust_coeff", "must be positive");
        }
        if !(self.thrust_min >= 0.0) {
            return bad("thrust_min", "must be non-negative");
        }
        if !(self.thrust_min < self.thrust_max) {
            return bad(
                "thrust_max",
                format!(
                    "must exceed thrust_min ({} >= {})",
                    self.thrust_min, self.thrust_max
                ),
            );
        }
        if !(self.motor_time_constant > 0.0) {
            return bad("motor_time_constant", "must be positive");
        }
        if self.drag.iter().any(|k| !(*k >= 0.0)) {
            return bad("drag", "coefficients must be non-negative");
        }
        if !(self.max_body_rate > 0.0) {
            return bad("max_body_rate", "must be positive");
        }
        if self.rate_gain.iter().any(|k| !(*k > 0.0)) {
            return bad("rate_gain", "gains must be positive");
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return bad("gravity", "must be finite");
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia)
    }

    /// Per-motor thrust that balances gravity.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity.norm() / 4.0
    }

    pub fn hover_rotor_speed(&self) -> f64 {
        (self.hover_thrust() / self.thrust_coeff).sqrt()
    }

    fn mixer_arm(&self) -> f64 {
        self.arm_length / std::f64::consts::SQRT_2
    }
}

/// Full simulation state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub position: Vector3<f64>,
    /// World-from-body rotation.
    pub attitude: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
    /// Body-frame angular velocity, rad/s.
    pub body_rates: Vector3<f64>,
    /// rad/s
    pub rotor_speeds: Vector4<f64>,
}

impl QuadState {
    /// Level, motionless, rotors spinning at hover speed.
    pub fn hover(position: Vector3<f64>, params: &QuadParams) -> Self {
        Self {
            position,
            attitude: UnitQuaternion::identity(),
            velocity: Vector3::zeros(),
            body_rates: Vector3::zeros(),
            rotor_speeds: Vector4::repeat(params.hover_rotor_speed()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|x| x.is_finite())
            && self.attitude.coords.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.body_rates.iter().all(|x| x.is_finite())
            && self.rotor_speeds.iter().all(|x| x.is_finite())
    }

    /// Per-motor thrusts produced by the current rotor speeds.
    pub fn motor_thrusts(&self, params: &QuadParams) -> Vector4<f64> {
        self.rotor_speeds
            .map(|w| params.thrust_coeff * w.max(0.0) * w.max(0.0))
    }
}

/// Collective thrust along body z and commanded body rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyRateCommand {
    /// N
    pub collective_thrust: f64,
    /// rad/s
    pub body_rates: Vector3<f64>,
}

impl BodyRateCommand {
    /// Clamp into the box reachable by the motors and the rate limit.
    pub fn clamped(&self, params: &QuadParams) -> Self {
        let w = params.max_body_rate;
        Self {
            collective_thrust: self
                .collective_thrust
                .clamp(4.0 * params.thrust_min, 4.0 * params.thrust_max),
            body_rates: self.body_rates.map(|r| r.clamp(-w, w)),
        }
    }
}

/// Commanded rotor speeds, rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorCommand {
    pub rotor_speeds: Vector4<f64>,
}

impl MotorCommand {
    /// Command that holds every motor at the given thrust.
    pub fn uniform_thrust(thrust: f64, params: &QuadParams) -> Result<Self, DynamicsError> {
        let w = motor_speed_for_thrust(thrust, params)?;
        Ok(Self {
            rotor_speeds: Vector4::repeat(w),
        })
    }

    pub fn from_thrusts(
        thrusts: &Vector4<f64>,
        params: &QuadParams,
    ) -> Result<Self, DynamicsError> {
        let mut rotor_speeds = Vector4::zeros();
        for i in 0..4 {
            rotor_speeds[i] = motor_speed_for_thrust(thrusts[i], params)?;
        }
        Ok(Self { rotor_speeds })
    }
}

/// `c_f * omega^2`.
pub fn motor_thrust(omega: f64, params: &QuadParams) -> Result<f64, DynamicsError> {
    if omega < 0.0 || omega.is_nan() {
        return Err(DynamicsError::NegativeRotorSpeed(omega));
    }
    Ok(params.thrust_coeff * omega * omega)
}

/// Inverse of [`motor_thrust`].
pub fn motor_speed_for_thrust(thrust: f64, params: &QuadParams) -> Result<f64, DynamicsError> {
    if thrust < 0.0 || thrust.is_nan() {
        return Err(DynamicsError::NegativeThrust(thrust));
    }
    Ok((thrust / params.thrust_coeff).sqrt())
}

fn mix(f: &Vector4<f64>, params: &QuadParams) -> (Vector3<f64>, Vector3<f64>) {
    let a = params.mixer_arm();
    let mut tau = Vector3::zeros();
    for i in 0..4 {
        tau.x += a * ROLL_SIGNS[i] * f[i];
        tau.y += a * PITCH_SIGNS[i] * f[i];
        tau.z += params.kappa * YAW_SIGNS[i] * f[i];
    }
    (Vector3::new(0.0, 0.0, f.sum()), tau)
}

/// Body force and torque for the four motor thrusts.
///
/// Thrusts outside `[thrust_min, thrust_max]` are rejected; clamping is the
/// job of the allocator in [`low_level_control`].
pub fn thrust_torque(
    f: &Vector4<f64>,
    params: &QuadParams,
) -> Result<(Vector3<f64>, Vector3<f64>), DynamicsError> {
    check_thrust_range(f, params)?;
    Ok(mix(f, params))
}

fn check_thrust_range(f: &Vector4<f64>, params: &QuadParams) -> Result<(), DynamicsError> {
    let slack = THRUST_RANGE_SLACK * params.thrust_max.abs().max(1.0);
    for (motor, &thrust) in f.iter().enumerate() {
        if !(thrust >= params.thrust_min - slack && thrust <= params.thrust_max + slack) {
            return Err(DynamicsError::ThrustOutOfRange {
                motor,
                thrust,
                min: params.thrust_min,
                max: params.thrust_max,
            });
        }
    }
    Ok(())
}

/// Per-motor thrusts realising a collective thrust and body torque, before
/// any clamping. Exact inverse of the mixing matrix.
pub fn allocate(collective: f64, torque: &Vector3<f64>, params: &QuadParams) -> Vector4<f64> {
    let a = params.mixer_arm();
    let (tx, ty, tz) = (torque.x / a, torque.y / a, torque.z / params.kappa);
    Vector4::from_fn(|i, _| {
        0.25 * (collective + ROLL_SIGNS[i] * tx + PITCH_SIGNS[i] * ty + YAW_SIGNS[i] * tz)
    })
}

/// Linear drag on the body-frame velocity.
pub fn drag_force(v_body: &Vector3<f64>, drag: &Vector3<f64>) -> Vector3<f64> {
    -v_body.component_mul(drag)
}

/// Time derivative of a [`QuadState`]. The rotor-speed entry is left at zero;
/// the motor lag is integrated by [`step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub position: Vector3<f64>,
    pub attitude: Quaternion<f64>,
    pub velocity: Vector3<f64>,
    pub body_rates: Vector3<f64>,
    pub rotor_speeds: Vector4<f64>,
}

pub fn state_derivative(
    state: &QuadState,
    motor_thrusts: &Vector4<f64>,
    params: &QuadParams,
) -> StateDerivative {
    rigid_body_derivative(
        &state.attitude,
        &state.velocity,
        &state.body_rates,
        motor_thrusts,
        params,
        &params.drag,
    )
}

fn rigid_body_derivative(
    q: &UnitQuaternion<f64>,
    v: &Vector3<f64>,
    w: &Vector3<f64>,
    thrusts: &Vector4<f64>,
    params: &QuadParams,
    drag: &Vector3<f64>,
) -> StateDerivative {
    let (f_t, tau) = mix(thrusts, params);
    let v_body = q.inverse_transform_vector(v);
    let f_d = drag_force(&v_body, drag);
    let accel = q.transform_vector(&(f_t + f_d)) / params.mass + params.gravity;

    let omega_quat = Quaternion::new(0.0, w.x, w.y, w.z);
    let q_dot = q.quaternion() * omega_quat * 0.5;

    let j = params.inertia;
    let jw = j.component_mul(w);
    let w_dot = (tau - w.cross(&jw)).component_div(&j);

    StateDerivative {
        position: *v,
        attitude: q_dot,
        velocity: accel,
        body_rates: w_dot,
        rotor_speeds: Vector4::zeros(),
    }
}

/// State with an unnormalised quaternion, used inside the RK4 stages.
#[derive(Clone, Copy)]
struct Stage {
    p: Vector3<f64>,
    q: Quaternion<f64>,
    v: Vector3<f64>,
    w: Vector3<f64>,
    omega: Vector4<f64>,
}

impl Stage {
    fn offset(&self, d: &StateDerivative, h: f64) -> Self {
        Self {
            p: self.p + d.position * h,
            q: self.q + d.attitude * h,
            v: self.v + d.velocity * h,
            w: self.w + d.body_rates * h,
            omega: self.omega + d.rotor_speeds * h,
        }
    }

    fn derivative(
        &self,
        omega_cmd: &Vector4<f64>,
        params: &QuadParams,
        drag: &Vector3<f64>,
    ) -> StateDerivative {
        let thrusts = self
            .omega
            .map(|w| params.thrust_coeff * w.max(0.0) * w.max(0.0));
        let rotation = UnitQuaternion::from_quaternion(self.q);
        let mut d = rigid_body_derivative(&rotation, &self.v, &self.w, &thrusts, params, drag);
        // q_dot uses the raw stage quaternion.
        d.attitude = self.q * Quaternion::new(0.0, self.w.x, self.w.y, self.w.z) * 0.5;
        d.rotor_speeds = (omega_cmd - self.omega) / params.motor_time_constant;
        d
    }
}

/// Advance the state by `dt` with classical RK4 using the nominal drag.
pub fn step(
    state: &QuadState,
    cmd: &MotorCommand,
    dt: f64,
    params: &QuadParams,
) -> Result<QuadState, DynamicsError> {
    step_with_drag(state, cmd, dt, params, &params.drag)
}

/// As [`step`], with per-agent drag coefficients.
pub fn step_with_drag(
    state: &QuadState,
    cmd: &MotorCommand,
    dt: f64,
    params: &QuadParams,
    drag: &Vector3<f64>,
) -> Result<QuadState, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::NonPositiveStep(dt));
    }
    for &w in cmd.rotor_speeds.iter() {
        if w < 0.0 || w.is_nan() {
            return Err(DynamicsError::NegativeRotorSpeed(w));
        }
    }
    let commanded = cmd.rotor_speeds.map(|w| params.thrust_coeff * w * w);
    check_thrust_range(&commanded, params)?;

    let omega_cmd = cmd.rotor_speeds;
    let x0 = Stage {
        p: state.position,
        q: *state.attitude.quaternion(),
        v: state.velocity,
        w: state.body_rates,
        omega: state.rotor_speeds,
    };
    let k1 = x0.derivative(&omega_cmd, params, drag);
    let k2 = x0
        .offset(&k1, dt / 2.0)
        .derivative(&omega_cmd, params, drag);
    let k3 = x0
        .offset(&k2, dt / 2.0)
        .derivative(&omega_cmd, params, drag);
    let k4 = x0.offset(&k3, dt).derivative(&omega_cmd, params, drag);

    let h = dt / 6.0;
    let q = x0.q + (k1.attitude + k2.attitude * 2.0 + k3.attitude * 2.0 + k4.attitude) * h;
    Ok(QuadState {
        position: x0.p + (k1.position + 2.0 * k2.position + 2.0 * k3.position + k4.position) * h,
        attitude: UnitQuaternion::from_quaternion(q),
        velocity: x0.v + (k1.velocity + 2.0 * k2.velocity + 2.0 * k3.velocity + k4.velocity) * h,
        body_rates: x0.w
            + (k1.body_rates + 2.0 * k2.body_rates + 2.0 * k3.body_rates + k4.body_rates) * h,
        rotor_speeds: (x0.omega
            + (k1.rotor_speeds + 2.0 * k2.rotor_speeds + 2.0 * k3.rotor_speeds + k4.rotor_speeds)
                * h)
            .map(|w| w.max(0.0)),
    })
}

/// Result of the low-level rate controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateControlOutput {
    pub command: MotorCommand,
    /// Clamped per-motor thrusts behind `command`, N.
    pub thrusts: Vector4<f64>,
    /// Desired body torque before allocation, N m.
    pub torque: Vector3<f64>,
    /// True when at least one motor hit a thrust limit.
    pub saturated: bool,
}

/// Body-rate tracking: `tau = J K (w_cmd - w) + w x J w`, then allocation
/// through the inverse mixer with per-motor clamping.
pub fn low_level_control(
    state: &QuadState,
    cmd: &BodyRateCommand,
    params: &QuadParams,
) -> RateControlOutput {
    let cmd = cmd.clamped(params);
    let w = state.body_rates;
    let j = params.inertia;
    let rate_error = cmd.body_rates - w;
    let torque = j.component_mul(&params.rate_gain.component_mul(&rate_error))
        + w.cross(&j.component_mul(&w));

    let raw = allocate(cmd.collective_thrust, &torque, params);
    let mut saturated = false;
    let thrusts = raw.map(|f| {
        let c = f.clamp(params.thrust_min, params.thrust_max);
        if c != f {
            saturated = true;
        }
        c
    });
    let rotor_speeds = thrusts.map(|f| (f / params.thrust_coeff).sqrt());
    RateControlOutput {
        command: MotorCommand { rotor_speeds },
        thrusts,
        torque,
        saturated,
    }
}
