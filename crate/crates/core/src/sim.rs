//! Planar (X–Z) quadrotor simulator with reference trajectories.
//!
//! The vehicle is the standard planar quadrotor: two rotors on a rigid bar,
//! state `(x, ẋ, z, ż, θ, θ̇)`, controlled through per-rotor thrusts.
//! Normalized actions in `[-1, 1]²` map affinely onto the thrust range, with
//! the midpoint chosen so that the zero action hovers exactly.
//!
//! Everything here is purely functional and deterministic: `step` is a fixed
//! RK4 integration of one `dt`, references are closed-form periodic curves,
//! and `reset` draws its perturbation from a seeded generator.

use nalgebra::{Vector2, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Mid-height of every reference trajectory (m). The flight box spans
/// `z ∈ [0, 3]`, so curves are centered vertically.
pub const REF_CENTER_Z: f64 = 1.5;

/// Sharpness of the smoothed-square parameterization: larger values push the
/// curve closer to a true square while keeping it C^∞.
const SQUARE_SHARPNESS: f64 = 3.0;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Full simulator state of the planar quadrotor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    pub x: f64,
    pub x_dot: f64,
    pub z: f64,
    pub z_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl QuadState {
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.x,
            self.x_dot,
            self.z,
            self.z_dot,
            self.theta,
            self.theta_dot,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            x: v[0],
            x_dot: v[1],
            z: v[2],
            z_dot: v[3],
            theta: v[4],
            theta_dot: v[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Physical parameters of the vehicle and the integration step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuadParams {
    /// Vehicle mass (kg).
    pub mass: f64,
    /// Pitch-axis moment of inertia (kg·m²).
    pub inertia_yy: f64,
    /// Rotor arm length from the center of mass (m).
    pub arm_length: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
    /// Per-rotor thrust limits (N).
    pub thrust_min: f64,
    pub thrust_max: f64,
    /// Integration step (s).
    pub dt: f64,
}

impl Default for QuadParams {
    /// Small-quadrotor parameters with a thrust-to-weight ratio of 2, so the
    /// zero action (thrust midpoint on both rotors) hovers exactly.
    fn default() -> Self {
        let mass = 0.027;
        let gravity = 9.81;
        Self {
            mass,
            inertia_yy: 1.4e-5,
            arm_length: 0.0397,
            gravity,
            thrust_min: 0.0,
            thrust_max: mass * gravity,
            dt: 0.02,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.inertia_yy > 0.0 && self.arm_length > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidArgument(
                "mass, inertia, arm length and dt must all be positive".into(),
            ));
        }
        if !(self.thrust_min >= 0.0 && self.thrust_max > self.thrust_min) {
            return Err(Error::InvalidArgument(
                "thrust range must satisfy 0 <= thrust_min < thrust_max".into(),
            ));
        }
        Ok(())
    }

    /// Affine map from a normalized action component in [-1, 1] to a rotor
    /// thrust in [thrust_min, thrust_max]. Inputs are clipped first.
    pub fn thrust_from_action(&self, a: f64) -> f64 {
        let mid = 0.5 * (self.thrust_max + self.thrust_min);
        let half = 0.5 * (self.thrust_max - self.thrust_min);
        (mid + half * a.clamp(-1.0, 1.0)).clamp(self.thrust_min, self.thrust_max)
    }

    /// Inverse of [`Self::thrust_from_action`], clipped to [-1, 1]. Used by
    /// the PID controller to express thrust commands as normalized actions.
    pub fn action_from_thrust(&self, thrust: f64) -> f64 {
        let mid = 0.5 * (self.thrust_max + self.thrust_min);
        let half = 0.5 * (self.thrust_max - self.thrust_min);
        ((thrust - mid) / half).clamp(-1.0, 1.0)
    }
}

/// Named reference trajectory shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    #[serde(alias = "figure-8", alias = "figure_8")]
    Figure8,
    Circle,
    Square,
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "figure8" | "figure-8" | "figure_8" => Ok(Self::Figure8),
            "circle" => Ok(Self::Circle),
            "square" => Ok(Self::Square),
            other => Err(Error::UnknownTrajectory(other.to_string())),
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Figure8 => "figure8",
            Self::Circle => "circle",
            Self::Square => "square",
        };
        write!(f, "{name}")
    }
}

/// A point of the reference trajectory at some time `t`: the same six fields
/// as [`QuadState`]. Attitude references are identically zero — the tracker
/// is free to tilt however it needs to follow the translational reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub x: f64,
    pub x_dot: f64,
    pub z: f64,
    pub z_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl ReferencePoint {
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.x,
            self.x_dot,
            self.z,
            self.z_dot,
            self.theta,
            self.theta_dot,
        )
    }

    /// Interpret the reference point as a vehicle state (used at reset).
    pub fn as_state(&self) -> QuadState {
        QuadState {
            x: self.x,
            x_dot: self.x_dot,
            z: self.z,
            z_dot: self.z_dot,
            theta: self.theta,
            theta_dot: self.theta_dot,
        }
    }
}

/// Weights of the shaped tracking reward.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Position-error weight.
    pub w_p: f64,
    /// Control-cost weight.
    pub w_u: f64,
    /// Survival bonus per step.
    pub c_alive: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_p: 1.0,
            w_u: 1e-4,
            c_alive: 1.0,
        }
    }
}

/// Flight box and attitude limit that terminate an episode when violated.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Episode ends when |theta| exceeds this (rad).
    pub theta_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            x_min: -3.0,
            x_max: 3.0,
            z_min: 0.0,
            z_max: 3.0,
            theta_max: 1.2,
        }
    }
}

impl Bounds {
    pub fn contains(&self, s: &QuadState) -> bool {
        s.x >= self.x_min
            && s.x <= self.x_max
            && s.z >= self.z_min
            && s.z <= self.z_max
            && s.theta.abs() <= self.theta_max
    }
}

/// One environment step, the unit of both replay and identification data.
///
/// `done` flags *failure* terminations (leaving the flight box or exceeding
/// the attitude limit). Running out of episode steps is a truncation, not a
/// terminal state, and is handled by the episode loop so that bootstrapped
/// value targets stay unbiased.
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    pub state: QuadState,
    pub reference: ReferencePoint,
    pub next_reference: ReferencePoint,
    pub action: Vector2<f64>,
    pub reward: f64,
    pub next_state: QuadState,
    pub done: bool,
}

impl Transition {
    /// Tracking error `e_t = x_t − x_ref(t)`, the observation fed to policies
    /// and the state coordinate of the lifted surrogate.
    pub fn error(&self) -> Vector6<f64> {
        self.state.to_vector() - self.reference.to_vector()
    }

    /// Tracking error at the next step, `e_{t+1} = x_{t+1} − x_ref(t+1)`.
    pub fn next_error(&self) -> Vector6<f64> {
        self.next_state.to_vector() - self.next_reference.to_vector()
    }
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// Continuous-time dynamics with the thrusts held constant.
fn derivatives(s: &QuadState, t1: f64, t2: f64, p: &QuadParams) -> Vector6<f64> {
    let total = t1 + t2;
    let (sin_t, cos_t) = s.theta.sin_cos();
    Vector6::new(
        s.x_dot,
        total * sin_t / p.mass,
        s.z_dot,
        total * cos_t / p.mass - p.gravity,
        s.theta_dot,
        p.arm_length * (t2 - t1) / p.inertia_yy,
    )
}

/// Advance the state by one `dt` with classical RK4.
///
/// The normalized action is clipped to `[-1, 1]²` and mapped to per-rotor
/// thrusts, which are held constant (zero-order hold) over the step.
pub fn step(state: &QuadState, action: &Vector2<f64>, params: &QuadParams) -> Result<QuadState> {
    if !state.is_finite() {
        return Err(Error::NonFinite("simulator state".into()));
    }
    if !(action[0].is_finite() && action[1].is_finite()) {
        return Err(Error::NonFinite("action".into()));
    }
    let t1 = params.thrust_from_action(action[0]);
    let t2 = params.thrust_from_action(action[1]);

    let h = params.dt;
    let y0 = state.to_vector();
    let k1 = derivatives(state, t1, t2, params);
    let k2 = derivatives(&QuadState::from_vector(&(y0 + 0.5 * h * k1)), t1, t2, params);
    let k3 = derivatives(&QuadState::from_vector(&(y0 + 0.5 * h * k2)), t1, t2, params);
    let k4 = derivatives(&QuadState::from_vector(&(y0 + h * k3)), t1, t2, params);
    let y1 = y0 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    Ok(QuadState::from_vector(&y1))
}

// ---------------------------------------------------------------------------
// Reference trajectories
// ---------------------------------------------------------------------------

/// Evaluate the named reference trajectory at time `t`.
///
/// All three curves are closed, periodic in `period` seconds, centered at
/// `(0, REF_CENTER_Z)` and have analytic velocities:
///
/// * `circle` — radius `scale`, starting at `(scale, z_c)` and moving upward;
/// * `figure8` — Gerono lemniscate, `x = scale·sin ωt`, `z = z_c + (scale/2)·sin 2ωt`;
/// * `square` — a C^∞ "rounded square" built from saturated sines, so corner
///   velocities stay bounded.
pub fn reference(kind: TrajectoryKind, t: f64, scale: f64, period: f64) -> ReferencePoint {
    let omega = std::f64::consts::TAU / period;
    let (x, x_dot, z, z_dot) = match kind {
        TrajectoryKind::Circle => {
            let (s, c) = (omega * t).sin_cos();
            (
                scale * c,
                -scale * omega * s,
                REF_CENTER_Z + scale * s,
                scale * omega * c,
            )
        }
        TrajectoryKind::Figure8 => {
            let (s, c) = (omega * t).sin_cos();
            let (s2, c2) = (2.0 * omega * t).sin_cos();
            (
                scale * s,
                scale * omega * c,
                REF_CENTER_Z + 0.5 * scale * s2,
                scale * omega * c2,
            )
        }
        TrajectoryKind::Square => {
            let k = SQUARE_SHARPNESS;
            let norm = k.tanh();
            let (s, c) = (omega * t).sin_cos();
            // x follows a saturated sine, z a saturated cosine; sech² terms
            // are the exact chain-rule derivatives.
            let sech2 = |y: f64| {
                let c = y.cosh();
                1.0 / (c * c)
            };
            (
                scale * (k * s).tanh() / norm,
                scale * k * omega * c * sech2(k * s) / norm,
                REF_CENTER_Z + scale * (k * c).tanh() / norm,
                -scale * k * omega * s * sech2(k * c) / norm,
            )
        }
    };
    ReferencePoint {
        x,
        x_dot,
        z,
        z_dot,
        theta: 0.0,
        theta_dot: 0.0,
    }
}

// ---------------------------------------------------------------------------
// Reward, termination, reset
// ---------------------------------------------------------------------------

/// Shaped tracking reward `r = −w_p‖e_p‖² − w_u‖u‖² + c_alive`.
pub fn reward(
    state: &QuadState,
    reference: &ReferencePoint,
    action: &Vector2<f64>,
    cfg: &RewardConfig,
) -> f64 {
    let ex = state.x - reference.x;
    let ez = state.z - reference.z;
    let pos_sq = ex * ex + ez * ez;
    let act_sq = action[0] * action[0] + action[1] * action[1];
    -cfg.w_p * pos_sq - cfg.w_u * act_sq + cfg.c_alive
}

/// Episode-termination predicate: out of the flight box, attitude limit
/// exceeded, or step budget exhausted.
pub fn is_terminal(state: &QuadState, t_step: usize, bounds: &Bounds, max_steps: usize) -> bool {
    !bounds.contains(state) || t_step >= max_steps
}

/// Draw an initial state near the given reference point.
///
/// Positions and velocities are perturbed by `noise_scale`-sized Gaussians;
/// attitude fields use a quarter of that scale so the vehicle starts well
/// inside its attitude limit. `noise_scale = 0` returns the reference
/// exactly, and equal seeds give equal states.
pub fn reset(r0: &ReferencePoint, seed: u64, noise_scale: f64) -> QuadState {
    let mut state = r0.as_state();
    if noise_scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> f64 {
            let n: f64 = rng.sample(StandardNormal);
            n
        };
        state.x += noise_scale * draw();
        state.x_dot += noise_scale * draw();
        state.z += noise_scale * draw();
        state.z_dot += noise_scale * draw();
        state.theta += 0.25 * noise_scale * draw();
        state.theta_dot += 0.25 * noise_scale * draw();
    }
    state
}

// ---------------------------------------------------------------------------
// Episode wrapper
// ---------------------------------------------------------------------------

/// Everything that defines a tracking task: vehicle, trajectory, reward,
/// flight box and episode length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub params: QuadParams,
    pub kind: TrajectoryKind,
    /// Trajectory size (m).
    pub scale: f64,
    /// Trajectory period (s).
    pub period: f64,
    pub reward: RewardConfig,
    pub bounds: Bounds,
    /// Episode length in steps.
    pub max_steps: usize,
    /// Std-dev of the reset perturbation.
    pub init_noise_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            params: QuadParams::default(),
            kind: TrajectoryKind::Figure8,
            scale: 0.8,
            period: 8.0,
            reward: RewardConfig::default(),
            bounds: Bounds::default(),
            max_steps: 600,
            init_noise_scale: 0.05,
        }
    }
}

/// Stateful episode wrapper over the pure simulator functions.
#[derive(Debug, Clone)]
pub struct TrackingEnv {
    pub cfg: EnvConfig,
    state: QuadState,
    t_step: usize,
    finished: bool,
}

impl TrackingEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.params.validate()?;
        if cfg.period <= 0.0 || cfg.scale <= 0.0 || cfg.max_steps == 0 {
            return Err(Error::InvalidArgument(
                "trajectory scale, period and episode length must be positive".into(),
            ));
        }
        let state = reference(cfg.kind, 0.0, cfg.scale, cfg.period).as_state();
        Ok(Self {
            cfg,
            state,
            t_step: 0,
            finished: false,
        })
    }

    /// Start a fresh episode; equal seeds reproduce equal initial states.
    pub fn reset(&mut self, seed: u64) -> QuadState {
        let r0 = self.reference_at(0);
        self.state = reset(&r0, seed, self.cfg.init_noise_scale);
        self.t_step = 0;
        self.finished = false;
        self.state
    }

    pub fn state(&self) -> &QuadState {
        &self.state
    }

    pub fn t_step(&self) -> usize {
        self.t_step
    }

    pub fn time(&self) -> f64 {
        self.t_step as f64 * self.cfg.params.dt
    }

    fn reference_at(&self, t_step: usize) -> ReferencePoint {
        reference(
            self.cfg.kind,
            t_step as f64 * self.cfg.params.dt,
            self.cfg.scale,
            self.cfg.period,
        )
    }

    /// Reference at the current step.
    pub fn current_reference(&self) -> ReferencePoint {
        self.reference_at(self.t_step)
    }

    /// Tracking error of the current state, the policy observation.
    pub fn error_obs(&self) -> Vector6<f64> {
        self.state.to_vector() - self.current_reference().to_vector()
    }

    /// True once the episode has failed or run out of steps; `step` must not
    /// be called again until `reset`.
    pub fn needs_reset(&self) -> bool {
        self.finished
    }

    /// Apply one action. The reward is evaluated at the pre-step state and
    /// reference, matching `r(x_t, u_t)`.
    pub fn step(&mut self, action: &Vector2<f64>) -> Result<Transition> {
        if self.finished {
            return Err(Error::InvalidArgument(
                "step called on a finished episode; call reset first".into(),
            ));
        }
        let r_t = self.reference_at(self.t_step);
        let r_next = self.reference_at(self.t_step + 1);
        let clipped = Vector2::new(action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0));
        let next_state = step(&self.state, &clipped, &self.cfg.params)?;
        let rew = reward(&self.state, &r_t, &clipped, &self.cfg.reward);
        let failed = !self.cfg.bounds.contains(&next_state);

        let transition = Transition {
            state: self.state,
            reference: r_t,
            next_reference: r_next,
            action: clipped,
            reward: rew,
            next_state,
            done: failed,
        };

        self.state = next_state;
        self.t_step += 1;
        self.finished = failed || self.t_step >= self.cfg.max_steps;
        Ok(transition)
    }
}

// ---------------------------------------------------------------------------
