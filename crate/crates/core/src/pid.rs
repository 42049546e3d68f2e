//! Cascaded PD controller used to collect the identification dataset.
//!
//! Outer loop: position/velocity errors → desired planar acceleration.
//! Inner loop: desired pitch (from the acceleration direction) → rotor
//! thrust differential. The total thrust carries a hover feedforward, so at
//! zero tracking error the commanded action is exactly zero (both rotors at
//! the thrust midpoint, which Default `QuadParams` makes the hover point).
//!
//! This is deliberately a modest controller: it tracks the reference well
//! enough to sweep the error neighborhood the surrogate model needs, not
//! optimally.

use nalgebra::Vector2;

use crate::sim::{QuadParams, QuadState, ReferencePoint};

/// PD gains of both loops plus the tilt safety clamp.
#[derive(Debug, Clone, Copy)]
pub struct PidController {
    /// Position error → commanded acceleration (1/s²).
    pub kp_pos: f64,
    /// Velocity error → commanded acceleration (1/s).
    pub kd_pos: f64,
    /// Pitch error → commanded angular acceleration (1/s²).
    pub kp_att: f64,
    /// Pitch-rate error → commanded angular acceleration (1/s).
    pub kd_att: f64,
    /// Clamp on the commanded pitch (rad).
    pub max_tilt: f64,
}

impl Default for PidController {
    fn default() -> Self {
        Self {
            kp_pos: 8.0,
            kd_pos: 5.0,
            kp_att: 250.0,
            kd_att: 30.0,
            max_tilt: 0.6,
        }
    }
}

impl PidController {
    /// Normalized rotor actions in [−1, 1]² for the current state and
    /// reference point.
    pub fn action(
        &self,
        params: &QuadParams,
        state: &QuadState,
        reference: &ReferencePoint,
    ) -> Vector2<f64> {
        // Outer loop: PD on position with velocity feedforward folded into
        // the velocity error.
        let ax = self.kp_pos * (reference.x - state.x) + self.kd_pos * (reference.x_dot - state.x_dot);
        let az = self.kp_pos * (reference.z - state.z) + self.kd_pos * (reference.z_dot - state.z_dot);

        // Vertical channel: thrust must cancel gravity plus the commanded
        // climb acceleration, corrected for tilt (cosine kept away from 0).
        let vertical = params.gravity + az;
        let total_thrust = params.mass * vertical / state.theta.cos().max(0.5);
        let total_thrust = total_thrust.clamp(2.0 * params.thrust_min, 2.0 * params.thrust_max);

        // Inner loop: the acceleration direction fixes the desired pitch
        // (ẍ = T sinθ/m), tracked by a PD on the attitude.
        let theta_des = ax.atan2(vertical.max(1e-6)).clamp(-self.max_tilt, self.max_tilt);
        let ang_acc = self.kp_att * (theta_des - state.theta)
            + self.kd_att * (reference.theta_dot - state.theta_dot);
        // θ̈ = ℓ(T₂−T₁)/I ⇒ thrust differential d = θ̈·I/ℓ, split evenly.
        let diff = ang_acc * params.inertia_yy / params.arm_length;

        let t1 = (0.5 * total_thrust - 0.5 * diff).clamp(params.thrust_min, params.thrust_max);
        let t2 = (0.5 * total_thrust + 0.5 * diff).clamp(params.thrust_min, params.thrust_max);
        Vector2::new(params.action_from_thrust(t1), params.action_from_thrust(t2))
    }
}

// ---------------------------------------------------------------------------
