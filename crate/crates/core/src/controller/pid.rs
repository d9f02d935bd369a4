use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, ModelParams, VehicleState};
use crate::trajectory::Trajectory;
use crate::wrap_angle;

/// Gains of the PID baseline. All zero yields `m = 0, d = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidGains {
    /// Scale of the steady-state feedforward on both channels.
    pub k_ff: f64,
    pub kp_v: f64,
    pub ki_v: f64,
    /// Along-track position gain [1/s].
    pub kp_s: f64,
    /// Anti-windup limit on the speed integral [m].
    pub integral_limit: f64,
    pub k_heading: f64,
    /// Cross-track gain [1/m].
    pub k_ct: f64,
    /// Cross-track rate gain [s/m].
    pub kd_ct: f64,
    /// Reference is sampled this many ticks ahead to offset actuation delay.
    pub preview_steps: usize,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            k_ff: 1.0,
            kp_v: 1.0,
            ki_v: 2.0,
            kp_s: 2.0,
            integral_limit: 1.0,
            k_heading: 1.2,
            k_ct: 4.0,
            kd_ct: 0.4,
            preview_steps: 5,
        }
    }
}

impl PidGains {
    pub fn zero() -> Self {
        Self {
            k_ff: 0.0,
            kp_v: 0.0,
            ki_v: 0.0,
            kp_s: 0.0,
            integral_limit: 0.0,
            k_heading: 0.0,
            k_ct: 0.0,
            kd_ct: 0.0,
            preview_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub speed_integral: f64,
    pub prev_cross_track: Option<f64>,
}

/// One PID tick at time `t`.
///
/// Speed: PI on the reference speed error plus an along-track position
/// term, with the result converted to a
/// motor command by the inverse steady-state motor law. Steering: curvature
/// feedforward plus heading error, cross-track error and its rate.
/// Positive cross-track error means the reference lies to the left.
#[allow(clippy::too_many_arguments)]
pub fn pid_step(
    est: &VehicleState,
    t: f64,
    traj: &Trajectory,
    p: &ModelParams,
    gains: &PidGains,
    state: &mut PidState,
    dt: f64,
    voltage: f64,
) -> ControlInput {
    let [p1, p2, p3, p4, _, _, _, _, p9, p10] = p.0;
    let t_ref = t + gains.preview_steps as f64 * dt;
    let (Ok(r), Ok(ahead)) = (traj.interpolate(t_ref), traj.interpolate(t_ref + dt)) else {
        return ControlInput::new(0.0, 0.0, voltage);
    };
    let speed = r.speed();
    let kappa = match (r.course(), ahead.course()) {
        (Some(c0), Some(c1)) => wrap_angle(c1 - c0) / (speed * dt),
        _ => 0.0,
    };
    let curv_gain = if p1 != 0.0 { p4 / p1 } else { 0.0 };
    let d_ff = if curv_gain != 0.0 {
        kappa / curv_gain - p9
    } else {
        -p9
    };
    let a = d_ff + p9;
    let v_ref = speed / (p1 * (1.0 + p2 * a * a)).max(1e-6);

    // along-track error against the undelayed reference
    let e_s = match (traj.interpolate(t), r.course()) {
        (Ok(now), Some(c)) => c.cos() * (now.x - est.x) + c.sin() * (now.y - est.y),
        _ => 0.0,
    };
    // the integral acts on the combined error so a position offset cannot
    // persist once the speed matches
    let e_v = v_ref - est.v + gains.kp_s * e_s;
    state.speed_integral =
        (state.speed_integral + e_v * dt).clamp(-gains.integral_limit, gains.integral_limit);
    let speed_cmd = gains.k_ff * v_ref + gains.kp_v * e_v + gains.ki_v * state.speed_integral;
    let m = p.steady_state_motor(speed_cmd, voltage);

    let psi_ref = r.course().map(|c| c - p10 - p3 * a).unwrap_or(est.psi);
    let e_h = wrap_angle(psi_ref - est.psi);
    let (s, c) = psi_ref.sin_cos();
    let e_ct = -s * (r.x - est.x) + c * (r.y - est.y);
    let de_ct = state
        .prev_cross_track
        .map_or(0.0, |prev| (e_ct - prev) / dt);
    state.prev_cross_track = Some(e_ct);
    let d = gains.k_ff * d_ff + gains.k_heading * e_h + gains.k_ct * e_ct + gains.kd_ct * de_ct;
    ControlInput::new(m, d, voltage).clamped()
}
