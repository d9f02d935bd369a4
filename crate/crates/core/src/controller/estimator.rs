use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, ModelParams, VehicleState};
use crate::wrap_angle;

/// Delayed absolute pose from the indoor positioning system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpsFix {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    /// Tick at which the pose was observed.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Fraction of the IPS innovation applied at the fix's tick. 1 replaces
    /// the historical pose outright.
    pub blend_gain: f64,
    /// Ticks of history kept for replay.
    pub history_len: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            blend_gain: 0.3,
            history_len: 50,
        }
    }
}

/// One tick of estimator history.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Record {
    step: u64,
    state: VehicleState,
    /// Gyro reading taken at this tick, covering the interval that ended here.
    yaw_rate: Option<f64>,
    /// Command acting on the motor during this tick.
    input: ControlInput,
}

/// Dead-reckoned state with replay history.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub state: VehicleState,
    pub step: u64,
    /// Ticks since the pose of the most recent IPS fix was observed.
    pub ips_age: u64,
    history: VecDeque<Record>,
}

impl StateEstimate {
    pub fn new(state: VehicleState, step: u64) -> Self {
        let mut history = VecDeque::new();
        history.push_back(Record {
            step,
            state,
            yaw_rate: None,
            input: ControlInput::default(),
        });
        Self {
            state,
            step,
            ips_age: 0,
            history,
        }
    }

    pub fn time(&self, dt: f64) -> f64 {
        self.step as f64 * dt
    }

    /// Record the command acting during the current tick. Needed before the
    /// next [`fuse`].
    pub fn record_input(&mut self, input: ControlInput) {
        if let Some(r) = self.history.back_mut() {
            r.input = input;
        }
    }

    /// Command recorded for the current tick.
    pub fn current_input(&self) -> ControlInput {
        self.history.back().map(|r| r.input).unwrap_or_default()
    }
}

/// Advance one tick from `r`. Yaw uses the gyro reading taken at the end of
/// the interval when available, otherwise the model yaw rate.
fn propagate(r: &Record, yaw_rate: Option<f64>, p: &ModelParams, dt: f64) -> VehicleState {
    let [p1, p2, p3, p4, _, _, _, _, p9, p10] = p.0;
    let input = r.input.clamped();
    let a = input.d + p9;
    let s = r.state;
    let speed = p1 * s.v * (1.0 + p2 * a * a);
    let heading = s.psi + p3 * a + p10;
    VehicleState {
        x: s.x + dt * speed * heading.cos(),
        y: s.y + dt * speed * heading.sin(),
        psi: s.psi + dt * yaw_rate.unwrap_or(p4 * s.v * a),
        v: s.v,
    }
}

/// Correct the pose at the fix's tick and replay the history up to now.
/// Fixes older than the history, or from the future, are ignored.
pub fn rebase(
    est: &mut StateEstimate,
    fix: IpsFix,
    p: &ModelParams,
    dt: f64,
    cfg: &EstimatorConfig,
) {
    let first = est.history.front().map(|r| r.step).unwrap_or(est.step);
    if fix.step < first || fix.step > est.step {
        return;
    }
    let idx = (fix.step - first) as usize;
    let k = cfg.blend_gain.clamp(0.0, 1.0);
    let r = &mut est.history[idx];
    r.state.x += k * (fix.x - r.state.x);
    r.state.y += k * (fix.y - r.state.y);
    r.state.psi += k * wrap_angle(fix.psi - r.state.psi);
    for i in idx + 1..est.history.len() {
        let cur = est.history[i];
        let mut s = propagate(&est.history[i - 1], cur.yaw_rate, p, dt);
        s.v = cur.state.v;
        est.history[i].state = s;
    }
    est.ips_age = est.ips_age.min(est.step - fix.step);
    est.state = est.history.back().expect("history is never empty").state;
}

/// One estimator tick.
///
/// Dead-reckons from the previous tick with the recorded command, takes the
/// odometer speed, and applies `fix` through [`rebase`].
pub fn fuse(
    prev: &StateEstimate,
    odometer_v: f64,
    yaw_rate: Option<f64>,
    fix: Option<IpsFix>,
    p: &ModelParams,
    dt: f64,
    cfg: &EstimatorConfig,
) -> StateEstimate {
    let mut est = prev.clone();
    let last = *est.history.back().expect("history is never empty");
    let mut state = propagate(&last, yaw_rate, p, dt);
    state.v = odometer_v;
    est.step = last.step + 1;
    est.history.push_back(Record {
        step: est.step,
        state,
        yaw_rate,
        input: last.input,
    });
    while est.history.len() > cfg.history_len.max(1) {
        est.history.pop_front();
    }
    est.ips_age += 1;

    if let Some(fix) = fix {
        rebase(&mut est, fix, p, dt, cfg);
    }
    est.state = est.history.back().expect("history is never empty").state;
    est
}
