//! Onboard mid-level controller: state estimation, trajectory following
//! (MPC or PID) and the external-control pass-through.

mod estimator;
mod mpc;
mod pid;

pub use estimator::{fuse, rebase, EstimatorConfig, IpsFix, StateEstimate};
pub use mpc::{mpc_step, MpcConfig, MpcSolution};
pub use pid::{pid_step, PidGains, PidState};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlInput, ModelParams, VehicleState};
use crate::trajectory::{Trajectory, TrajectoryPoint};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OperatingMode {
    ExternalControl,
    TrajectoryFollowing,
}

/// State report sent by a vehicle every tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleStateMsg {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub m_applied: f64,
    pub d_applied: f64,
    pub ips_age: u64,
}

/// Messages exchanged over the lab bus, encoded as JSON objects with a
/// `type` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    DirectInput { m: f64, d: f64 },
    TrajectorySegment { points: Vec<TrajectoryPoint> },
    VehicleState(VehicleStateMsg),
}

impl Message {
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }

    pub fn decode(text: &str) -> Result<Self, ControllerError> {
        let msg: Message =
            serde_json::from_str(text).map_err(|e| ControllerError::Malformed(e.to_string()))?;
        match &msg {
            Message::DirectInput { m, d } if !(m.is_finite() && d.is_finite()) => {
                Err(ControllerError::Malformed("non-finite direct input".into()))
            }
            _ => Ok(msg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerKind {
    Mpc(MpcConfig),
    Pid(PidGains),
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Mpc(_) => "mpc",
            ControllerKind::Pid(_) => "pid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlcConfig {
    pub controller: ControllerKind,
    /// Model used for estimation and control.
    pub params: ModelParams,
    pub dt: f64,
    /// Ticks between issuing a command and it acting on the motor.
    pub actuation_delay: usize,
    pub estimator: EstimatorConfig,
}

impl Default for MlcConfig {
    fn default() -> Self {
        Self {
            controller: ControllerKind::Mpc(MpcConfig::default()),
            params: ModelParams::REFERENCE,
            dt: crate::DEFAULT_DT,
            actuation_delay: 5,
            estimator: EstimatorConfig::default(),
        }
    }
}

impl MlcConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let mut errs = Vec::new();
        if !(self.dt.is_finite() && self.dt > 0.0) {
            errs.push(format!("dt must be positive, got {}", self.dt));
        }
        if !self.params.is_finite() {
            errs.push("model parameters must be finite".into());
        }
        if let ControllerKind::Mpc(m) = &self.controller {
            if let Err(ControllerError::InvalidConfig(e)) = m.validate() {
                errs.extend(e);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ControllerError::InvalidConfig(errs))
        }
    }
}

/// Sensor readings available at one tick.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sensors {
    pub step: u64,
    pub odometer_v: f64,
    pub yaw_rate: Option<f64>,
    pub voltage: f64,
    /// IPS fixes delivered this tick, oldest first.
    pub ips_fixes: Vec<IpsFix>,
}

/// Everything a vehicle's mid-level controller carries between ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct MlcState {
    pub mode: OperatingMode,
    pub estimate: StateEstimate,
    pub trajectory: Trajectory,
    /// Commands issued but not yet acting, oldest first.
    pub pending: VecDeque<ControlInput>,
    pub last_command: ControlInput,
    pub warm_start: Option<Vec<[f64; 2]>>,
    pub pid: PidState,
    pub malformed: u64,
    pub safe_stops: u64,
    started: bool,
}

impl MlcState {
    /// Controller placed at a known pose at tick `step`.
    pub fn new(initial: VehicleState, step: u64, cfg: &MlcConfig) -> Self {
        Self {
            mode: OperatingMode::TrajectoryFollowing,
            estimate: StateEstimate::new(initial, step),
            trajectory: Trajectory::default(),
            pending: std::iter::repeat_n(ControlInput::new(0.0, 0.0, 0.0), cfg.actuation_delay)
                .collect(),
            last_command: ControlInput::default(),
            warm_start: None,
            pid: PidState::default(),
            malformed: 0,
            safe_stops: 0,
            started: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickDiagnostics {
    pub mode: OperatingMode,
    pub safe_stop: bool,
    pub solver_iterations: usize,
    pub solver_cost: f64,
    pub malformed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    /// Command handed to the actuators this tick.
    pub command: ControlInput,
    pub report: VehicleStateMsg,
    pub state: MlcState,
    pub diagnostics: TickDiagnostics,
}

/// One 20 ms controller tick.
///
/// A direct input received this tick switches to external control and is
/// applied as is (clamped). A trajectory segment without a direct input
/// switches back to trajectory following. In external control without a
/// fresh direct input, and in trajectory following without a trajectory,
/// the vehicle coasts (`m = 0, d = 0`). Undecodable messages are counted and
/// otherwise ignored.
pub fn mlc_tick(
    inbox: &[String],
    sensors: &Sensors,
    prev: MlcState,
    cfg: &MlcConfig,
) -> TickOutput {
    let mut st = prev;
    let p = &cfg.params;

    let mut direct = None;
    let mut got_segment = false;
    for raw in inbox {
        match Message::decode(raw) {
            Ok(Message::DirectInput { m, d }) => direct = Some((m, d)),
            Ok(Message::TrajectorySegment { points }) => {
                got_segment = true;
                let last = st.trajectory.end_time().unwrap_or(f64::NEG_INFINITY);
                for pt in points.into_iter().filter(|pt| pt.t > last) {
                    if st.trajectory.push(pt).is_err() {
                        st.malformed += 1;
                        break;
                    }
                }
            }
            Ok(Message::VehicleState(_)) => {}
            Err(_) => st.malformed += 1,
        }
    }

    if st.started {
        while st.estimate.step < sensors.step {
            let fix = None;
            st.estimate = fuse(
                &st.estimate,
                sensors.odometer_v,
                sensors.yaw_rate,
                fix,
                p,
                cfg.dt,
                &cfg.estimator,
            );
        }
    } else {
        st.started = true;
        st.estimate.state.v = sensors.odometer_v;
    }
    for fix in &sensors.ips_fixes {
        rebase(&mut st.estimate, *fix, p, cfg.dt, &cfg.estimator);
    }

    if direct.is_some() {
        st.mode = OperatingMode::ExternalControl;
    } else if got_segment {
        st.mode = OperatingMode::TrajectoryFollowing;
    }

    let voltage = sensors.voltage;
    let stop = ControlInput::new(0.0, 0.0, voltage);
    let mut safe_stop = false;
    let mut iterations = 0;
    let mut solver_cost = f64::NAN;
    let command = match (st.mode, direct) {
        (OperatingMode::ExternalControl, Some((m, d))) => {
            st.warm_start = None;
            ControlInput::new(m, d, voltage).clamped()
        }
        (OperatingMode::TrajectoryFollowing, _) if !st.trajectory.is_empty() => {
            match &cfg.controller {
                ControllerKind::Mpc(mpc) => {
                    let pending: Vec<ControlInput> = st.pending.iter().copied().collect();
                    let prev_cmd = ControlInput {
                        u: voltage,
                        ..st.last_command
                    };
                    let sol = mpc_step(
                        &st.estimate,
                        &pending,
                        &st.trajectory,
                        p,
                        mpc,
                        prev_cmd,
                        st.warm_start.as_deref(),
                    );
                    iterations = sol.iterations;
                    solver_cost = sol.cost;
                    safe_stop = sol.safe_stop;
                    st.warm_start = (!sol.safe_stop).then(|| sol.shifted_plan());
                    sol.input.clamped()
                }
                ControllerKind::Pid(gains) => {
                    let t = st.estimate.time(cfg.dt);
                    pid_step(
                        &st.estimate.state,
                        t,
                        &st.trajectory,
                        p,
                        gains,
                        &mut st.pid,
                        cfg.dt,
                        voltage,
                    )
                }
            }
        }
        _ => {
            safe_stop = true;
            stop
        }
    };
    let command = if command.m.is_finite() && command.d.is_finite() {
        command
    } else {
        stop
    };
    if safe_stop {
        st.safe_stops += 1;
    }

    st.pending.push_back(command);
    let acting = st.pending.pop_front().unwrap_or(command);
    st.estimate.record_input(acting);
    st.last_command = command;

    let e = st.estimate.state;
    let report = VehicleStateMsg {
        t: st.estimate.time(cfg.dt),
        x: e.x,
        y: e.y,
        psi: e.psi,
        v: e.v,
        m_applied: command.m,
        d_applied: command.d,
        ips_age: st.estimate.ips_age,
    };
    let diagnostics = TickDiagnostics {
        mode: st.mode,
        safe_stop,
        solver_iterations: iterations,
        solver_cost,
        malformed: st.malformed,
    };
    TickOutput {
        command,
        report,
        state: st,
        diagnostics,
    }
}
