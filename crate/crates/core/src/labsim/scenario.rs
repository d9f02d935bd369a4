use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bus::{Channel, Link};
use super::world::{ips_observe, ArenaExit, TruthVehicle};
use super::{IdentLogSpec, LabConfig, LabError};
use crate::controller::{
    fuse, mlc_tick, IpsFix, Message, MlcConfig, MlcState, OperatingMode, Sensors, StateEstimate,
};
use crate::dynamics::{ControlInput, PhysicalParams, VehicleState, NOMINAL_VOLTAGE};
use crate::exec::Exec;
use crate::trajectory::{shapes, Trajectory, TrajectoryPoint};
use crate::wrap_angle;

/// Reference path handed to a vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum TrajectorySpec {
    FigureEight {
        cx: f64,
        cy: f64,
        a: f64,
        speed: f64,
        laps: f64,
        /// Seconds to accelerate from rest.
        #[serde(default)]
        ramp: f64,
    },
    Circle {
        cx: f64,
        cy: f64,
        radius: f64,
        speed: f64,
        duration: f64,
    },
    Straight {
        x0: f64,
        y0: f64,
        heading: f64,
        speed: f64,
        duration: f64,
    },
    Points {
        points: Vec<TrajectoryPoint>,
    },
}

impl TrajectorySpec {
    /// Build the trajectory with knots `knot_dt` apart, shifted to begin at
    /// `start`.
    pub fn build(&self, start: f64, knot_dt: f64) -> Result<Trajectory, LabError> {
        let bad = |m: String| LabError::Invalid(vec![m]);
        if !(knot_dt > 0.0) {
            return Err(bad(format!("knot_dt must be positive, got {knot_dt}")));
        }
        let base = match self {
            TrajectorySpec::FigureEight {
                cx,
                cy,
                a,
                speed,
                laps,
                ramp,
            } => {
                if !(*a > 0.0 && *speed > 0.0 && *laps > 0.0) {
                    return Err(bad("figure-eight needs positive a, speed and laps".into()));
                }
                shapes::figure_eight_ramped(*cx, *cy, *a, *speed, *laps, knot_dt, *ramp)
            }
            TrajectorySpec::Circle {
                cx,
                cy,
                radius,
                speed,
                duration,
            } => {
                if !(*radius > 0.0 && *speed > 0.0 && *duration > 0.0) {
                    return Err(bad(
                        "circle needs positive radius, speed and duration".into()
                    ));
                }
                shapes::circle(*cx, *cy, *radius, *speed, *duration, knot_dt)
            }
            TrajectorySpec::Straight {
                x0,
                y0,
                heading,
                speed,
                duration,
            } => {
                if !(*speed >= 0.0 && *duration > 0.0) {
                    return Err(bad(
                        "straight needs non-negative speed and positive duration".into(),
                    ));
                }
                shapes::straight(*x0, *y0, *heading, *speed, *duration, knot_dt)
            }
            TrajectorySpec::Points { points } => {
                Trajectory::new(points.clone()).map_err(|e| bad(e.to_string()))?
            }
        };
        let shifted = base
            .points()
            .iter()
            .map(|p| TrajectoryPoint {
                t: p.t + start,
                ..*p
            })
            .collect();
        Trajectory::new(shifted).map_err(|e| bad(e.to_string()))
    }
}

/// Constant direct input over a time interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectSegment {
    pub start: f64,
    pub duration: f64,
    pub m: f64,
    pub d: f64,
}

fn default_knot_dt() -> f64 {
    0.1
}
fn default_lookahead() -> f64 {
    1.0
}
fn default_period() -> usize {
    5
}

/// What the high-level side sends to one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Script {
    Idle,
    /// Trajectory knots within `lookahead` seconds of now (in both
    /// directions) are re-broadcast every `period_ticks`, so lost segments
    /// are repaired.
    Trajectory {
        trajectory: TrajectorySpec,
        #[serde(default)]
        start: f64,
        #[serde(default = "default_knot_dt")]
        knot_dt: f64,
        #[serde(default = "default_lookahead")]
        lookahead: f64,
        #[serde(default = "default_period")]
        period_ticks: usize,
    },
    /// A direct input is sent every tick inside a segment.
    Direct {
        segments: Vec<DirectSegment>,
    },
}

fn default_voltage() -> f64 {
    NOMINAL_VOLTAGE
}

fn default_controller() -> MlcConfig {
    MlcConfig {
        params: PhysicalParams::default().linearized_model_params(),
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub initial_state: VehicleState,
    #[serde(default)]
    pub physical: PhysicalParams,
    /// Controller settings. The actuation delay is taken from the lab.
    #[serde(default = "default_controller")]
    pub controller: MlcConfig,
    pub script: Script,
    #[serde(default = "default_voltage")]
    pub voltage: f64,
    /// Overrides the seed derived from the lab seed and vehicle index.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl VehicleSpec {
    pub fn new(initial_state: VehicleState, script: Script) -> Self {
        Self {
            initial_state,
            physical: PhysicalParams::default(),
            controller: default_controller(),
            script,
            voltage: NOMINAL_VOLTAGE,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    /// Simulated time [s].
    pub duration: f64,
    pub vehicles: Vec<VehicleSpec>,
    /// Excitation used when the scenario drives an identification run.
    #[serde(default)]
    pub ident: Option<IdentLogSpec>,
}

impl ScenarioSpec {
    pub fn validate(&self, lab: &LabConfig) -> Result<(), LabError> {
        let mut errs = match lab.validate() {
            Err(LabError::Invalid(e)) => e,
            _ => Vec::new(),
        };
        if !(self.duration.is_finite() && self.duration > 0.0) {
            errs.push(format!("duration must be positive, got {}", self.duration));
        }
        if self.vehicles.is_empty() {
            errs.push("scenario needs at least one vehicle".into());
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            let s = v.initial_state;
            if !s.is_finite() || !lab.in_arena(s.x, s.y) {
                errs.push(format!(
                    "vehicle {i}: initial state ({}, {}) is outside the arena",
                    s.x, s.y
                ));
            }
            if let Err(e) = v.physical.validate() {
                errs.push(format!("vehicle {i}: {e}"));
            }
            if let Err(e) = v.controller.validate() {
                errs.push(format!("vehicle {i}: {e}"));
            }
            if !(v.voltage.is_finite() && v.voltage > 0.0) {
                errs.push(format!("vehicle {i}: voltage must be positive"));
            }
            match &v.script {
                Script::Trajectory {
                    trajectory,
                    start,
                    knot_dt,
                    period_ticks,
                    ..
                } => {
                    if let Err(LabError::Invalid(e)) = trajectory.build(*start, *knot_dt) {
                        errs.extend(e.into_iter().map(|m| format!("vehicle {i}: {m}")));
                    }
                    if *period_ticks == 0 {
                        errs.push(format!("vehicle {i}: period_ticks must be at least 1"));
                    }
                }
                Script::Direct { segments } => {
                    if segments
                        .iter()
                        .any(|s| !(s.duration >= 0.0 && s.m.is_finite() && s.d.is_finite()))
                    {
                        errs.push(format!("vehicle {i}: invalid direct-input segment"));
                    }
                }
                Script::Idle => {}
            }
        }
        if let Some(ident) = &self.ident {
            if let Err(LabError::Invalid(e)) = ident.validate() {
                errs.extend(e);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Invalid(errs))
        }
    }

    /// Reference trajectory of vehicle `i`, if it follows one.
    pub fn reference(&self, i: usize) -> Option<Trajectory> {
        match &self.vehicles.get(i)?.script {
            Script::Trajectory {
                trajectory,
                start,
                knot_dt,
                ..
            } => trajectory.build(*start, *knot_dt).ok(),
            _ => None,
        }
    }
}

/// Seed of vehicle `index` when its spec does not set one.
pub fn vehicle_seed(lab_seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = lab_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub step: u64,
    pub vehicle: usize,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpsRecord {
    pub vehicle: usize,
    /// Tick whose true pose was observed.
    pub step: u64,
    pub deliver_step: u64,
    pub x: f64,
    pub y: f64,
    /// Wrapped to `(-pi, pi]`.
    pub psi: f64,
    pub err_pos: f64,
    pub err_yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub vehicle: usize,
    pub issued_step: u64,
    pub applied_step: u64,
    pub m: f64,
    pub d: f64,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub vehicle: usize,
    pub channel: Channel,
    pub seq: u64,
    pub send_step: u64,
    pub deliver_step: Option<u64>,
    pub payload: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub step: u64,
    pub vehicle: usize,
    pub mode: OperatingMode,
    pub safe_stop: bool,
    pub solver_iterations: usize,
    pub est_x: f64,
    pub est_y: f64,
    pub est_psi: f64,
    pub est_v: f64,
    /// Pure dead reckoning from the same sensors, without IPS.
    pub dr_x: f64,
    pub dr_y: f64,
    pub ips_age: u64,
}

/// Everything that happened in one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace {
    pub dt: f64,
    pub steps: u64,
    pub vehicles: usize,
    pub truth: Vec<TruthRecord>,
    pub ips: Vec<IpsRecord>,
    pub commands: Vec<CommandRecord>,
    pub messages: Vec<MessageRecord>,
    pub control: Vec<ControlRecord>,
    pub arena_exits: Vec<ArenaExit>,
    /// Undecodable messages per vehicle.
    pub malformed: Vec<u64>,
}

#[derive(Debug, Default)]
struct Records {
    truth: Vec<TruthRecord>,
    ips: Vec<IpsRecord>,
    commands: Vec<CommandRecord>,
    messages: Vec<MessageRecord>,
    control: Vec<ControlRecord>,
    exits: Vec<ArenaExit>,
}

struct VehicleSim {
    index: usize,
    spec: VehicleSpec,
    mlc_cfg: MlcConfig,
    truth: TruthVehicle,
    mlc: Option<MlcState>,
    dead_reckoning: StateEstimate,
    /// Links indexed like [`Channel::ALL`].
    links: [Link; 3],
    ips_rng: ChaCha8Rng,
    ips_queue: VecDeque<(u64, IpsFix)>,
    actuation: VecDeque<(Option<u64>, ControlInput)>,
    trajectory: Option<Trajectory>,
    records: Records,
    failure: Option<LabError>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl VehicleSim {
    fn new(index: usize, spec: &VehicleSpec, lab: &LabConfig) -> Self {
        let seed = spec.seed.unwrap_or_else(|| vehicle_seed(lab.seed, index));
        let net = &lab.network;
        let mlc_cfg = MlcConfig {
            actuation_delay: lab.actuation_delay,
            dt: lab.dt,
            ..spec.controller
        };
        let idle = ControlInput::new(0.0, 0.0, spec.voltage);
        let mut sim = Self {
            index,
            spec: spec.clone(),
            mlc_cfg,
            truth: TruthVehicle::new(spec.initial_state, spec.physical, lab.odometer),
            mlc: Some(MlcState::new(spec.initial_state, 0, &mlc_cfg)),
            dead_reckoning: StateEstimate::new(spec.initial_state, 0),
            links: [
                Link::new(net.trajectory, stream(seed, 2)),
                Link::new(net.direct_input, stream(seed, 3)),
                Link::new(net.state, stream(seed, 4)),
            ],
            ips_rng: stream(seed, 1),
            ips_queue: VecDeque::new(),
            actuation: std::iter::repeat_n((None, idle), lab.actuation_delay).collect(),
            trajectory: None,
            records: Records::default(),
            failure: None,
        };
        if let Script::Trajectory {
            trajectory,
            start,
            knot_dt,
            ..
        } = &spec.script
        {
            sim.trajectory = trajectory.build(*start, *knot_dt).ok();
        }
        sim.record_truth(0);
        sim.observe(0, lab);
        sim
    }

    fn record_truth(&mut self, step: u64) {
        let s = self.truth.state;
        self.records.truth.push(TruthRecord {
            step,
            vehicle: self.index,
            x: s.x,
            y: s.y,
            psi: s.psi,
            v: s.v,
        });
    }

    /// IPS sample of the current truth, tagged with `step`.
    fn observe(&mut self, step: u64, lab: &LabConfig) {
        let truth = self.truth.state;
        if let Some(o) = ips_observe(&truth, &lab.ips, &mut self.ips_rng) {
            let deliver = step + lab.ips.delay_steps as u64;
            let psi = wrap_angle(o.psi);
            self.ips_queue.push_back((
                deliver,
                IpsFix {
                    x: o.x,
                    y: o.y,
                    psi,
                    step,
                },
            ));
            self.records.ips.push(IpsRecord {
                vehicle: self.index,
                step,
                deliver_step: deliver,
                x: o.x,
                y: o.y,
                psi,
                err_pos: (o.x - truth.x).hypot(o.y - truth.y),
                err_yaw: wrap_angle(psi - truth.psi).abs(),
            });
        }
    }

    fn send(&mut self, channel: Channel, payload: String, step: u64) {
        let idx = Channel::ALL
            .iter()
            .position(|c| *c == channel)
            .expect("known channel");
        let rec = self.links[idx].send(payload.clone(), step);
        self.records.messages.push(MessageRecord {
            vehicle: self.index,
            channel,
            seq: rec.seq,
            send_step: step,
            deliver_step: rec.deliver_step,
            payload,
        });
    }

    fn script(&mut self, step: u64, dt: f64) {
        let t = step as f64 * dt;
        match &self.spec.script {
            Script::Idle => {}
            Script::Trajectory {
                lookahead,
                period_ticks,
                ..
            } => {
                if !step.is_multiple_of(*period_ticks as u64) {
                    return;
                }
                let Some(traj) = &self.trajectory else { return };
                let points: Vec<TrajectoryPoint> = traj
                    .points()
                    .iter()
                    .filter(|p| p.t > t - lookahead && p.t <= t + lookahead)
                    .copied()
                    .collect();
                if !points.is_empty() {
                    self.send(
                        Channel::Trajectory,
                        Message::TrajectorySegment { points }.encode(),
                        step,
                    );
                }
            }
            Script::Direct { segments } => {
                // half a tick of slack keeps segment edges stable under rounding
                let active = segments
                    .iter()
                    .rev()
                    .find(|s| t + 0.5 * dt >= s.start && t + 0.5 * dt < s.start + s.duration);
                if let Some(s) = active {
                    let msg = Message::DirectInput { m: s.m, d: s.d }.encode();
                    self.send(Channel::DirectInput, msg, step);
                }
            }
        }
    }

    fn tick(&mut self, step: u64, lab: &LabConfig) {
        if self.failure.is_some() {
            return;
        }
        // (1) scripts, (2) bus
        self.script(step, lab.dt);
        let mut inbox: Vec<String> = Vec::new();
        for link in &mut self.links[..2] {
            inbox.extend(link.deliver(step).into_iter().map(|e| e.payload));
        }
        self.links[2].deliver(step);

        // (3) controller
        let odometer_v = self.truth.odometer.read(lab.dt);
        let mut fixes = Vec::new();
        while self.ips_queue.front().is_some_and(|(d, _)| *d <= step) {
            fixes.extend(self.ips_queue.pop_front().map(|(_, f)| f));
        }
        let yaw_rate = (step > 0).then_some(self.truth.yaw_rate);
        let sensors = Sensors {
            step,
            odometer_v,
            yaw_rate,
            voltage: self.spec.voltage,
            ips_fixes: fixes,
        };
        let state = self
            .mlc
            .take()
            .expect("controller state present between ticks");
        let out = mlc_tick(&inbox, &sensors, state, &self.mlc_cfg);
        self.send(
            Channel::State,
            Message::VehicleState(out.report).encode(),
            step,
        );

        // (4) actuation queue
        self.actuation.push_back((Some(step), out.command));
        let (issued, acting) = self
            .actuation
            .pop_front()
            .expect("queue is never empty after a push");
        if let Some(issued) = issued {
            self.records.commands.push(CommandRecord {
                vehicle: self.index,
                issued_step: issued,
                applied_step: step,
                m: acting.m,
                d: acting.d,
                u: acting.u,
            });
        }
        if step > 0 {
            self.dead_reckoning = fuse(
                &self.dead_reckoning,
                odometer_v,
                yaw_rate,
                None,
                &self.mlc_cfg.params,
                lab.dt,
                &Default::default(),
            );
        }
        self.dead_reckoning.record_input(acting);

        let est = out.state.estimate.state;
        self.records.control.push(ControlRecord {
            step,
            vehicle: self.index,
            mode: out.diagnostics.mode,
            safe_stop: out.diagnostics.safe_stop,
            solver_iterations: out.diagnostics.solver_iterations,
            est_x: est.x,
            est_y: est.y,
            est_psi: est.psi,
            est_v: est.v,
            dr_x: self.dead_reckoning.state.x,
            dr_y: self.dead_reckoning.state.y,
            ips_age: out.state.estimate.ips_age,
        });
        self.mlc = Some(out.state);

        // (5) world
        let was_in = lab.in_arena(self.truth.state.x, self.truth.state.y);
        if self.truth.advance(&acting, lab).is_err() {
            self.failure = Some(LabError::Diverged {
                step: step as usize,
            });
            return;
        }
        if was_in && !lab.in_arena(self.truth.state.x, self.truth.state.y) {
            self.records.exits.push(ArenaExit {
                vehicle: self.index,
                step: step + 1,
            });
        }
        self.record_truth(step + 1);

        // (6) IPS
        self.observe(step + 1, lab);
    }
}

/// Run a scenario in lock-step. Vehicle ticks within one step run through
/// `exec`; every vehicle owns its links and random streams, so the trace does
/// not depend on the execution mode.
pub fn run_scenario(
    spec: &ScenarioSpec,
    lab: &LabConfig,
    exec: Exec,
) -> Result<SimTrace, LabError> {
    spec.validate(lab)?;
    let steps = (spec.duration / lab.dt).round() as u64;
    let mut sims: Vec<VehicleSim> = spec
        .vehicles
        .iter()
        .enumerate()
        .map(|(i, v)| VehicleSim::new(i, v, lab))
        .collect();
    for step in 0..steps {
        exec.for_each_mut(&mut sims, |_, sim| sim.tick(step, lab));
        if let Some(err) = sims.iter_mut().find_map(|s| s.failure.take()) {
            return Err(err);
        }
    }

    let mut trace = SimTrace {
        dt: lab.dt,
        steps,
        vehicles: sims.len(),
        ..Default::default()
    };
    for sim in &mut sims {
        let r = std::mem::take(&mut sim.records);
        trace.truth.extend(r.truth);
        trace.ips.extend(r.ips);
        trace.commands.extend(r.commands);
        trace.messages.extend(r.messages);
        trace.control.extend(r.control);
        trace.arena_exits.extend(r.exits);
        trace
            .malformed
            .push(sim.mlc.as_ref().map_or(0, |m| m.malformed));
    }
    trace.truth.sort_by_key(|r| (r.step, r.vehicle));
    trace.ips.sort_by_key(|r| (r.step, r.vehicle));
    trace.commands.sort_by_key(|r| (r.applied_step, r.vehicle));
    trace
        .messages
        .sort_by_key(|r| (r.send_step, r.vehicle, r.channel, r.seq));
    trace.control.sort_by_key(|r| (r.step, r.vehicle));
    trace.arena_exits.sort_by_key(|e| (e.step, e.vehicle));
    Ok(trace)
}

impl SimTrace {
    /// Records of one vehicle, renumbered as vehicle 0.
    pub fn vehicle_view(&self, vehicle: usize) -> SimTrace {
        fn pick<T: Clone>(v: &[T], keep: impl Fn(&T) -> bool, renumber: impl Fn(&mut T)) -> Vec<T> {
            v.iter()
                .filter(|r| keep(r))
                .cloned()
                .map(|mut r| {
                    renumber(&mut r);
                    r
                })
                .collect()
        }
        SimTrace {
            dt: self.dt,
            steps: self.steps,
            vehicles: 1,
            truth: pick(&self.truth, |r| r.vehicle == vehicle, |r| r.vehicle = 0),
            ips: pick(&self.ips, |r| r.vehicle == vehicle, |r| r.vehicle = 0),
            commands: pick(&self.commands, |r| r.vehicle == vehicle, |r| r.vehicle = 0),
            messages: pick(&self.messages, |r| r.vehicle == vehicle, |r| r.vehicle = 0),
            control: pick(&self.control, |r| r.vehicle == vehicle, |r| r.vehicle = 0),
            arena_exits: pick(
                &self.arena_exits,
                |r| r.vehicle == vehicle,
                |r| r.vehicle = 0,
            ),
            malformed: self.malformed.get(vehicle).copied().into_iter().collect(),
        }
    }

    /// True states of one vehicle, indexed by step.
    pub fn truth_of(&self, vehicle: usize) -> Vec<VehicleState> {
        self.truth
            .iter()
            .filter(|r| r.vehicle == vehicle)
            .map(|r| VehicleState::new(r.x, r.y, r.psi, r.v))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub vehicle: usize,
    pub samples: usize,
    pub mean_pos_error: f64,
    pub max_pos_error: f64,
    /// Heading against the reference course, `|wrap(psi - course)|`.
    pub mean_yaw_error: f64,
    pub max_yaw_error: f64,
}

/// Position and heading error of every trajectory-following vehicle while
/// its reference is active.
pub fn tracking_summary(trace: &SimTrace, spec: &ScenarioSpec) -> Vec<TrackingSummary> {
    let mut out = Vec::new();
    for i in 0..spec.vehicles.len() {
        let Some(traj) = spec.reference(i) else {
            continue;
        };
        let (t0, t1) = (
            traj.start_time().unwrap_or(0.0),
            traj.end_time().unwrap_or(0.0),
        );
        let (mut n, mut sum_p, mut max_p, mut n_yaw, mut sum_y, mut max_y) =
            (0, 0.0, 0.0f64, 0, 0.0, 0.0f64);
        for r in trace.truth.iter().filter(|r| r.vehicle == i) {
            let t = r.step as f64 * trace.dt;
            if t < t0 || t > t1 {
                continue;
            }
            let Ok(rs) = traj.interpolate(t) else {
                continue;
            };
            let e = (r.x - rs.x).hypot(r.y - rs.y);
            n += 1;
            sum_p += e;
            max_p = max_p.max(e);
            if let Some(c) = rs.course().filter(|_| rs.speed() > 0.05) {
                let ey = wrap_angle(r.psi - c).abs();
                n_yaw += 1;
                sum_y += ey;
                max_y = max_y.max(ey);
            }
        }
        if n == 0 {
            continue;
        }
        out.push(TrackingSummary {
            vehicle: i,
            samples: n,
            mean_pos_error: sum_p / n as f64,
            max_pos_error: max_p,
            mean_yaw_error: if n_yaw > 0 { sum_y / n_yaw as f64 } else { 0.0 },
            max_yaw_error: max_y,
        });
    }
    out
}

/// SHA-256 (hex) of the canonical JSON of the scenario and lab config.
pub fn config_hash(spec: &ScenarioSpec, lab: &LabConfig) -> String {
    let json = serde_json::to_string(&(spec, lab)).expect("configs serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn write_stream<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), LabError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trace file names, in the order [`write_trace`] returns them.
pub const TRACE_FILES: [&str; 5] = [
    "truth.csv",
    "ips.csv",
    "commands.csv",
    "messages.csv",
    "control.csv",
];

/// Write one CSV per stream into `dir` (created if missing).
pub fn write_trace(trace: &SimTrace, dir: &Path) -> Result<Vec<PathBuf>, LabError> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = TRACE_FILES.iter().map(|f| dir.join(f)).collect();
    write_stream(
        &paths[0],
        &trace.truth,
        &["step", "vehicle", "x", "y", "psi", "v"],
    )?;
    write_stream(
        &paths[1],
        &trace.ips,
        &[
            "vehicle",
            "step",
            "deliver_step",
            "x",
            "y",
            "psi",
            "err_pos",
            "err_yaw",
        ],
    )?;
    write_stream(
        &paths[2],
        &trace.commands,
        &["vehicle", "issued_step", "applied_step", "m", "d", "u"],
    )?;
    write_stream(
        &paths[3],
        &trace.messages,
        &[
            "vehicle",
            "channel",
            "seq",
            "send_step",
            "deliver_step",
            "payload",
        ],
    )?;
    write_stream(
        &paths[4],
        &trace.control,
        &[
            "step",
            "vehicle",
            "mode",
            "safe_stop",
            "solver_iterations",
            "est_x",
            "est_y",
            "est_psi",
            "est_v",
            "dr_x",
            "dr_y",
            "ips_age",
        ],
    )?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labsim::{IpsConfig, NetworkConfig};

    fn circle_vehicle(cx: f64, cy: f64) -> VehicleSpec {
        let traj = TrajectorySpec::Circle {
            cx,
            cy,
            radius: 0.4,
            speed: 0.5,
            duration: 4.0,
        };
        VehicleSpec::new(
            VehicleState::new(cx + 0.4, cy, std::f64::consts::FRAC_PI_2, 0.0),
            Script::Trajectory {
                trajectory: traj,
                start: 0.0,
                knot_dt: 0.1,
                lookahead: 1.0,
                period_ticks: 5,
            },
        )
    }

    #[test]
    fn same_seed_same_trace() {
        let spec = ScenarioSpec {
            name: "two".into(),
            duration: 2.0,
            vehicles: vec![circle_vehicle(1.0, 1.0), circle_vehicle(3.0, 2.5)],
            ident: None,
        };
        let lab = LabConfig {
            seed: 11,
            ..Default::default()
        };
        let a = run_scenario(&spec, &lab, Exec::Sequential).unwrap();
        let b = run_scenario(&spec, &lab, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.truth.len(), 2 * 101);
    }

    #[test]
    fn actuation_bookkeeping_is_exact() {
        let spec = ScenarioSpec {
            name: String::new(),
            duration: 1.0,
            vehicles: vec![circle_vehicle(1.0, 1.0)],
            ident: None,
        };
        let lab = LabConfig::default();
        let t = run_scenario(&spec, &lab, Exec::Sequential).unwrap();
        assert_eq!(t.commands.len(), 50 - lab.actuation_delay);
        assert!(t
            .commands
            .iter()
            .all(|c| c.applied_step - c.issued_step == lab.actuation_delay as u64));
    }

    #[test]
    fn trajectory_latency_shifts_availability() {
        let mut spec = ScenarioSpec {
            name: String::new(),
            duration: 0.5,
            vehicles: vec![circle_vehicle(1.0, 1.0)],
            ident: None,
        };
        spec.vehicles[0].controller.controller =
            crate::controller::ControllerKind::Pid(Default::default());
        let first_follow = |latency: usize| {
            let mut net = NetworkConfig::ideal();
            net.trajectory.latency_steps = latency;
            let lab = LabConfig {
                network: net,
                ips: IpsConfig::ideal(),
                ..Default::default()
            };
            let t = run_scenario(&spec, &lab, Exec::Sequential).unwrap();
            t.control
                .iter()
                .find(|c| !c.safe_stop)
                .map(|c| c.step)
                .unwrap()
        };
        assert_eq!(first_follow(0), 0);
        assert_eq!(first_follow(2), 2);
    }

    #[test]
    fn invalid_scenarios_are_listed() {
        let mut v = circle_vehicle(1.0, 1.0);
        v.initial_state.x = -5.0;
        let spec = ScenarioSpec {
            name: String::new(),
            duration: -1.0,
            vehicles: vec![v],
            ident: None,
        };
        match spec.validate(&LabConfig::default()) {
            Err(LabError::Invalid(errs)) => assert_eq!(errs.len(), 2, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ScenarioSpec {
            name: "c".into(),
            duration: 1.0,
            vehicles: vec![circle_vehicle(1.0, 1.0)],
            ident: None,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioSpec>(&json).unwrap(), spec);
        let minimal = r#"{"duration": 2.0, "vehicles": [{"initial_state": {"x": 1, "y": 1, "psi": 0, "v": 0},
            "script": {"kind": "direct", "segments": [{"start": 0, "duration": 1, "m": 0.2, "d": 0.5}]}}]}"#;
        let parsed: ScenarioSpec = serde_json::from_str(minimal).unwrap();
        assert!(parsed.validate(&LabConfig::default()).is_ok());
    }
}
