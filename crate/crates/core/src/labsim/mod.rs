//! Deterministic lock-step simulation of the lab.
//!
//! Every vehicle, message and sensor advances on one shared 50 Hz clock. All
//! randomness comes from seeded per-vehicle ChaCha streams, so a run is a
//! pure function of its scenario, lab configuration and seed.

mod bus;
mod excitation;
mod scenario;
mod world;

pub use bus::{Channel, Envelope, Link, SendRecord};
pub use excitation::{generate_ident_log, ExcitationProfile, IdentLogSpec, MeasurementNoise};
pub use scenario::{
    config_hash, run_scenario, tracking_summary, vehicle_seed, write_trace, CommandRecord,
    ControlRecord, DirectSegment, IpsRecord, MessageRecord, ScenarioSpec, Script, SimTrace,
    TrackingSummary, TrajectorySpec, TruthRecord, VehicleSpec, TRACE_FILES,
};
pub use world::{
    ips_observe, step_world, ArenaExit, IpsObservation, Odometer, TruthVehicle, World,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("ground truth diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Indoor positioning system model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpsConfig {
    /// Radius of the uniform position-error disk [m].
    pub pos_bound: f64,
    /// Half-width of the uniform yaw error [rad].
    pub yaw_bound: f64,
    /// Steps between the observed instant and delivery.
    pub delay_steps: usize,
    pub loss: f64,
}

impl Default for IpsConfig {
    fn default() -> Self {
        Self {
            pos_bound: 0.0325,
            yaw_bound: 2.25f64.to_radians(),
            delay_steps: 1,
            loss: 0.0,
        }
    }
}

impl IpsConfig {
    /// Noise-free, loss-free, undelayed.
    pub fn ideal() -> Self {
        Self {
            pos_bound: 0.0,
            yaw_bound: 0.0,
            delay_steps: 0,
            loss: 0.0,
        }
    }
}

/// One direction of one message channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub latency_steps: usize,
    pub jitter_steps: usize,
    pub loss: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            latency_steps: 1,
            jitter_steps: 1,
            loss: 0.01,
        }
    }
}

impl LinkConfig {
    pub fn ideal() -> Self {
        Self {
            latency_steps: 0,
            jitter_steps: 0,
            loss: 0.0,
        }
    }
}

/// Per-channel link settings. Every vehicle owns one link per channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Trajectory segments towards the vehicle.
    pub trajectory: LinkConfig,
    /// Direct inputs towards the vehicle.
    pub direct_input: LinkConfig,
    /// State reports from the vehicle.
    pub state: LinkConfig,
}

impl NetworkConfig {
    pub fn ideal() -> Self {
        Self {
            trajectory: LinkConfig::ideal(),
            direct_input: LinkConfig::ideal(),
            state: LinkConfig::ideal(),
        }
    }
}

/// Wheel odometer that counts motor shaft angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometerConfig {
    pub ticks_per_rev: u32,
    pub revs_per_meter: f64,
}

impl Default for OdometerConfig {
    fn default() -> Self {
        Self {
            ticks_per_rev: 6,
            revs_per_meter: 55.0,
        }
    }
}

impl OdometerConfig {
    /// Distance per tick [m].
    pub fn tick_length(&self) -> f64 {
        1.0 / (self.ticks_per_rev as f64 * self.revs_per_meter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub arena_width: f64,
    pub arena_height: f64,
    pub dt: f64,
    /// Ground-truth Euler substeps per tick.
    pub substeps: usize,
    /// Ticks between a command leaving the controller and reaching the motor.
    pub actuation_delay: usize,
    pub ips: IpsConfig,
    pub network: NetworkConfig,
    pub odometer: OdometerConfig,
    pub seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            arena_width: 4.5,
            arena_height: 4.0,
            dt: crate::DEFAULT_DT,
            substeps: 4,
            actuation_delay: 5,
            ips: IpsConfig::default(),
            network: NetworkConfig::default(),
            odometer: OdometerConfig::default(),
            seed: 0,
        }
    }
}

fn check_probability(name: &str, p: f64, errs: &mut Vec<String>) {
    if !(0.0..=1.0).contains(&p) {
        errs.push(format!("{name} must be in [0, 1], got {p}"));
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        let mut errs = Vec::new();
        if !(self.dt.is_finite() && self.dt > 0.0) {
            errs.push(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.arena_width > 0.0 && self.arena_height > 0.0) {
            errs.push("arena dimensions must be positive".into());
        }
        if self.substeps == 0 {
            errs.push("substeps must be at least 1".into());
        }
        if !(self.ips.pos_bound >= 0.0 && self.ips.yaw_bound >= 0.0) {
            errs.push("IPS noise bounds must be non-negative".into());
        }
        check_probability("ips.loss", self.ips.loss, &mut errs);
        for (name, link) in [
            ("network.trajectory", self.network.trajectory),
            ("network.direct_input", self.network.direct_input),
            ("network.state", self.network.state),
        ] {
            check_probability(&format!("{name}.loss"), link.loss, &mut errs);
        }
        if !(self.odometer.ticks_per_rev > 0 && self.odometer.revs_per_meter > 0.0) {
            errs.push("odometer resolution must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Invalid(errs))
        }
    }

    pub fn in_arena(&self, x: f64, y: f64) -> bool {
        (0.0..=self.arena_width).contains(&x) && (0.0..=self.arena_height).contains(&y)
    }
}
