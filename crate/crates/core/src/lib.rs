//! Simulation, grey-box identification and trajectory control for 1:18
//! Ackermann-steered model vehicles operating in a networked indoor lab.
//!
//! The crate is organised bottom-up:
//!
//! - [`dynamics`]: exact and parameterized kinematic bicycle models and the
//!   explicit Euler discretization shared by every other module.
//! - [`trajectory`]: timed reference trajectories with cubic Hermite
//!   interpolation.
//! - [`ident`]: single-shooting grey-box parameter estimation with a
//!   Levenberg-Marquardt solver and an outer delay grid search.
//! - [`controller`]: the onboard mid-level controller (state estimation, MPC,
//!   PID baseline, operating-mode logic).
//! - [`labsim`]: a deterministic lock-step simulation of the lab (ground truth,
//!   indoor positioning, lossy pub-sub bus, multi-vehicle scenarios).
//!
//! Data-parallel loops (Jacobian columns, delay grid cells, fleet ticks) go
//! through [`exec`], which uses rayon when the `parallel` feature is enabled
//! and falls back to plain iteration otherwise. Results never depend on the
//! execution mode.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod dynamics;
pub mod exec;
pub mod ident;
pub mod labsim;
pub mod trajectory;

pub use dynamics::{ControlInput, ModelParams, PhysicalParams, StateDerivative, VehicleState};
pub use exec::Exec;
pub use trajectory::{ReferenceSample, Trajectory, TrajectoryPoint};

/// Controller and measurement sample period of the vehicle's mid-level loop [s].
pub const DEFAULT_DT: f64 = 0.02;

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = angle.rem_euclid(two_pi);
    if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}
