//! Kinematic bicycle models of the vehicle and their explicit Euler
//! discretization.
//!
//! Two continuous-time models share the [`VehicleModel`] interface:
//!
//! - [`PhysicalParams`]: the no-slip kinematic bicycle with a first-order lag
//!   on the rear-axle speed. Used as ground truth by the lab simulation.
//! - [`ModelParams`]: the ten-parameter grey-box model that identification
//!   fits and the controllers predict with.
//!
//! State is `(x, y, psi, v)` where `(x, y)` is the reference point, `psi` the
//! yaw angle (kept unwrapped) and `v` the rear-axle speed.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// Battery voltage the motor law is normalised to [V].
pub const NOMINAL_VOLTAGE: f64 = 7.4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("steering angle {delta} rad outside (-pi/2, pi/2)")]
    SteeringDomain { delta: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("integration produced non-finite {field} at step {step}")]
    NonFinite { field: &'static str, step: usize },
}

/// Pose and speed of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

impl VehicleState {
    pub const fn new(x: f64, y: f64, psi: f64, v: f64) -> Self {
        Self { x, y, psi, v }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite() && self.v.is_finite()
    }

    /// First non-finite field, if any.
    pub fn non_finite_field(&self) -> Option<&'static str> {
        if !self.x.is_finite() {
            Some("x")
        } else if !self.y.is_finite() {
            Some("y")
        } else if !self.psi.is_finite() {
            Some("psi")
        } else if !self.v.is_finite() {
            Some("v")
        } else {
            None
        }
    }

    /// Rotate the pose about the origin by `theta`.
    pub fn rotated(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
            psi: self.psi + theta,
            v: self.v,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.psi, self.v]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Motor command `m`, steering command `d` (both dimensionless in `[-1, 1]`)
/// and the battery voltage `u` [V].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub m: f64,
    pub d: f64,
    pub u: f64,
}

impl Default for ControlInput {
    fn default() -> Self {
        Self::new(0.0, 0.0, NOMINAL_VOLTAGE)
    }
}

impl ControlInput {
    pub const fn new(m: f64, d: f64, u: f64) -> Self {
        Self { m, d, u }
    }

    /// Commands clamped to `[-1, 1]`. NaN commands become 0.
    pub fn clamped(&self) -> Self {
        Self {
            m: clamp_unit(self.m),
            d: clamp_unit(self.d),
            u: self.u,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.u.is_finite() && self.u > 0.0) {
            return Err(DynamicsError::InvalidInput(format!(
                "battery voltage must be positive, got {}",
                self.u
            )));
        }
        if !(self.m.is_finite() && self.d.is_finite()) {
            return Err(DynamicsError::InvalidInput("non-finite command".into()));
        }
        Ok(())
    }
}

pub(crate) fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-1.0, 1.0)
    }
}

/// Time derivative of a [`VehicleState`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateDerivative {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
    pub dv: f64,
}

impl StateDerivative {
    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dpsi.is_finite() && self.dv.is_finite()
    }
}

/// Geometry and drivetrain constants of the physical bicycle model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Wheelbase `L` [m].
    pub wheelbase: f64,
    /// Rear axle to reference point `l_r` [m].
    pub rear_to_ref: f64,
    /// Speed gain `K_v`.
    pub speed_gain: f64,
    /// Speed time constant `T_v` [s].
    pub speed_time_constant: f64,
    /// Steering angle at `d = 1` [rad].
    pub max_steering_angle: f64,
    /// Input speed at `m = 1` and nominal voltage [m/s].
    pub max_input_speed: f64,
}

impl Default for PhysicalParams {
    /// 150 mm wheelbase, reference point midway between the axles, steering
    /// limit reproducing a 0.3 m minimum turning radius, and a speed channel
    /// whose pole and full-throttle steady state agree with
    /// [`ModelParams::REFERENCE`].
    fn default() -> Self {
        let wheelbase = 0.15;
        let p = ModelParams::REFERENCE.0;
        Self {
            wheelbase,
            rear_to_ref: wheelbase / 2.0,
            speed_gain: 1.0,
            speed_time_constant: -1.0 / p[4],
            max_steering_angle: (wheelbase / 0.3).atan(),
            max_input_speed: (p[5] + p[6] * NOMINAL_VOLTAGE) / -p[4],
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = self.wheelbase > 0.0
            && (0.0..=self.wheelbase).contains(&self.rear_to_ref)
            && self.speed_time_constant > 0.0
            && self.max_steering_angle > 0.0
            && self.max_steering_angle < FRAC_PI_2
            && self.speed_gain.is_finite()
            && self.max_input_speed.is_finite();
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidParams(format!("{self:?}")))
        }
    }

    fn ratio(&self) -> f64 {
        self.rear_to_ref / self.wheelbase
    }

    /// Input speed `v_in(m, u)`, linear in both command and voltage.
    pub fn input_speed(&self, m: f64, u: f64) -> f64 {
        self.max_input_speed * m * (u / NOMINAL_VOLTAGE)
    }

    /// Grey-box parameters obtained by linearising this model around straight
    /// driving: `p2`, `p3` from the Taylor coefficients, `p4 = delta_max / L`,
    /// `p5 = -1/T_v`, a linear motor law and no calibration offsets.
    pub fn linearized_model_params(&self) -> ModelParams {
        let c = self.ratio();
        let dm = self.max_steering_angle;
        let t = self.speed_time_constant;
        ModelParams([
            1.0,
            c * c * dm * dm,
            c * dm,
            dm / self.wheelbase,
            -1.0 / t,
            0.0,
            self.speed_gain * self.max_input_speed / (t * NOMINAL_VOLTAGE),
            1.0,
            0.0,
            0.0,
        ])
    }
}

/// Linear steering map `delta = delta_max * d`, with `d` clamped to `[-1, 1]`.
pub fn steering_command_to_angle(d: f64, phys: &PhysicalParams) -> f64 {
    phys.max_steering_angle * clamp_unit(d)
}

fn check_steering(delta: f64) -> Result<(), DynamicsError> {
    if delta.is_finite() && delta.abs() < FRAC_PI_2 {
        Ok(())
    } else {
        Err(DynamicsError::SteeringDomain { delta })
    }
}

/// Side slip angle at the reference point, `atan((l_r/L) tan delta)`.
pub fn side_slip_exact(delta: f64, phys: &PhysicalParams) -> Result<f64, DynamicsError> {
    check_steering(delta)?;
    Ok((phys.ratio() * delta.tan()).atan())
}

/// First-order Taylor expansion of the side slip angle around `delta = 0`.
pub fn side_slip_taylor(delta: f64, phys: &PhysicalParams) -> f64 {
    phys.ratio() * delta
}

/// Speed of the reference point given the rear-axle speed.
pub fn center_speed_exact(v: f64, delta: f64, phys: &PhysicalParams) -> Result<f64, DynamicsError> {
    check_steering(delta)?;
    let k = phys.ratio() * delta.tan();
    Ok(v * (1.0 + k * k).sqrt())
}

/// Second-order Taylor expansion of [`center_speed_exact`].
pub fn center_speed_taylor(v: f64, delta: f64, phys: &PhysicalParams) -> f64 {
    let c = phys.ratio();
    v * (1.0 + c * c * delta * delta)
}

/// Right-hand side of the physical bicycle model.
pub fn physical_derivative(
    state: &VehicleState,
    input: &ControlInput,
    phys: &PhysicalParams,
) -> Result<StateDerivative, DynamicsError> {
    input.validate()?;
    let input = input.clamped();
    let delta = steering_command_to_angle(input.d, phys);
    let beta = side_slip_exact(delta, phys)?;
    let vc = center_speed_exact(state.v, delta, phys)?;
    let heading = state.psi + beta;
    let tv = phys.speed_time_constant;
    Ok(StateDerivative {
        dx: vc * heading.cos(),
        dy: vc * heading.sin(),
        dpsi: state.v * delta.tan() / phys.wheelbase,
        dv: -state.v / tv + phys.speed_gain / tv * phys.input_speed(input.m, input.u),
    })
}

/// The ten grey-box parameters `p1..p10`, stored in order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(pub [f64; 10]);

impl Default for ModelParams {
    fn default() -> Self {
        Self::INITIAL_GUESS
    }
}

/// Signed power `sign(m) * |m|^e`, defined as 0 at `m = 0`.
pub fn signed_power(m: f64, exponent: f64) -> f64 {
    if m == 0.0 {
        0.0
    } else {
        m.signum() * m.abs().powf(exponent)
    }
}

impl ModelParams {
    pub const LEN: usize = 10;

    /// Parameter vector identified on the real vehicle.
    pub const REFERENCE: ModelParams = ModelParams([
        1.00, -0.14, 0.20, 3.56, -2.19, -9.73, 2.52, 1.32, 0.03, -0.01,
    ]);

    /// Near-nominal kinematics with a stable speed pole.
    pub const INITIAL_GUESS: ModelParams =
        ModelParams([1.0, 0.0, 0.5, 3.0, -2.0, 0.0, 1.0, 1.0, 0.0, 0.0]);

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let mut p = [0.0; 10];
        p.copy_from_slice(&v[..10]);
        ModelParams(p)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Checks `p5 < 0` (stable speed pole) and `p8 > 0`.
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !self.is_finite() {
            return Err(DynamicsError::InvalidParams("non-finite parameter".into()));
        }
        if self.0[4] >= 0.0 {
            return Err(DynamicsError::InvalidParams(format!(
                "p5 must be negative, got {}",
                self.0[4]
            )));
        }
        if self.0[7] <= 0.0 {
            return Err(DynamicsError::InvalidParams(format!(
                "p8 must be positive, got {}",
                self.0[7]
            )));
        }
        Ok(())
    }

    /// Motor drive term `(p6 + p7 u) sign(m) |m|^p8`.
    pub fn motor_term(&self, m: f64, u: f64) -> f64 {
        (self.0[5] + self.0[6] * u) * signed_power(m, self.0[7])
    }

    /// Speed the vehicle settles at under constant `m` and `u`.
    pub fn steady_state_speed(&self, m: f64, u: f64) -> f64 {
        -self.motor_term(clamp_unit(m), u) / self.0[4]
    }

    /// Motor command holding speed `v` at voltage `u` (inverse of
    /// [`Self::steady_state_speed`]), clamped to `[-1, 1]`.
    pub fn steady_state_motor(&self, v: f64, u: f64) -> f64 {
        let gain = self.0[5] + self.0[6] * u;
        if gain == 0.0 || v == 0.0 {
            return 0.0;
        }
        let base = -self.0[4] * v / gain;
        clamp_unit(base.signum() * base.abs().powf(1.0 / self.0[7]))
    }

    /// Steering command that drives straight (`d + p9 = 0`).
    pub fn straight_steering(&self) -> f64 {
        -self.0[8]
    }

    /// Steering command that yields path curvature `kappa` [1/m] at small
    /// slip, clamped to `[-1, 1]`.
    pub fn steering_for_curvature(&self, kappa: f64) -> f64 {
        let p = &self.0;
        if p[3] == 0.0 {
            return clamp_unit(-p[8]);
        }
        clamp_unit(kappa / (p[3] / p[0].max(1e-6)) - p[8])
    }

    /// Partial derivatives of the continuous dynamics with respect to the
    /// state (`[row][col]` over `x, y, psi, v`) and the commands (`[row][0]`
    /// for `m`, `[row][1]` for `d`). Commands are assumed already clamped.
    pub fn jacobians(
        &self,
        state: &VehicleState,
        input: &ControlInput,
    ) -> ([[f64; 4]; 4], [[f64; 2]; 4]) {
        let [p1, p2, p3, p4, p5, p6, p7, p8, p9, p10] = self.0;
        let a = input.d + p9;
        let s = 1.0 + p2 * a * a;
        let theta = state.psi + p3 * a + p10;
        let (sin_t, cos_t) = theta.sin_cos();
        let g = p1 * state.v * s;

        let mut fx = [[0.0; 4]; 4];
        fx[0][2] = -g * sin_t;
        fx[0][3] = p1 * s * cos_t;
        fx[1][2] = g * cos_t;
        fx[1][3] = p1 * s * sin_t;
        fx[2][3] = p4 * a;
        fx[3][3] = p5;

        let mut fu = [[0.0; 2]; 4];
        let ds = 2.0 * p2 * a;
        fu[0][1] = p1 * state.v * ds * cos_t - g * sin_t * p3;
        fu[1][1] = p1 * state.v * ds * sin_t + g * cos_t * p3;
        fu[2][1] = p4 * state.v;
        let am = input.m.abs().max(1e-9);
        fu[3][0] = (p6 + p7 * input.u) * p8 * am.powf(p8 - 1.0);
        (fx, fu)
    }
}

/// Right-hand side of the grey-box model.
///
/// Parameter invariants are deliberately not enforced here: the optimizer
/// explores parameter vectors that violate them.
pub fn parameterized_derivative(
    state: &VehicleState,
    input: &ControlInput,
    p: &ModelParams,
) -> StateDerivative {
    let [p1, p2, p3, p4, p5, _, _, _, p9, p10] = p.0;
    let input = input.clamped();
    let a = input.d + p9;
    let speed = p1 * state.v * (1.0 + p2 * a * a);
    let heading = state.psi + p3 * a + p10;
    StateDerivative {
        dx: speed * heading.cos(),
        dy: speed * heading.sin(),
        dpsi: p4 * state.v * a,
        dv: p5 * state.v + p.motor_term(input.m, input.u),
    }
}

/// Common interface of the continuous-time models.
pub trait VehicleModel {
    fn derivative(
        &self,
        state: &VehicleState,
        input: &ControlInput,
    ) -> Result<StateDerivative, DynamicsError>;
}

impl VehicleModel for PhysicalParams {
    fn derivative(
        &self,
        state: &VehicleState,
        input: &ControlInput,
    ) -> Result<StateDerivative, DynamicsError> {
        physical_derivative(state, input, self)
    }
}

impl VehicleModel for ModelParams {
    fn derivative(
        &self,
        state: &VehicleState,
        input: &ControlInput,
    ) -> Result<StateDerivative, DynamicsError> {
        Ok(parameterized_derivative(state, input, self))
    }
}

/// Apply one explicit Euler step without validation.
#[inline]
pub(crate) fn euler_update(state: &VehicleState, f: &StateDerivative, dt: f64) -> VehicleState {
    VehicleState {
        x: state.x + dt * f.dx,
        y: state.y + dt * f.dy,
        psi: state.psi + dt * f.dpsi,
        v: state.v + dt * f.dv,
    }
}

/// `x_{k+1} = x_k + dt * f(x_k, u_k)`.
pub fn euler_step<M: VehicleModel + ?Sized>(
    state: &VehicleState,
    input: &ControlInput,
    model: &M,
    dt: f64,
) -> Result<VehicleState, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let f = model.derivative(state, input)?;
    let next = euler_update(state, &f, dt);
    match next.non_finite_field() {
        Some(field) => Err(DynamicsError::NonFinite { field, step: 0 }),
        None => Ok(next),
    }
}

/// Iterate [`euler_step`] over `inputs`. The result has `inputs.len() + 1`
/// states, the first being `initial`.
pub fn simulate<M: VehicleModel + ?Sized>(
    initial: &VehicleState,
    inputs: &[ControlInput],
    model: &M,
    dt: f64,
) -> Result<Vec<VehicleState>, DynamicsError> {
    if inputs.is_empty() {
        return Err(DynamicsError::InvalidInput(
            "input sequence is empty".into(),
        ));
    }
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(*initial);
    let mut s = *initial;
    for (k, u) in inputs.iter().enumerate() {
        s = euler_step(&s, u, model, dt).map_err(|e| match e {
            DynamicsError::NonFinite { field, .. } => DynamicsError::NonFinite { field, step: k },
            other => other,
        })?;
        out.push(s);
    }
    Ok(out)
}
