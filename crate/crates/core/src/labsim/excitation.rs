use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabConfig, LabError};
use crate::dynamics::{
    euler_update, parameterized_derivative, ControlInput, ModelParams, VehicleState,
    NOMINAL_VOLTAGE,
};
use crate::ident::{DelayConfig, MeasurementSample};

/// Command pattern driven during an identification run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcitationProfile {
    /// Sinusoidal full-range steering with slowly modulated speed.
    FigureEight,
    /// Band-limited random steering with a staircase speed command.
    RandomChirp,
    /// All commands zero. Carries no information.
    Zero,
}

impl std::str::FromStr for ExcitationProfile {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "figure-eight" => Ok(Self::FigureEight),
            "random-chirp" => Ok(Self::RandomChirp),
            "zero" => Ok(Self::Zero),
            other => Err(LabError::Invalid(vec![format!(
                "unknown excitation profile `{other}`"
            )])),
        }
    }
}

/// Standard deviations of the Gaussian noise added to logged channels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementNoise {
    pub pos: f64,
    pub psi: f64,
    pub v: f64,
}

impl MeasurementNoise {
    /// 1 cm, 1 degree, 0.02 m/s.
    pub fn typical() -> Self {
        Self {
            pos: 0.01,
            psi: 1f64.to_radians(),
            v: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentLogSpec {
    pub profile: ExcitationProfile,
    /// Logged duration [s].
    pub duration: f64,
    pub initial_state: VehicleState,
    pub noise: MeasurementNoise,
    /// Battery voltage range swept by the excitation [V].
    pub voltage: (f64, f64),
}

impl Default for IdentLogSpec {
    fn default() -> Self {
        Self {
            profile: ExcitationProfile::RandomChirp,
            duration: 120.0,
            initial_state: VehicleState::new(2.25, 2.0, 0.0, 0.0),
            noise: MeasurementNoise::default(),
            voltage: (6.4, 8.2),
        }
    }
}

impl IdentLogSpec {
    pub fn validate(&self) -> Result<(), LabError> {
        let mut errs = Vec::new();
        if !(self.duration.is_finite() && self.duration > 0.0) {
            errs.push(format!("duration must be positive, got {}", self.duration));
        }
        let n = self.noise;
        if [n.pos, n.psi, n.v]
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            errs.push("noise standard deviations must be finite and non-negative".into());
        }
        let (lo, hi) = self.voltage;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            errs.push(format!(
                "voltage range ({lo}, {hi}) is not a positive interval"
            ));
        }
        if !self.initial_state.is_finite() {
            errs.push("initial state is not finite".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Invalid(errs))
        }
    }
}

/// Piecewise-constant random level sequence.
fn staircase(
    rng: &mut ChaCha8Rng,
    n: usize,
    dt: f64,
    hold: (f64, f64),
    level: (f64, f64),
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let steps = ((rng.random_range(hold.0..hold.1)) / dt).round().max(1.0) as usize;
        let v = rng.random_range(level.0..=level.1);
        out.extend(std::iter::repeat_n(v, steps.min(n - out.len())));
    }
    out
}

fn excitation(
    profile: ExcitationProfile,
    n: usize,
    dt: f64,
    voltage: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<ControlInput> {
    let (v_lo, v_hi) = voltage;
    let v_mid = 0.5 * (v_lo + v_hi);
    let v_amp = 0.5 * (v_hi - v_lo);
    match profile {
        ExcitationProfile::Zero => vec![ControlInput::new(0.0, 0.0, NOMINAL_VOLTAGE); n],
        ExcitationProfile::FigureEight => (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                let d = 0.85 * (2.0 * PI * t / 8.0).sin();
                let m = 0.4 + 0.15 * (2.0 * PI * t / 11.0).sin() + 0.1 * (2.0 * PI * t / 3.7).sin();
                let u = v_mid + v_amp * (2.0 * PI * t / 37.0).sin();
                ControlInput::new(m, d, u)
            })
            .collect(),
        ExcitationProfile::RandomChirp => {
            let tones: Vec<(f64, f64, f64)> = (0..5)
                .map(|_| {
                    (
                        rng.random_range(0.05..1.2),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0.3..1.0),
                    )
                })
                .collect();
            // unit-RMS sum scaled so large steering angles are visited often
            let rms = (tones.iter().map(|t| t.2 * t.2).sum::<f64>() / 2.0).sqrt();
            let scale = 0.8 / rms;
            let m = staircase(rng, n, dt, (0.6, 2.5), (0.1, 0.8));
            let u = staircase(rng, n, dt, (3.0, 8.0), (v_lo, v_hi));
            (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    let d: f64 = tones
                        .iter()
                        .map(|(f, ph, a)| a * (2.0 * PI * f * t + ph).sin())
                        .sum();
                    ControlInput::new(m[k], (scale * d).clamp(-1.0, 1.0), u[k])
                })
                .collect()
        }
    }
}

fn normal(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma is finite and positive"))
}

/// Synthesize a measurement log by driving the grey-box model with the
/// excitation profile and injecting `delays` and Gaussian noise.
///
/// The command logged at step `k` acts on the true state from step
/// `k + actuation`. IPS and odometer rows at step `k` report the true pose
/// and speed of steps `k - ips` and `k - local` (clamped at the start).
/// Logged yaw is wrapped to `(-pi, pi]`.
pub fn generate_ident_log(
    spec: &IdentLogSpec,
    lab: &LabConfig,
    params: &ModelParams,
    delays: DelayConfig,
) -> Result<Vec<MeasurementSample>, LabError> {
    spec.validate()?;
    lab.validate()?;
    let dt = lab.dt;
    let n = (spec.duration / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(lab.seed);
    let cmds = excitation(spec.profile, n, dt, spec.voltage, &mut rng);

    let mut truth = Vec::with_capacity(n);
    let mut s = spec.initial_state;
    let idle = ControlInput::new(0.0, 0.0, cmds.first().map_or(NOMINAL_VOLTAGE, |c| c.u));
    for k in 0..n {
        truth.push(s);
        let u = if k >= delays.actuation_delay {
            cmds[k - delays.actuation_delay]
        } else {
            idle
        };
        s = euler_update(&s, &parameterized_derivative(&s, &u, params), dt);
        if !s.is_finite() {
            return Err(LabError::Diverged { step: k });
        }
    }

    let (np, npsi, nv) = (
        normal(spec.noise.pos),
        normal(spec.noise.psi),
        normal(spec.noise.v),
    );
    let mut draw = |d: &Option<Normal<f64>>| d.as_ref().map_or(0.0, |d| d.sample(&mut rng));
    let log = (0..n)
        .map(|k| {
            let pose = truth[k.saturating_sub(delays.ips_delay)];
            let odo = truth[k.saturating_sub(delays.local_delay)];
            let c = cmds[k];
            MeasurementSample {
                t: k as f64 * dt,
                x: pose.x + draw(&np),
                y: pose.y + draw(&np),
                psi: crate::wrap_angle(pose.psi + draw(&npsi)),
                v: odo.v + draw(&nv),
                m: c.m,
                d: c.d,
                u: c.u,
            }
        })
        .collect();
    Ok(log)
}
