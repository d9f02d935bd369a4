//! Grey-box identification of [`ModelParams`] from measurement logs.
//!
//! The pipeline is: load a log, slice it into fixed-length experiments,
//! align sensor and actuation channels for a candidate delay triple, then
//! fit the parameters by single shooting with Levenberg-Marquardt. An outer
//! grid search over integer delays keeps the combination with the lowest
//! objective.
//!
//! [`ModelParams`]: crate::dynamics::ModelParams

mod fit;
mod lm;
mod log;

pub use fit::{
    delay_grid_search, estimate_parameters, fit_initial_state, objective, objective_value,
    pose_error, predict, residual_vector, FitDiagnostics, FitOptions, FitResult, GridCell,
    InitMode, InitialStates, ObjectiveValue, RankDiagnostics, WindowResidual, PENALTY_OBJECTIVE,
};
pub use lm::{LmOptions, Termination};
pub use log::{load_measurement_log, read_measurement_log, write_measurement_log, LOG_HEADER};

use serde::{Deserialize, Serialize};
use std::ops::RangeInclusive;
use thiserror::Error;

use crate::dynamics::{ControlInput, VehicleState};

/// Sample spacing tolerance within an experiment [s].
pub const SPACING_TOLERANCE: f64 = 1e-6;

/// Default experiment length in samples (2 s at 50 Hz).
pub const DEFAULT_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("measurement log line {line}: {msg}")]
    Log { line: u64, msg: String },
    #[error("window length must be at least 2, got {0}")]
    InvalidWindow(usize),
    #[error("experiment is not uniformly sampled at index {index}")]
    NonUniform { index: usize },
    #[error("delays {delays:?} leave no aligned samples in a window of {len}")]
    EmptyAlignment { delays: DelayConfig, len: usize },
    #[error("no experiments to fit")]
    NoExperiments,
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("every delay combination failed: {}", .0.iter().map(|(d, e)| format!("{d}: {e}")).collect::<Vec<_>>().join("; "))]
    AllCombinationsFailed(Vec<(DelayConfig, String)>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One row of a measurement log: IPS pose, odometer speed and the commands
/// sent at that instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub t: f64,
    #[serde(rename = "x_ips")]
    pub x: f64,
    #[serde(rename = "y_ips")]
    pub y: f64,
    #[serde(rename = "psi_ips")]
    pub psi: f64,
    #[serde(rename = "v_odo")]
    pub v: f64,
    pub m: f64,
    pub d: f64,
    pub u: f64,
}

impl MeasurementSample {
    pub fn is_finite(&self) -> bool {
        [
            self.t, self.x, self.y, self.psi, self.v, self.m, self.d, self.u,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn as_state(&self) -> VehicleState {
        VehicleState::new(self.x, self.y, self.psi, self.v)
    }

    pub fn input(&self) -> ControlInput {
        ControlInput::new(self.m, self.d, self.u)
    }
}

/// A uniformly sampled slice of a log.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    samples: Vec<MeasurementSample>,
}

impl Experiment {
    pub fn new(samples: Vec<MeasurementSample>, dt: f64) -> Result<Self, IdentError> {
        if samples.len() < 2 {
            return Err(IdentError::InvalidWindow(samples.len()));
        }
        if let Some(i) = first_gap(&samples, dt) {
            return Err(IdentError::NonUniform { index: i });
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[MeasurementSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].t
    }
}

fn first_gap(samples: &[MeasurementSample], dt: f64) -> Option<usize> {
    samples
        .windows(2)
        .position(|w| ((w[1].t - w[0].t) - dt).abs() > SPACING_TOLERANCE)
        .map(|i| i + 1)
}

/// Integer delays in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DelayConfig {
    /// IPS pose lags the true pose by this many steps.
    pub ips_delay: usize,
    /// Odometer speed lags the true speed by this many steps.
    pub local_delay: usize,
    /// Commands take effect this many steps after they are logged.
    pub actuation_delay: usize,
}

impl DelayConfig {
    pub const fn new(ips_delay: usize, local_delay: usize, actuation_delay: usize) -> Self {
        Self {
            ips_delay,
            local_delay,
            actuation_delay,
        }
    }

    /// Samples lost at the window edges when aligning with these delays.
    pub fn trim(&self) -> usize {
        self.actuation_delay + self.ips_delay.max(self.local_delay)
    }

    /// Grid order: actuation, then IPS, then local delay.
    pub fn order_key(&self) -> (usize, usize, usize) {
        (self.actuation_delay, self.ips_delay, self.local_delay)
    }

    /// Delays with the shared sensor lag moved into the actuation delay.
    ///
    /// Aligned data depend only on `actuation + ips` and `actuation + local`,
    /// so `(i, l, a)` and `(i + 1, l + 1, a - 1)` fit any log identically.
    /// The canonical member of such a family has `min(ips, local) = 0`.
    pub fn canonical(&self) -> Self {
        let s = self.ips_delay.min(self.local_delay);
        Self::new(
            self.ips_delay - s,
            self.local_delay - s,
            self.actuation_delay + s,
        )
    }

    /// Tie-break key among equal objectives: the canonical member of an
    /// observationally equivalent family first, then [`Self::order_key`].
    pub fn tie_key(&self) -> (usize, usize, usize, usize) {
        let (a, i, l) = self.order_key();
        (self.ips_delay.min(self.local_delay), a, i, l)
    }
}

impl std::fmt::Display for DelayConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(ips={}, local={}, act={})",
            self.ips_delay, self.local_delay, self.actuation_delay
        )
    }
}

/// Inclusive search ranges for the delay grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayGrid {
    pub ips: RangeInclusive<usize>,
    pub local: RangeInclusive<usize>,
    pub actuation: RangeInclusive<usize>,
}

impl Default for DelayGrid {
    fn default() -> Self {
        Self {
            ips: 0..=3,
            local: 0..=2,
            actuation: 0..=8,
        }
    }
}

impl DelayGrid {
    pub fn single(d: DelayConfig) -> Self {
        Self {
            ips: d.ips_delay..=d.ips_delay,
            local: d.local_delay..=d.local_delay,
            actuation: d.actuation_delay..=d.actuation_delay,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ips.is_empty() || self.local.is_empty() || self.actuation.is_empty()
    }

    /// Every combination, sorted by [`DelayConfig::order_key`].
    pub fn combinations(&self) -> Vec<DelayConfig> {
        let mut out = Vec::new();
        for a in self.actuation.clone() {
            for i in self.ips.clone() {
                for l in self.local.clone() {
                    out.push(DelayConfig::new(i, l, a));
                }
            }
        }
        out
    }

    /// Largest trim of any combination.
    pub fn max_trim(&self) -> usize {
        self.actuation.end() + (*self.ips.end()).max(*self.local.end())
    }

    /// Parse `ips=a..b,local=a..b,act=a..b`. Omitted keys keep their defaults.
    pub fn parse(spec: &str) -> Result<Self, IdentError> {
        let mut grid = DelayGrid::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, range) = part
                .split_once('=')
                .ok_or_else(|| IdentError::InvalidOptions(format!("bad grid entry '{part}'")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| IdentError::InvalidOptions(format!("bad grid bound '{s}'")))
            };
            let r = match range.split_once("..") {
                Some((a, b)) => parse(a)?..=parse(b.trim_start_matches('='))?,
                None => {
                    let v = parse(range)?;
                    v..=v
                }
            };
            if r.is_empty() {
                return Err(IdentError::InvalidOptions(format!(
                    "empty range in '{part}'"
                )));
            }
            match key.trim() {
                "ips" => grid.ips = r,
                "local" => grid.local = r,
                "act" | "actuation" => grid.actuation = r,
                other => {
                    return Err(IdentError::InvalidOptions(format!(
                        "unknown grid key '{other}'"
                    )))
                }
            }
        }
        Ok(grid)
    }
}

/// Weights of the pose error. Units are chosen so each term is dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorWeights {
    pub w_x: f64,
    pub w_y: f64,
    pub w_psi: f64,
    pub w_v: f64,
}

impl Default for ErrorWeights {
    fn default() -> Self {
        Self {
            w_x: 1.0,
            w_y: 1.0,
            w_psi: 1.0,
            w_v: 1.0,
        }
    }
}

impl ErrorWeights {
    pub fn validate(&self) -> Result<(), IdentError> {
        let w = [self.w_x, self.w_y, self.w_psi, self.w_v];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(IdentError::InvalidOptions(format!(
                "invalid weights {self:?}"
            )));
        }
        Ok(())
    }
}

/// Outcome of [`slice_experiments`].
#[derive(Debug, Clone, Default)]
pub struct SliceReport {
    pub experiments: Vec<Experiment>,
    /// Windows dropped because of irregular sample spacing.
    pub discarded: Vec<DiscardedWindow>,
    /// Trailing samples that did not fill a window.
    pub dropped_tail: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscardedWindow {
    pub window: usize,
    pub start_time: f64,
    /// Index within the window of the first irregular sample.
    pub gap_at: usize,
}

/// Cut `log` into consecutive, non-overlapping windows of `n_window` samples.
/// Windows whose spacing deviates from `dt` are discarded and reported.
pub fn slice_experiments(
    log: &[MeasurementSample],
    n_window: usize,
    dt: f64,
) -> Result<SliceReport, IdentError> {
    if n_window < 2 {
        return Err(IdentError::InvalidWindow(n_window));
    }
    let mut report = SliceReport {
        dropped_tail: log.len() % n_window,
        ..Default::default()
    };
    for (w, chunk) in log.chunks_exact(n_window).enumerate() {
        match first_gap(chunk, dt) {
            None => report.experiments.push(Experiment {
                samples: chunk.to_vec(),
            }),
            Some(gap_at) => report.discarded.push(DiscardedWindow {
                window: w,
                start_time: chunk[0].t,
                gap_at,
            }),
        }
    }
    Ok(report)
}

/// An experiment with sensor channels shifted to the true-state timeline and
/// the commands shifted to the instant they take effect.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedExperiment {
    /// Log time of each aligned step (time the effective command was logged).
    pub t: Vec<f64>,
    /// Measured state per aligned step.
    pub measured: Vec<VehicleState>,
    /// Command in effect during each aligned step.
    pub inputs: Vec<ControlInput>,
}

impl AlignedExperiment {
    pub fn len(&self) -> usize {
        self.measured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measured.is_empty()
    }
}

/// Align `exp` for `delays`, keeping the largest valid intersection
/// (`len - actuation - max(ips, local)` samples).
pub fn apply_delays(
    exp: &Experiment,
    delays: DelayConfig,
) -> Result<AlignedExperiment, IdentError> {
    let n = exp.len();
    let len = n.saturating_sub(delays.trim());
    apply_delays_with_len(exp, delays, len)
}

/// Align `exp` for `delays` and keep exactly `len` aligned samples.
///
/// Aligned step `j` is true step `k = actuation + j`. Its pose comes from
/// IPS sample `k + ips`, its speed from odometer sample `k + local`, and the
/// command in effect is the one logged at `k - actuation = j`.
pub fn apply_delays_with_len(
    exp: &Experiment,
    delays: DelayConfig,
    len: usize,
) -> Result<AlignedExperiment, IdentError> {
    let n = exp.len();
    if len == 0 || len + delays.trim() > n {
        return Err(IdentError::EmptyAlignment { delays, len: n });
    }
    let s = &exp.samples;
    let a = delays.actuation_delay;
    let mut out = AlignedExperiment {
        t: Vec::with_capacity(len),
        measured: Vec::with_capacity(len),
        inputs: Vec::with_capacity(len),
    };
    for j in 0..len {
        let k = a + j;
        let pose = &s[k + delays.ips_delay];
        let odo = &s[k + delays.local_delay];
        out.t.push(s[j].t);
        out.measured
            .push(VehicleState::new(pose.x, pose.y, pose.psi, odo.v));
        out.inputs.push(s[j].input());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn uniform_log(n: usize, dt: f64) -> Vec<MeasurementSample> {
        (0..n)
            .map(|k| MeasurementSample {
                t: k as f64 * dt,
                x: k as f64,
                y: -(k as f64),
                psi: 0.01 * k as f64,
                v: 1000.0 + k as f64,
                m: 0.1,
                d: 2000.0 + k as f64,
                u: 7.4,
            })
            .collect()
    }

    #[test]
    fn slicing_counts() {
        let log = uniform_log(250, 0.02);
        let rep = slice_experiments(&log, 100, 0.02).unwrap();
        assert_eq!(rep.experiments.len(), 2);
        assert_eq!(rep.dropped_tail, 50);
        assert!(rep.discarded.is_empty());

        let rep = slice_experiments(&uniform_log(100, 0.02), 100, 0.02).unwrap();
        assert_eq!(rep.experiments.len(), 1);
        let e = &rep.experiments[0];
        assert!((e.samples().last().unwrap().t - e.start_time() - 1.98).abs() < 1e-12);
        assert!((e.len() as f64 * 0.02 - 2.0).abs() < 1e-12);

        assert!(slice_experiments(&[], 100, 0.02)
            .unwrap()
            .experiments
            .is_empty());
        assert!(matches!(
            slice_experiments(&log, 1, 0.02),
            Err(IdentError::InvalidWindow(1))
        ));
    }

    #[test]
    fn slicing_discards_gapped_window() {
        let mut log = uniform_log(301, 0.02);
        log.remove(150);
        let rep = slice_experiments(&log, 100, 0.02).unwrap();
        assert_eq!(rep.experiments.len(), 2);
        assert_eq!(rep.discarded.len(), 1);
        assert_eq!(rep.discarded[0].window, 1);
        assert_eq!(rep.discarded[0].gap_at, 50);
        assert_eq!(rep.experiments[0].start_time(), 0.0);
        assert!((rep.experiments[1].start_time() - 201.0 * 0.02).abs() < 1e-12);
    }

    #[test]
    fn zero_delay_alignment_is_identity() {
        let exp = Experiment::new(uniform_log(100, 0.02), 0.02).unwrap();
        let al = apply_delays(&exp, DelayConfig::default()).unwrap();
        assert_eq!(al.len(), 100);
        for (j, s) in exp.samples().iter().enumerate() {
            assert_eq!(al.measured[j], s.as_state());
            assert_eq!(al.inputs[j], s.input());
            assert_eq!(al.t[j], s.t);
        }
    }

    #[test]
    fn reference_delays_alignment() {
        let exp = Experiment::new(uniform_log(100, 0.02), 0.02).unwrap();
        let d = DelayConfig::new(1, 0, 5);
        let al = apply_delays(&exp, d).unwrap();
        assert_eq!(al.len(), 100 - 6);
        // aligned step 0 is true step 5: pose from sample 6, speed from 5, command from 0
        assert_eq!(al.measured[0].x, 6.0);
        assert_eq!(al.measured[0].v, 1005.0);
        assert_eq!(al.inputs[0].d, 2000.0);
        let last = al.len() - 1;
        assert_eq!(al.measured[last].x, 99.0);
        assert_eq!(al.inputs[last].d, 2093.0);

        assert!(apply_delays_with_len(&exp, d, 95).is_err());
        assert_eq!(apply_delays_with_len(&exp, d, 80).unwrap().len(), 80);
        assert!(matches!(
            apply_delays(&exp, DelayConfig::new(50, 0, 50)),
            Err(IdentError::EmptyAlignment { .. })
        ));
    }

    #[test]
    fn grid_parsing_and_order() {
        let g = DelayGrid::parse("ips=0..1,local=0..0,act=2..3").unwrap();
        let c = g.combinations();
        assert_eq!(c.len(), 4);
        assert_eq!(c[0], DelayConfig::new(0, 0, 2));
        assert_eq!(c[1], DelayConfig::new(1, 0, 2));
        assert_eq!(c[3], DelayConfig::new(1, 0, 3));
        assert_eq!(DelayGrid::parse("act=5").unwrap().actuation, 5..=5);
        assert_eq!(DelayGrid::default().combinations().len(), 4 * 3 * 9);
        assert_eq!(DelayGrid::default().max_trim(), 11);
        assert!(DelayGrid::parse("foo=1..2").is_err());
        assert!(DelayGrid::parse("ips=3..1").is_err());
    }

    #[test]
    fn weights_validation() {
        ErrorWeights::default().validate().unwrap();
        assert!(ErrorWeights {
            w_x: 0.0,
            w_y: 0.0,
            w_psi: 0.0,
            w_v: 0.0
        }
        .validate()
        .is_err());
        assert!(ErrorWeights {
            w_x: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
