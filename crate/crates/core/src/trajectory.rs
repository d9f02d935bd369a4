//! Reference trajectories as timed `(t, x, y, vx, vy)` tuples, interpolated
//! with cubic Hermite splines.
//!
//! Each segment depends only on its two knots, so appending points never
//! changes the interpolant over the existing time range.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Default speed bound used by [`validate`] [m/s].
pub const DEFAULT_SPEED_LIMIT: f64 = 3.7;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory has no points")]
    Empty,
    #[error("point time {t} is not after the last time {last}")]
    NonMonotonic { t: f64, last: f64 },
    #[error("point has non-finite fields")]
    NonFinite,
    #[error("trajectory csv line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl TrajectoryPoint {
    pub const fn new(t: f64, x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self { t, x, y, vx, vy }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.x.is_finite()
            && self.y.is_finite()
            && self.vx.is_finite()
            && self.vy.is_finite()
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

/// Position and velocity of the reference at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl ReferenceSample {
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Direction of travel, or `None` when the reference is (nearly) at rest.
    pub fn course(&self) -> Option<f64> {
        (self.speed() > 1e-9).then(|| self.vy.atan2(self.vx))
    }
}

/// Ordered list of points with strictly increasing time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    points: Vec<TrajectoryPoint>,
}

/// Problems reported by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    NonMonotonicTime { index: usize },
    NonFinite { index: usize },
    SpeedAboveLimit { index: usize, speed: f64 },
}

impl Trajectory {
    /// Build a trajectory, rejecting unordered or non-finite points.
    pub fn new(points: Vec<TrajectoryPoint>) -> Result<Self, TrajectoryError> {
        let mut traj = Trajectory {
            points: Vec::with_capacity(points.len()),
        };
        for p in points {
            traj.push(p)?;
        }
        if traj.points.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        Ok(traj)
    }

    /// Wrap points without checking them. [`validate`] reports what is wrong.
    pub fn from_points_unchecked(points: Vec<TrajectoryPoint>) -> Self {
        Trajectory { points }
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_time(&self) -> Option<f64> {
        self.points.first().map(|p| p.t)
    }

    pub fn end_time(&self) -> Option<f64> {
        self.points.last().map(|p| p.t)
    }

    /// In-place append. On error the trajectory is left unchanged.
    pub fn push(&mut self, pt: TrajectoryPoint) -> Result<(), TrajectoryError> {
        if !pt.is_finite() {
            return Err(TrajectoryError::NonFinite);
        }
        if let Some(last) = self.points.last() {
            if !(pt.t > last.t) {
                return Err(TrajectoryError::NonMonotonic {
                    t: pt.t,
                    last: last.t,
                });
            }
        }
        self.points.push(pt);
        Ok(())
    }

    /// Return a new trajectory with `pt` appended.
    pub fn append_point(&self, pt: TrajectoryPoint) -> Result<Trajectory, TrajectoryError> {
        let mut next = self.clone();
        next.push(pt)?;
        Ok(next)
    }

    /// Sample the spline at `t`.
    ///
    /// Outside `[t_0, t_last]` the reference holds the nearest end position
    /// with zero velocity. A query that hits a knot exactly returns the knot.
    pub fn interpolate(&self, t: f64) -> Result<ReferenceSample, TrajectoryError> {
        let pts = &self.points;
        let first = pts.first().ok_or(TrajectoryError::Empty)?;
        let last = pts[pts.len() - 1];
        if t < first.t {
            return Ok(ReferenceSample {
                x: first.x,
                y: first.y,
                vx: 0.0,
                vy: 0.0,
            });
        }
        if t > last.t {
            return Ok(ReferenceSample {
                x: last.x,
                y: last.y,
                vx: 0.0,
                vy: 0.0,
            });
        }
        // first index with pts[i].t > t; t >= t_0 guarantees i >= 1
        let i = pts.partition_point(|p| p.t <= t);
        let a = &pts[i - 1];
        if a.t == t {
            return Ok(ReferenceSample {
                x: a.x,
                y: a.y,
                vx: a.vx,
                vy: a.vy,
            });
        }
        let b = &pts[i];
        Ok(hermite_segment(a, b, t))
    }
}

/// Cubic Hermite evaluation on one segment with normalised time
/// `s = (t - t_a) / (t_b - t_a)`.
fn hermite_segment(a: &TrajectoryPoint, b: &TrajectoryPoint, t: f64) -> ReferenceSample {
    let h = b.t - a.t;
    let s = (t - a.t) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    // d/ds of the basis
    let g00 = 6.0 * s2 - 6.0 * s;
    let g10 = 3.0 * s2 - 4.0 * s + 1.0;
    let g01 = -6.0 * s2 + 6.0 * s;
    let g11 = 3.0 * s2 - 2.0 * s;
    let pos =
        |p0: f64, m0: f64, p1: f64, m1: f64| h00 * p0 + h10 * h * m0 + h01 * p1 + h11 * h * m1;
    let vel = |p0: f64, m0: f64, p1: f64, m1: f64| (g00 * p0 + g01 * p1) / h + g10 * m0 + g11 * m1;
    ReferenceSample {
        x: pos(a.x, a.vx, b.x, b.vx),
        y: pos(a.y, a.vy, b.y, b.vy),
        vx: vel(a.x, a.vx, b.x, b.vx),
        vy: vel(a.y, a.vy, b.y, b.vy),
    }
}

/// Free-function form of [`Trajectory::append_point`].
pub fn append_point(traj: &Trajectory, pt: TrajectoryPoint) -> Result<Trajectory, TrajectoryError> {
    traj.append_point(pt)
}

/// Free-function form of [`Trajectory::interpolate`].
pub fn interpolate(traj: &Trajectory, t: f64) -> Result<ReferenceSample, TrajectoryError> {
    traj.interpolate(t)
}

/// Report every problem with `traj`, using `speed_limit` for the speed check.
pub fn validate_with_limit(traj: &Trajectory, speed_limit: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    if traj.points.is_empty() {
        out.push(Violation::Empty);
    }
    for (i, p) in traj.points.iter().enumerate() {
        if !p.is_finite() {
            out.push(Violation::NonFinite { index: i });
            continue;
        }
        if i > 0 && !(p.t > traj.points[i - 1].t) {
            out.push(Violation::NonMonotonicTime { index: i });
        }
        let speed = p.speed();
        if speed > speed_limit {
            out.push(Violation::SpeedAboveLimit { index: i, speed });
        }
    }
    out
}

/// [`validate_with_limit`] with the vehicle's top speed.
pub fn validate(traj: &Trajectory) -> Vec<Violation> {
    validate_with_limit(traj, DEFAULT_SPEED_LIMIT)
}

/// Read a `t,x,y,vx,vy` CSV.
pub fn read_csv<R: Read>(reader: R) -> Result<Trajectory, TrajectoryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| TrajectoryError::Csv {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "x", "y", "vx", "vy"] {
        return Err(TrajectoryError::Csv {
            line: 1,
            msg: format!(
                "expected header t,x,y,vx,vy, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut traj = Trajectory::default();
    for rec in rdr.deserialize::<TrajectoryPoint>() {
        let pt = rec.map_err(|e| TrajectoryError::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = traj.len() as u64 + 2;
        traj.push(pt).map_err(|e| TrajectoryError::Csv {
            line,
            msg: e.to_string(),
        })?;
    }
    if traj.is_empty() {
        return Err(TrajectoryError::Empty);
    }
    Ok(traj)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Trajectory, TrajectoryError> {
    read_csv(std::fs::File::open(path)?)
}

pub fn write_csv<W: Write>(traj: &Trajectory, writer: W) -> Result<(), TrajectoryError> {
    let mut w = csv::Writer::from_writer(writer);
    for p in &traj.points {
        w.serialize(p).map_err(|e| TrajectoryError::Csv {
            line: 0,
            msg: e.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Built-in reference shapes.
pub mod shapes {
    use super::{Trajectory, TrajectoryPoint};
    use std::f64::consts::PI;

    /// Lemniscate of Gerono centred at `(cx, cy)` with half-width `a`,
    /// re-timed so the path speed is approximately `speed`. Knots are spaced
    /// `knot_dt` apart and `laps` full loops are generated.
    pub fn figure_eight(
        cx: f64,
        cy: f64,
        a: f64,
        speed: f64,
        laps: f64,
        knot_dt: f64,
    ) -> Trajectory {
        figure_eight_ramped(cx, cy, a, speed, laps, knot_dt, 0.0)
    }

    /// [`figure_eight`] starting from rest: the path speed rises linearly
    /// from 0 to `speed` over `ramp` seconds.
    pub fn figure_eight_ramped(
        cx: f64,
        cy: f64,
        a: f64,
        speed: f64,
        laps: f64,
        knot_dt: f64,
        ramp: f64,
    ) -> Trajectory {
        // x = a sin(s), y = a sin(s) cos(s); parameter s advanced by arc length
        let fine = 20_000;
        let total_s = 2.0 * PI * laps;
        let mut arc = Vec::with_capacity(fine + 1);
        let mut length = 0.0;
        arc.push(0.0);
        let pos = |s: f64| (a * s.sin(), a * s.sin() * s.cos());
        for i in 1..=fine {
            let (x0, y0) = pos(total_s * (i - 1) as f64 / fine as f64);
            let (x1, y1) = pos(total_s * i as f64 / fine as f64);
            length += (x1 - x0).hypot(y1 - y0);
            arc.push(length);
        }
        let ramp = ramp.max(0.0);
        // distance and path speed at time t
        let progress = |t: f64| {
            if t < ramp {
                (speed * t * t / (2.0 * ramp), speed * t / ramp)
            } else {
                (speed * (t - ramp / 2.0), speed)
            }
        };
        let duration = length / speed + ramp / 2.0;
        let n = (duration / knot_dt).floor() as usize;
        let mut pts = Vec::with_capacity(n + 1);
        let mut j = 0;
        for k in 0..=n {
            let t = k as f64 * knot_dt;
            let (dist, v) = progress(t);
            let target = dist.min(length);
            while j + 1 < fine && arc[j + 1] < target {
                j += 1;
            }
            let seg = (arc[j + 1] - arc[j]).max(1e-15);
            let frac = ((target - arc[j]) / seg).clamp(0.0, 1.0);
            let s = total_s * (j as f64 + frac) / fine as f64;
            let (dxs, dys) = (a * s.cos(), a * (2.0 * s).cos());
            let norm = dxs.hypot(dys).max(1e-12);
            let (x, y) = pos(s);
            pts.push(TrajectoryPoint::new(
                t,
                cx + x,
                cy + y,
                v * dxs / norm,
                v * dys / norm,
            ));
        }
        Trajectory::new(pts).expect("figure-eight knots are ordered")
    }

    /// Counter-clockwise circle starting at angle 0 on the rim.
    pub fn circle(
        cx: f64,
        cy: f64,
        radius: f64,
        speed: f64,
        duration: f64,
        knot_dt: f64,
    ) -> Trajectory {
        let omega = speed / radius;
        let n = (duration / knot_dt).floor() as usize;
        let pts = (0..=n)
            .map(|k| {
                let t = k as f64 * knot_dt;
                let th = omega * t;
                TrajectoryPoint::new(
                    t,
                    cx + radius * th.cos(),
                    cy + radius * th.sin(),
                    -speed * th.sin(),
                    speed * th.cos(),
                )
            })
            .collect();
        Trajectory::new(pts).expect("circle knots are ordered")
    }

    /// Straight line from `(x0, y0)` along `heading` at constant speed.
    pub fn straight(
        x0: f64,
        y0: f64,
        heading: f64,
        speed: f64,
        duration: f64,
        knot_dt: f64,
    ) -> Trajectory {
        let (s, c) = heading.sin_cos();
        let n = (duration / knot_dt).floor() as usize;
        let pts = (0..=n)
            .map(|k| {
                let t = k as f64 * knot_dt;
                TrajectoryPoint::new(
                    t,
                    x0 + c * speed * t,
                    y0 + s * speed * t,
                    c * speed,
                    s * speed,
                )
            })
            .collect();
        Trajectory::new(pts).expect("line knots are ordered")
    }
}
