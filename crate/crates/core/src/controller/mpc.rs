use serde::{Deserialize, Serialize};

use super::{ControllerError, StateEstimate};
use crate::dynamics::{
    euler_update, parameterized_derivative, ControlInput, ModelParams, VehicleState,
};
use crate::trajectory::Trajectory;
use crate::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Prediction horizon in ticks.
    pub horizon: usize,
    pub dt: f64,
    /// Weight on squared position error [1/m^2].
    pub w_pos: f64,
    /// Weight on `2 (1 - cos(dpsi))`, which is `dpsi^2` for small errors.
    pub w_psi: f64,
    pub w_v: f64,
    /// Weights on the deviation of `m` and `d` from the steady-state
    /// feedforward.
    pub w_m: f64,
    pub w_d: f64,
    /// Weights on tick-to-tick changes of `m` and `d`.
    pub w_dm: f64,
    pub w_dd: f64,
    pub m_bounds: (f64, f64),
    pub d_bounds: (f64, f64),
    /// Queued commands simulated before the horizon starts.
    pub delay_steps: usize,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Stop when a projected step moves no input by more than this.
    pub tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            dt: crate::DEFAULT_DT,
            w_pos: 100.0,
            w_psi: 1.0,
            w_v: 1.0,
            w_m: 0.01,
            w_d: 0.01,
            w_dm: 0.5,
            w_dd: 0.5,
            m_bounds: (-1.0, 1.0),
            d_bounds: (-1.0, 1.0),
            delay_steps: 5,
            max_iter: 30,
            armijo: 1e-4,
            tol: 1e-10,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let mut errs = Vec::new();
        if self.horizon == 0 {
            errs.push("horizon must be at least 1".to_string());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            errs.push(format!("dt must be positive, got {}", self.dt));
        }
        let w = [
            self.w_pos, self.w_psi, self.w_v, self.w_m, self.w_d, self.w_dm, self.w_dd,
        ];
        if w.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            errs.push("weights must be finite and non-negative".into());
        }
        for (name, (lo, hi)) in [("m_bounds", self.m_bounds), ("d_bounds", self.d_bounds)] {
            if !(-1.0 <= lo && lo <= hi && hi <= 1.0) {
                errs.push(format!(
                    "{name} ({lo}, {hi}) must be an interval inside [-1, 1]"
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ControllerError::InvalidConfig(errs))
        }
    }

    fn project(&self, u: [f64; 2]) -> [f64; 2] {
        [
            u[0].clamp(self.m_bounds.0, self.m_bounds.1),
            u[1].clamp(self.d_bounds.0, self.d_bounds.1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    /// First planned command.
    pub input: ControlInput,
    /// Planned `(m, d)` over the horizon.
    pub plan: Vec<[f64; 2]>,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    /// True when the solver hit a non-finite value and returned `(0, 0)`.
    pub safe_stop: bool,
}

impl MpcSolution {
    fn safe_stop(voltage: f64) -> Self {
        Self {
            input: ControlInput::new(0.0, 0.0, voltage),
            plan: Vec::new(),
            cost: f64::NAN,
            initial_cost: f64::NAN,
            iterations: 0,
            safe_stop: true,
        }
    }

    /// Plan shifted one tick for use as the next warm start.
    pub fn shifted_plan(&self) -> Vec<[f64; 2]> {
        let mut p: Vec<[f64; 2]> = self.plan.iter().skip(1).copied().collect();
        if let Some(last) = self.plan.last() {
            p.push(*last);
        }
        p
    }
}

/// Tracking target for one predicted state, expressed in model coordinates.
#[derive(Debug, Clone, Copy)]
struct Stage {
    x: f64,
    y: f64,
    /// `None` when the reference is at rest.
    psi: Option<f64>,
    v: f64,
    m_ff: f64,
    d_ff: f64,
}

struct Problem<'a> {
    x0: VehicleState,
    stages: Vec<Stage>,
    p: &'a ModelParams,
    cfg: &'a MpcConfig,
    prev: [f64; 2],
    voltage: f64,
}

impl Problem<'_> {
    fn input(&self, u: [f64; 2]) -> ControlInput {
        ControlInput::new(u[0], u[1], self.voltage)
    }

    fn rollout(&self, u: &[[f64; 2]]) -> Vec<VehicleState> {
        let mut xs = Vec::with_capacity(u.len() + 1);
        let mut s = self.x0;
        xs.push(s);
        for ui in u {
            s = euler_update(
                &s,
                &parameterized_derivative(&s, &self.input(*ui), self.p),
                self.cfg.dt,
            );
            xs.push(s);
        }
        xs
    }

    fn stage_cost(&self, s: &VehicleState, r: &Stage) -> f64 {
        let c = self.cfg;
        let mut j =
            c.w_pos * ((s.x - r.x).powi(2) + (s.y - r.y).powi(2)) + c.w_v * (s.v - r.v).powi(2);
        if let Some(psi) = r.psi {
            j += c.w_psi * 2.0 * (1.0 - (s.psi - psi).cos());
        }
        j
    }

    fn stage_grad(&self, s: &VehicleState, r: &Stage) -> [f64; 4] {
        let c = self.cfg;
        let gpsi = r.psi.map_or(0.0, |psi| 2.0 * c.w_psi * (s.psi - psi).sin());
        [
            2.0 * c.w_pos * (s.x - r.x),
            2.0 * c.w_pos * (s.y - r.y),
            gpsi,
            2.0 * c.w_v * (s.v - r.v),
        ]
    }

    fn input_cost(&self, u: &[[f64; 2]]) -> f64 {
        let c = self.cfg;
        let mut j = 0.0;
        let mut prev = self.prev;
        for (ui, r) in u.iter().zip(&self.stages) {
            j += c.w_m * (ui[0] - r.m_ff).powi(2) + c.w_d * (ui[1] - r.d_ff).powi(2);
            j += c.w_dm * (ui[0] - prev[0]).powi(2) + c.w_dd * (ui[1] - prev[1]).powi(2);
            prev = *ui;
        }
        j
    }

    fn cost(&self, u: &[[f64; 2]]) -> f64 {
        let xs = self.rollout(u);
        let track: f64 = xs[1..]
            .iter()
            .zip(&self.stages)
            .map(|(s, r)| self.stage_cost(s, r))
            .sum();
        track + self.input_cost(u)
    }

    /// Cost and gradient by the discrete adjoint of the Euler rollout.
    fn cost_grad(&self, u: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>) {
        let c = self.cfg;
        let n = u.len();
        let xs = self.rollout(u);
        let cost = xs[1..]
            .iter()
            .zip(&self.stages)
            .map(|(s, r)| self.stage_cost(s, r))
            .sum::<f64>()
            + self.input_cost(u);

        let mut g = vec![[0.0; 2]; n];
        let mut lam = self.stage_grad(&xs[n], &self.stages[n - 1]);
        for i in (0..n).rev() {
            let (fx, fu) = self.p.jacobians(&xs[i], &self.input(u[i]));
            for k in 0..2 {
                g[i][k] = c.dt * (0..4).map(|r| fu[r][k] * lam[r]).sum::<f64>();
            }
            if i > 0 {
                let mut next = self.stage_grad(&xs[i], &self.stages[i - 1]);
                for (col, nx) in next.iter_mut().enumerate() {
                    *nx += lam[col] + c.dt * (0..4).map(|r| fx[r][col] * lam[r]).sum::<f64>();
                }
                lam = next;
            }
        }
        let mut prev = self.prev;
        for i in 0..n {
            let r = &self.stages[i];
            g[i][0] += 2.0 * c.w_m * (u[i][0] - r.m_ff) + 2.0 * c.w_dm * (u[i][0] - prev[0]);
            g[i][1] += 2.0 * c.w_d * (u[i][1] - r.d_ff) + 2.0 * c.w_dd * (u[i][1] - prev[1]);
            if i + 1 < n {
                g[i][0] -= 2.0 * c.w_dm * (u[i + 1][0] - u[i][0]);
                g[i][1] -= 2.0 * c.w_dd * (u[i + 1][1] - u[i][1]);
            }
            prev = u[i];
        }
        (cost, g)
    }
}

fn stage_targets(
    traj: &Trajectory,
    t0: f64,
    n: usize,
    p: &ModelParams,
    dt: f64,
    voltage: f64,
) -> Option<Vec<Stage>> {
    let [p1, p2, p3, _, _, _, _, _, p9, p10] = p.0;
    (1..=n)
        .map(|i| {
            let t = t0 + i as f64 * dt;
            let r = traj.interpolate(t).ok()?;
            let ahead = traj.interpolate(t + dt).ok()?;
            let speed = r.speed();
            let kappa = match (r.course(), ahead.course()) {
                (Some(c0), Some(c1)) => wrap_angle(c1 - c0) / (speed * dt),
                _ => 0.0,
            };
            let d_ff = p.steering_for_curvature(kappa);
            let a = d_ff + p9;
            let v = speed / (p1 * (1.0 + p2 * a * a)).max(1e-6);
            Some(Stage {
                x: r.x,
                y: r.y,
                psi: r.course().map(|c| c - p10 - p3 * a),
                v,
                m_ff: p.steady_state_motor(v, voltage),
                d_ff,
            })
        })
        .collect()
}

/// One MPC solve.
///
/// The estimate is first advanced through the first `cfg.delay_steps`
/// entries of `pending` (commands already sent but not yet acting). The
/// plan is then optimised by projected gradient descent with
/// Barzilai-Borwein steps and Armijo backtracking, starting from `warm` when
/// its length matches the horizon and from the steady-state feedforward
/// otherwise. `prev_input` anchors the rate penalty and supplies the battery
/// voltage.
pub fn mpc_step(
    est: &StateEstimate,
    pending: &[ControlInput],
    traj: &Trajectory,
    p: &ModelParams,
    cfg: &MpcConfig,
    prev_input: ControlInput,
    warm: Option<&[[f64; 2]]>,
) -> MpcSolution {
    let voltage = prev_input.u;
    let n = cfg.horizon.max(1);
    if !est.state.is_finite() || traj.is_empty() {
        return MpcSolution::safe_stop(voltage);
    }
    let delay = cfg.delay_steps.min(pending.len());
    let mut x0 = est.state;
    for c in &pending[..delay] {
        x0 = euler_update(&x0, &parameterized_derivative(&x0, c, p), cfg.dt);
    }
    let t0 = (est.step + delay as u64) as f64 * cfg.dt;
    let Some(stages) = stage_targets(traj, t0, n, p, cfg.dt, voltage) else {
        return MpcSolution::safe_stop(voltage);
    };
    let pc = prev_input.clamped();
    let problem = Problem {
        x0,
        stages,
        p,
        cfg,
        prev: [pc.m, pc.d],
        voltage,
    };

    let mut u: Vec<[f64; 2]> = match warm {
        Some(w) if w.len() == n => w.iter().map(|ui| cfg.project(*ui)).collect(),
        _ => problem
            .stages
            .iter()
            .map(|r| cfg.project([r.m_ff, r.d_ff]))
            .collect(),
    };
    let (mut cost, mut g) = problem.cost_grad(&u);
    let initial_cost = cost;
    if !cost.is_finite() {
        return MpcSolution::safe_stop(voltage);
    }
    let g_inf = g.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut alpha = if g_inf > 0.0 { 0.05 / g_inf } else { 1.0 };
    let mut iterations = 0;
    'outer: while iterations < cfg.max_iter {
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<[f64; 2]> = u
                .iter()
                .zip(&g)
                .map(|(ui, gi)| cfg.project([ui[0] - alpha * gi[0], ui[1] - alpha * gi[1]]))
                .collect();
            let mut step_inf = 0.0f64;
            let mut decrease = 0.0;
            for ((t, ui), gi) in trial.iter().zip(&u).zip(&g) {
                for k in 0..2 {
                    step_inf = step_inf.max((t[k] - ui[k]).abs());
                    decrease += gi[k] * (t[k] - ui[k]);
                }
            }
            if step_inf < cfg.tol {
                break 'outer;
            }
            let c = problem.cost(&trial);
            if c.is_finite() && c <= cost + cfg.armijo * decrease {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        let Some(next) = accepted else { break };
        let (c_next, g_next) = problem.cost_grad(&next);
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..n {
            for k in 0..2 {
                let s = next[i][k] - u[i][k];
                ss += s * s;
                sy += s * (g_next[i][k] - g[i][k]);
            }
        }
        alpha = if sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e4)
        } else {
            alpha * 2.0
        };
        u = next;
        cost = c_next;
        g = g_next;
        iterations += 1;
    }
    if !cost.is_finite() || u.iter().flatten().any(|v| !v.is_finite()) {
        return MpcSolution::safe_stop(voltage);
    }
    MpcSolution {
        input: ControlInput::new(u[0][0], u[0][1], voltage),
        plan: u,
        cost,
        initial_cost,
        iterations,
        safe_stop: false,
    }
}
