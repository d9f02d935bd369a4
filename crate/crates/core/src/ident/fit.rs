use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::lm::{self, LeastSquaresProblem, LmOptions, Termination};
use super::{
    apply_delays_with_len, AlignedExperiment, DelayConfig, DelayGrid, ErrorWeights, Experiment,
    IdentError,
};
use crate::dynamics::{euler_update, parameterized_derivative, ModelParams, VehicleState};
use crate::exec::Exec;

/// Objective reported when a simulation diverges.
pub const PENALTY_OBJECTIVE: f64 = 1e12;

const CHANNELS: usize = 4;
const NP: usize = ModelParams::LEN;

/// Weighted pose and speed error with a `2 pi`-periodic yaw term:
/// `w_x dx^2 + w_y dy^2 + w_psi sin^2(dpsi / 2) + w_v dv^2`.
pub fn pose_error(sim: &VehicleState, meas: &VehicleState, w: &ErrorWeights) -> f64 {
    let dx = sim.x - meas.x;
    let dy = sim.y - meas.y;
    let s = ((sim.psi - meas.psi) / 2.0).sin();
    let dv = sim.v - meas.v;
    w.w_x * dx * dx + w.w_y * dy * dy + w.w_psi * s * s + w.w_v * dv * dv
}

/// How the initial state of each experiment is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Fixed to the first aligned measurement.
    #[default]
    Measured,
    /// Estimated alongside the parameters.
    Free,
}

/// Initial states used when evaluating the objective.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialStates<'a> {
    Measured,
    Given(&'a [VehicleState]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub init_mode: InitMode,
    pub lm: LmOptions,
    pub dt: f64,
    /// Aligned samples per experiment. `None` keeps the largest intersection
    /// allowed by the delays.
    pub horizon: Option<usize>,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            init_mode: InitMode::Measured,
            lm: LmOptions::default(),
            dt: crate::DEFAULT_DT,
            horizon: None,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    /// True when a simulation diverged and `value` is [`PENALTY_OBJECTIVE`].
    pub penalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResidual {
    pub index: usize,
    pub start_time: f64,
    pub cost: f64,
    pub rms_x: f64,
    pub rms_y: f64,
    /// RMS of the wrapped yaw error [rad].
    pub rms_psi: f64,
    pub rms_v: f64,
}

/// Identifiability summary of the parameter block of `J^T J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostics {
    pub numerical_rank: usize,
    pub rank_deficient: bool,
    /// Condition number of the column-normalised normal matrix.
    pub condition: f64,
    /// Parameters (0-based) whose Jacobian column vanishes.
    pub zero_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub delays: DelayConfig,
    pub objective: Option<f64>,
    pub termination: Option<Termination>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub termination: Termination,
    pub initial_objective: f64,
    /// Objective after each accepted step.
    pub objective_history: Vec<f64>,
    pub singular_solves: usize,
    pub final_damping: f64,
    pub penalized: bool,
    pub samples_per_window: usize,
    pub rank: RankDiagnostics,
    /// Every evaluated delay combination (grid search only).
    pub grid: Vec<GridCell>,
    /// Combinations whose objective equals the selected one exactly.
    pub ties: Vec<DelayConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub delays: DelayConfig,
    pub objective: f64,
    pub windows: Vec<WindowResidual>,
    /// Estimated initial states in free mode.
    pub initial_states: Option<Vec<VehicleState>>,
    pub diagnostics: FitDiagnostics,
}

/// Simulate one aligned experiment from `x0` with the command sequence.
/// Returns `None` if the state becomes non-finite.
pub(crate) fn rollout(
    al: &AlignedExperiment,
    p: &ModelParams,
    x0: VehicleState,
    dt: f64,
) -> Option<Vec<VehicleState>> {
    let mut out = Vec::with_capacity(al.len());
    let mut s = x0;
    out.push(s);
    for u in &al.inputs[..al.len() - 1] {
        let f = parameterized_derivative(&s, u, p);
        s = euler_update(&s, &f, dt);
        if !s.is_finite() {
            return None;
        }
        out.push(s);
    }
    Some(out)
}

/// Model prediction for an aligned experiment, starting from the first
/// measurement unless `x0` is given.
pub fn predict(
    al: &AlignedExperiment,
    p: &ModelParams,
    x0: Option<VehicleState>,
    dt: f64,
) -> Option<Vec<VehicleState>> {
    rollout(al, p, x0.unwrap_or(al.measured[0]), dt)
}

#[derive(Debug, Clone, Copy)]
struct SqrtWeights([f64; CHANNELS]);

impl SqrtWeights {
    fn new(w: &ErrorWeights) -> Self {
        Self([w.w_x.sqrt(), w.w_y.sqrt(), w.w_psi.sqrt(), w.w_v.sqrt()])
    }

    /// Residuals whose squares sum to [`pose_error`].
    #[inline]
    fn residuals(&self, sim: &VehicleState, meas: &VehicleState, out: &mut [f64]) {
        out[0] = self.0[0] * (sim.x - meas.x);
        out[1] = self.0[1] * (sim.y - meas.y);
        out[2] = self.0[2] * ((sim.psi - meas.psi) / 2.0).sin();
        out[3] = self.0[3] * (sim.v - meas.v);
    }
}

fn window_residuals(
    al: &AlignedExperiment,
    p: &ModelParams,
    x0: VehicleState,
    w: &SqrtWeights,
    dt: f64,
    out: &mut [f64],
) -> bool {
    let Some(traj) = rollout(al, p, x0, dt) else {
        return false;
    };
    for (j, (sim, meas)) in traj.iter().zip(&al.measured).enumerate() {
        w.residuals(sim, meas, &mut out[j * CHANNELS..(j + 1) * CHANNELS]);
    }
    out.iter().all(|r| r.is_finite())
}

struct ShootingProblem<'a> {
    windows: &'a [AlignedExperiment],
    /// Residual offset of each window.
    offsets: Vec<usize>,
    n_residuals: usize,
    weights: SqrtWeights,
    dt: f64,
    free: bool,
}

impl<'a> ShootingProblem<'a> {
    fn new(windows: &'a [AlignedExperiment], w: &ErrorWeights, dt: f64, free: bool) -> Self {
        let mut offsets = Vec::with_capacity(windows.len());
        let mut n = 0;
        for al in windows {
            offsets.push(n);
            n += al.len() * CHANNELS;
        }
        Self {
            windows,
            offsets,
            n_residuals: n,
            weights: SqrtWeights::new(w),
            dt,
            free,
        }
    }

    fn window_len(&self, i: usize) -> usize {
        self.windows[i].len() * CHANNELS
    }

    fn x0(&self, x: &[f64], i: usize) -> VehicleState {
        if self.free {
            let o = NP + CHANNELS * i;
            VehicleState::new(x[o], x[o + 1], x[o + 2], x[o + 3])
        } else {
            self.windows[i].measured[0]
        }
    }

    fn pack(&self, p: &ModelParams, init: &InitialStates) -> Vec<f64> {
        let mut x = p.0.to_vec();
        if self.free {
            for (i, al) in self.windows.iter().enumerate() {
                let s = match init {
                    InitialStates::Given(states) => states[i],
                    InitialStates::Measured => al.measured[0],
                };
                x.extend_from_slice(&s.to_array());
            }
        }
        x
    }

    fn residuals_with(&self, p: &ModelParams, x: &[f64]) -> Option<Vec<f64>> {
        let mut r = vec![0.0; self.n_residuals];
        for (i, al) in self.windows.iter().enumerate() {
            let o = self.offsets[i];
            let ok = window_residuals(
                al,
                p,
                self.x0(x, i),
                &self.weights,
                self.dt,
                &mut r[o..o + self.window_len(i)],
            );
            if !ok {
                return None;
            }
        }
        Some(r)
    }
}

impl LeastSquaresProblem for ShootingProblem<'_> {
    fn n_params(&self) -> usize {
        if self.free {
            NP + CHANNELS * self.windows.len()
        } else {
            NP
        }
    }

    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.residuals_with(&ModelParams::from_slice(x), x)
    }

    fn normal_equations(
        &self,
        x: &[f64],
        r: &[f64],
        opts: &LmOptions,
        exec: Exec,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_params();
        let p = ModelParams::from_slice(x);

        // Parameter columns: every window depends on every parameter.
        let cols: Vec<Vec<f64>> = exec.map_range(NP, |c| {
            let h = opts.fd_step(x[c]);
            let mut pp = p;
            pp.0[c] += h;
            match self.residuals_with(&pp, x) {
                Some(rp) => rp.iter().zip(r).map(|(a, b)| (a - b) / h).collect(),
                None => vec![0.0; self.n_residuals],
            }
        });

        let mut jtj = DMatrix::zeros(n, n);
        let mut jtr = DVector::zeros(n);
        for a in 0..NP {
            jtr[a] = dot(&cols[a], r);
            for b in a..NP {
                let v = dot(&cols[a], &cols[b]);
                jtj[(a, b)] = v;
                jtj[(b, a)] = v;
            }
        }

        if self.free {
            // Initial-state columns only touch their own window.
            let blocks: Vec<Vec<Vec<f64>>> = exec.map_range(self.windows.len(), |i| {
                let al = &self.windows[i];
                let o = self.offsets[i];
                let len = self.window_len(i);
                let base = self.x0(x, i).to_array();
                (0..CHANNELS)
                    .map(|c| {
                        let h = opts.fd_step(base[c]);
                        let mut s = base;
                        s[c] += h;
                        let mut out = vec![0.0; len];
                        if window_residuals(
                            al,
                            &p,
                            VehicleState::from_array(s),
                            &self.weights,
                            self.dt,
                            &mut out,
                        ) {
                            out.iter()
                                .zip(&r[o..o + len])
                                .map(|(a, b)| (a - b) / h)
                                .collect()
                        } else {
                            vec![0.0; len]
                        }
                    })
                    .collect()
            });
            for (i, block) in blocks.iter().enumerate() {
                let o = self.offsets[i];
                let len = self.window_len(i);
                let base = NP + CHANNELS * i;
                for a in 0..CHANNELS {
                    jtr[base + a] = dot(&block[a], &r[o..o + len]);
                    for b in a..CHANNELS {
                        let v = dot(&block[a], &block[b]);
                        jtj[(base + a, base + b)] = v;
                        jtj[(base + b, base + a)] = v;
                    }
                    for (c, col) in cols.iter().enumerate() {
                        let v = dot(&block[a], &col[o..o + len]);
                        jtj[(base + a, c)] = v;
                        jtj[(c, base + a)] = v;
                    }
                }
            }
        }
        (jtj, jtr)
    }
}

/// Least-squares initial state of one aligned experiment with the
/// parameters held fixed.
struct InitialStateProblem<'a> {
    al: &'a AlignedExperiment,
    p: &'a ModelParams,
    weights: SqrtWeights,
    dt: f64,
}

impl LeastSquaresProblem for InitialStateProblem<'_> {
    fn n_params(&self) -> usize {
        CHANNELS
    }

    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut r = vec![0.0; self.al.len() * CHANNELS];
        let x0 = VehicleState::new(x[0], x[1], x[2], x[3]);
        window_residuals(self.al, self.p, x0, &self.weights, self.dt, &mut r).then_some(r)
    }

    fn normal_equations(
        &self,
        x: &[f64],
        r: &[f64],
        opts: &LmOptions,
        _exec: Exec,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let cols: Vec<Vec<f64>> = (0..CHANNELS)
            .map(|c| {
                let h = opts.fd_step(x[c]);
                let mut xp = x.to_vec();
                xp[c] += h;
                match self.residuals(&xp) {
                    Some(rp) => rp.iter().zip(r).map(|(a, b)| (a - b) / h).collect(),
                    None => vec![0.0; r.len()],
                }
            })
            .collect();
        let jtj = DMatrix::from_fn(CHANNELS, CHANNELS, |a, b| dot(&cols[a], &cols[b]));
        let jtr = DVector::from_fn(CHANNELS, |a, _| dot(&cols[a], r));
        (jtj, jtr)
    }
}

/// Initial state that best explains `al` under `p`, starting the search from
/// the first measurement. Returns the first measurement if the search cannot
/// start.
pub fn fit_initial_state(
    al: &AlignedExperiment,
    p: &ModelParams,
    w: &ErrorWeights,
    dt: f64,
    lm_opts: &LmOptions,
) -> VehicleState {
    let problem = InitialStateProblem {
        al,
        p,
        weights: SqrtWeights::new(w),
        dt,
    };
    let rep = lm::solve(
        &problem,
        &al.measured[0].to_array(),
        lm_opts,
        Exec::Sequential,
    );
    if rep.cost.is_finite() {
        VehicleState::new(rep.x[0], rep.x[1], rep.x[2], rep.x[3])
    } else {
        al.measured[0]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn align_all(
    experiments: &[Experiment],
    delays: DelayConfig,
    horizon: Option<usize>,
) -> Result<Vec<AlignedExperiment>, IdentError> {
    if experiments.is_empty() {
        return Err(IdentError::NoExperiments);
    }
    experiments
        .iter()
        .map(|e| {
            let len = horizon.unwrap_or_else(|| e.len().saturating_sub(delays.trim()));
            apply_delays_with_len(e, delays, len)
        })
        .collect()
}

/// Objective over already aligned experiments.
pub fn objective_value(
    windows: &[AlignedExperiment],
    p: &ModelParams,
    w: &ErrorWeights,
    init: &InitialStates,
    dt: f64,
) -> ObjectiveValue {
    let mut total = 0.0;
    for (i, al) in windows.iter().enumerate() {
        let x0 = match init {
            InitialStates::Given(s) => s[i],
            InitialStates::Measured => al.measured[0],
        };
        let Some(traj) = rollout(al, p, x0, dt) else {
            return ObjectiveValue {
                value: PENALTY_OBJECTIVE,
                penalized: true,
            };
        };
        total += traj
            .iter()
            .zip(&al.measured)
            .map(|(s, m)| pose_error(s, m, w))
            .sum::<f64>();
    }
    if total.is_finite() {
        ObjectiveValue {
            value: total,
            penalized: false,
        }
    } else {
        ObjectiveValue {
            value: PENALTY_OBJECTIVE,
            penalized: true,
        }
    }
}

/// Sum of [`pose_error`] over every aligned sample of every experiment, each
/// simulated from its initial state with the explicit Euler model.
pub fn objective(
    experiments: &[Experiment],
    p: &ModelParams,
    delays: DelayConfig,
    w: &ErrorWeights,
    init: &InitialStates,
    options: &FitOptions,
) -> Result<ObjectiveValue, IdentError> {
    let windows = align_all(experiments, delays, options.horizon)?;
    if let InitialStates::Given(s) = init {
        if s.len() != windows.len() {
            return Err(IdentError::InvalidOptions(format!(
                "{} initial states for {} experiments",
                s.len(),
                windows.len()
            )));
        }
    }
    Ok(objective_value(&windows, p, w, init, options.dt))
}

/// Stacked residual vector (4 channels per aligned sample) at `p`.
pub fn residual_vector(
    windows: &[AlignedExperiment],
    p: &ModelParams,
    w: &ErrorWeights,
    dt: f64,
) -> Option<Vec<f64>> {
    ShootingProblem::new(windows, w, dt, false).residuals_with(p, &p.0)
}

fn rank_diagnostics(jtj: Option<&DMatrix<f64>>) -> RankDiagnostics {
    let Some(jtj) = jtj else {
        return RankDiagnostics {
            numerical_rank: 0,
            rank_deficient: true,
            condition: f64::INFINITY,
            zero_columns: (0..NP).collect(),
        };
    };
    let block = jtj.view((0, 0), (NP, NP)).into_owned();
    let norms: Vec<f64> = (0..NP).map(|i| block[(i, i)].max(0.0).sqrt()).collect();
    let max_norm = norms.iter().cloned().fold(0.0, f64::max);
    let zero_columns: Vec<usize> = (0..NP)
        .filter(|&i| !(norms[i] > 1e-12 * max_norm) || max_norm == 0.0)
        .collect();
    let live: Vec<usize> = (0..NP).filter(|i| !zero_columns.contains(i)).collect();
    if live.is_empty() {
        return RankDiagnostics {
            numerical_rank: 0,
            rank_deficient: true,
            condition: f64::INFINITY,
            zero_columns,
        };
    }
    let corr = DMatrix::from_fn(live.len(), live.len(), |a, b| {
        block[(live[a], live[b])] / (norms[live[a]] * norms[live[b]])
    });
    let eig = SymmetricEigen::new(corr).eigenvalues;
    let max_e = eig.iter().cloned().fold(0.0, f64::max);
    let min_e = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let rank = eig.iter().filter(|&&e| e > 1e-10 * max_e).count();
    RankDiagnostics {
        numerical_rank: rank,
        rank_deficient: rank < NP,
        condition: if min_e > 0.0 {
            max_e / min_e
        } else {
            f64::INFINITY
        },
        zero_columns,
    }
}

fn window_summaries(
    windows: &[AlignedExperiment],
    p: &ModelParams,
    w: &ErrorWeights,
    init: &InitialStates,
    dt: f64,
) -> Vec<WindowResidual> {
    windows
        .iter()
        .enumerate()
        .map(|(i, al)| {
            let x0 = match init {
                InitialStates::Given(s) => s[i],
                InitialStates::Measured => al.measured[0],
            };
            let n = al.len() as f64;
            match rollout(al, p, x0, dt) {
                Some(traj) => {
                    let mut acc = [0.0; 4];
                    let mut cost = 0.0;
                    for (s, m) in traj.iter().zip(&al.measured) {
                        acc[0] += (s.x - m.x).powi(2);
                        acc[1] += (s.y - m.y).powi(2);
                        acc[2] += crate::wrap_angle(s.psi - m.psi).powi(2);
                        acc[3] += (s.v - m.v).powi(2);
                        cost += pose_error(s, m, w);
                    }
                    WindowResidual {
                        index: i,
                        start_time: al.t[0],
                        cost,
                        rms_x: (acc[0] / n).sqrt(),
                        rms_y: (acc[1] / n).sqrt(),
                        rms_psi: (acc[2] / n).sqrt(),
                        rms_v: (acc[3] / n).sqrt(),
                    }
                }
                None => WindowResidual {
                    index: i,
                    start_time: al.t[0],
                    cost: f64::INFINITY,
                    rms_x: f64::INFINITY,
                    rms_y: f64::INFINITY,
                    rms_psi: f64::INFINITY,
                    rms_v: f64::INFINITY,
                },
            }
        })
        .collect()
}

/// Fit the grey-box parameters for fixed `delays` by single shooting.
///
/// Non-convergence is reported through [`FitDiagnostics::termination`], not
/// as an error.
pub fn estimate_parameters(
    experiments: &[Experiment],
    delays: DelayConfig,
    p_init: &ModelParams,
    w: &ErrorWeights,
    options: &FitOptions,
) -> Result<FitResult, IdentError> {
    w.validate()?;
    if !p_init.is_finite() {
        return Err(IdentError::InvalidOptions(
            "initial parameters are not finite".into(),
        ));
    }
    if !(options.dt.is_finite() && options.dt > 0.0) {
        return Err(IdentError::InvalidOptions(format!(
            "dt must be positive, got {}",
            options.dt
        )));
    }
    let windows = align_all(experiments, delays, options.horizon)?;
    if windows.iter().any(|al| al.len() < 2) {
        return Err(IdentError::EmptyAlignment {
            delays,
            len: windows[0].len(),
        });
    }
    let free = options.init_mode == InitMode::Free;
    let problem = ShootingProblem::new(&windows, w, options.dt, free);
    let x0 = problem.pack(p_init, &InitialStates::Measured);
    let rep = lm::solve(&problem, &x0, &options.lm, options.exec);

    let params = ModelParams::from_slice(&rep.x);
    let initial_states: Option<Vec<VehicleState>> =
        free.then(|| (0..windows.len()).map(|i| problem.x0(&rep.x, i)).collect());
    let init = match &initial_states {
        Some(s) => InitialStates::Given(s),
        None => InitialStates::Measured,
    };
    let penalized = rep.termination == Termination::NonFiniteStart;
    let objective = if penalized {
        PENALTY_OBJECTIVE
    } else {
        rep.cost
    };
    Ok(FitResult {
        params,
        delays,
        objective,
        windows: window_summaries(&windows, &params, w, &init, options.dt),
        diagnostics: FitDiagnostics {
            iterations: rep.iterations,
            termination: rep.termination,
            initial_objective: if penalized {
                PENALTY_OBJECTIVE
            } else {
                rep.initial_cost
            },
            objective_history: rep.cost_history,
            singular_solves: rep.singular_solves,
            final_damping: rep.final_damping,
            penalized,
            samples_per_window: windows[0].len(),
            rank: rank_diagnostics(rep.normal_matrix.as_ref()),
            grid: Vec::new(),
            ties: Vec::new(),
        },
        initial_states,
    })
}

/// Run [`estimate_parameters`] for every delay combination in `grid` and keep
/// the lowest objective. All cells share one aligned horizon so their
/// objectives sum over the same number of samples. Exact ties are broken by
/// [`DelayConfig::tie_key`].
pub fn delay_grid_search(
    experiments: &[Experiment],
    grid: &DelayGrid,
    p_init: &ModelParams,
    w: &ErrorWeights,
    options: &FitOptions,
) -> Result<FitResult, IdentError> {
    if grid.is_empty() {
        return Err(IdentError::InvalidOptions("empty delay grid".into()));
    }
    if experiments.is_empty() {
        return Err(IdentError::NoExperiments);
    }
    let shortest = experiments.iter().map(Experiment::len).min().unwrap_or(0);
    let horizon = match options.horizon {
        Some(h) => h,
        None => shortest
            .checked_sub(grid.max_trim())
            .filter(|h| *h >= 2)
            .ok_or_else(|| {
                IdentError::InvalidOptions(format!(
                    "experiments of {shortest} samples are too short for a delay grid trimming {}",
                    grid.max_trim()
                ))
            })?,
    };
    let cell_opts = FitOptions {
        horizon: Some(horizon),
        ..*options
    };
    let combos = grid.combinations();
    let results: Vec<Result<FitResult, IdentError>> = options.exec.map_slice(&combos, |d| {
        estimate_parameters(experiments, *d, p_init, w, &cell_opts)
    });

    let mut best: Option<usize> = None;
    let mut cells = Vec::with_capacity(combos.len());
    let mut failures = Vec::new();
    for (i, (d, res)) in combos.iter().zip(&results).enumerate() {
        match res {
            Ok(fit) if !fit.diagnostics.penalized && fit.objective.is_finite() => {
                cells.push(GridCell {
                    delays: *d,
                    objective: Some(fit.objective),
                    termination: Some(fit.diagnostics.termination),
                    error: None,
                });
                let better = match best.and_then(|b| results[b].as_ref().ok()) {
                    None => true,
                    Some(cur) => {
                        fit.objective < cur.objective
                            || (fit.objective == cur.objective
                                && d.tie_key() < cur.delays.tie_key())
                    }
                };
                if better {
                    best = Some(i);
                }
            }
            Ok(fit) => {
                let msg = format!(
                    "simulation diverged ({})",
                    fit.diagnostics.termination.as_str()
                );
                failures.push((*d, msg.clone()));
                cells.push(GridCell {
                    delays: *d,
                    objective: None,
                    termination: Some(fit.diagnostics.termination),
                    error: Some(msg),
                });
            }
            Err(e) => {
                failures.push((*d, e.to_string()));
                cells.push(GridCell {
                    delays: *d,
                    objective: None,
                    termination: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let Some(best) = best else {
        return Err(IdentError::AllCombinationsFailed(failures));
    };
    let mut fit = results.into_iter().nth(best).expect("index in range")?;
    let ties = cells
        .iter()
        .filter(|c| c.objective == Some(fit.objective) && c.delays != fit.delays)
        .map(|c| c.delays)
        .collect();
    fit.diagnostics.grid = cells;
    fit.diagnostics.ties = ties;
    Ok(fit)
}
