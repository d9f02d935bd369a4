//! Levenberg-Marquardt on normal equations.
//!
//! Problems hand the solver `J^T J` and `J^T r` directly, which lets the
//! single-shooting fit exploit the block structure of free initial states.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_iter: usize,
    pub initial_damping: f64,
    pub damping_factor: f64,
    /// Stop when the infinity norm of the objective gradient falls below this.
    pub gradient_tol: f64,
    /// Stop when `|step| < step_tol * (1 + |x|)`.
    pub step_tol: f64,
    /// Forward-difference step relative to the parameter magnitude.
    pub fd_relative_step: f64,
    /// Smallest forward-difference step.
    pub fd_min_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            initial_damping: 1e-3,
            damping_factor: 10.0,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            fd_relative_step: 1e-6,
            fd_min_step: 1e-8,
        }
    }
}

impl LmOptions {
    pub fn fd_step(&self, x: f64) -> f64 {
        (self.fd_relative_step * x.abs()).max(self.fd_min_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIter,
    /// Damping grew past `1e16` without finding a decreasing step.
    DampingOverflow,
    /// The starting point already produced a non-finite residual.
    NonFiniteStart,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::GradientTolerance => "gradient_tol",
            Termination::StepTolerance => "step_tol",
            Termination::MaxIter => "max_iter",
            Termination::DampingOverflow => "damping_overflow",
            Termination::NonFiniteStart => "non_finite_start",
        }
    }

    pub fn converged(&self) -> bool {
        matches!(
            self,
            Termination::GradientTolerance | Termination::StepTolerance
        )
    }
}

pub(crate) trait LeastSquaresProblem: Sync {
    fn n_params(&self) -> usize;

    /// Residual vector at `x`, or `None` if the model diverged.
    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>>;

    /// `(J^T J, J^T r)` at `x`, with `r` the residuals at `x`.
    fn normal_equations(
        &self,
        x: &[f64],
        r: &[f64],
        opts: &LmOptions,
        exec: Exec,
    ) -> (DMatrix<f64>, DVector<f64>);
}

#[derive(Debug, Clone)]
pub(crate) struct LmReport {
    pub x: Vec<f64>,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Accepted-step costs, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Times the damped system could not be factorised.
    pub singular_solves: usize,
    pub final_damping: f64,
    pub normal_matrix: Option<DMatrix<f64>>,
}

const MAX_DAMPING: f64 = 1e16;
const MIN_DAMPING: f64 = 1e-15;

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

pub(crate) fn solve<P: LeastSquaresProblem>(
    problem: &P,
    x0: &[f64],
    opts: &LmOptions,
    exec: Exec,
) -> LmReport {
    let n = problem.n_params();
    let mut x = x0.to_vec();
    let Some(mut r) = problem.residuals(&x) else {
        return LmReport {
            x,
            cost: f64::INFINITY,
            initial_cost: f64::INFINITY,
            iterations: 0,
            termination: Termination::NonFiniteStart,
            cost_history: vec![],
            singular_solves: 0,
            final_damping: opts.initial_damping,
            normal_matrix: None,
        };
    };
    let mut cost = sum_sq(&r);
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = opts.initial_damping;
    let mut singular = 0;
    let mut iterations = 0;
    let mut last_normal = None;

    let termination = 'outer: loop {
        if iterations >= opts.max_iter {
            break Termination::MaxIter;
        }
        let (jtj, jtr) = problem.normal_equations(&x, &r, opts, exec);
        // gradient of sum r^2 is 2 J^T r
        let grad_inf = jtr.iter().fold(0.0f64, |a, g| a.max((2.0 * g).abs()));
        last_normal = Some(jtj.clone());
        if grad_inf < opts.gradient_tol {
            break Termination::GradientTolerance;
        }
        let max_diag = (0..n).map(|i| jtj[(i, i)]).fold(0.0f64, f64::max);
        let diag: Vec<f64> = (0..n)
            .map(|i| jtj[(i, i)].max(1e-12 * max_diag).max(1e-300))
            .collect();
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();

        loop {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * diag[i];
            }
            let Some(chol) = a.cholesky() else {
                singular += 1;
                lambda *= opts.damping_factor;
                if lambda > MAX_DAMPING {
                    break 'outer Termination::DampingOverflow;
                }
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let step_norm = step.norm();
            if !step_norm.is_finite() {
                singular += 1;
                lambda *= opts.damping_factor;
                if lambda > MAX_DAMPING {
                    break 'outer Termination::DampingOverflow;
                }
                continue;
            }
            if step_norm < opts.step_tol * (1.0 + x_norm) {
                break 'outer Termination::StepTolerance;
            }
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            match problem.residuals(&trial) {
                Some(r_new) if sum_sq(&r_new) < cost => {
                    x = trial;
                    cost = sum_sq(&r_new);
                    r = r_new;
                    history.push(cost);
                    lambda = (lambda / opts.damping_factor).max(MIN_DAMPING);
                    break;
                }
                _ => {
                    lambda *= opts.damping_factor;
                    if lambda > MAX_DAMPING {
                        break 'outer Termination::DampingOverflow;
                    }
                }
            }
        }
        iterations += 1;
    };

    LmReport {
        x,
        cost,
        initial_cost,
        iterations,
        termination,
        cost_history: history,
        singular_solves: singular,
        final_damping: lambda,
        normal_matrix: last_normal,
    }
}
