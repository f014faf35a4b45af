//! Real-time Gauss–Newton SQP for the augmented control problem.
//!
//! Each iteration linearizes the horizon about the current increments,
//! condenses the state trajectory away and solves the resulting dense QP with
//! an interior-point method. A fixed number of full steps is taken.

pub mod condense;
pub mod qp;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ModelOutput;
use crate::ocp::{OcpError, OcpProblem, Trajectory, N_ACT};
use crate::plant::Actuation;
pub use condense::{condense, linearize_horizon, CondensedQp, HorizonLinearization, StageLinearization};
pub use qp::{kkt_residual, solve_qp, KktResidual, QpError, QpProblem, QpSettings, QpSolution, QpStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub sqp_iterations: usize,
    pub qp: QpSettings,
    /// Linear penalty per unit of output-bound violation.
    pub slack_l1: f64,
    /// Quadratic penalty per unit² of output-bound violation.
    pub slack_l2: f64,
    /// Added to the diagonal of the increment block of the Hessian.
    pub regularization: f64,
    pub warm_start: WarmStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmStart {
    /// Previous plan shifted by one stage.
    Shift,
    /// Zero increments.
    Cold,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            sqp_iterations: 3,
            qp: QpSettings {
                max_iterations: 60,
                tolerance: 1e-9,
                polish: true,
            },
            slack_l1: 1e4,
            slack_l2: 1e2,
            regularization: 1e-8,
            warm_start: WarmStart::Shift,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.sqp_iterations == 0 || self.qp.max_iterations == 0 {
            return Err("iteration limits must be at least 1".into());
        }
        if !(self.slack_l1 > 0.0 && self.slack_l2 > 0.0) {
            return Err("slack penalties must be positive".into());
        }
        if !(self.regularization >= 0.0 && self.qp.tolerance > 0.0) {
            return Err("regularization must be non-negative and tolerance positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Problem(#[from] OcpError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Ok,
    /// A QP stopped at its iteration limit; its step was still taken.
    QpInaccurate,
    /// An iterate became non-finite; the last finite one is returned.
    Fallback,
}

impl SolveStatus {
    pub fn code(self) -> u8 {
        match self {
            SolveStatus::Ok => 0,
            SolveStatus::QpInaccurate => 1,
            SolveStatus::Fallback => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SolveStatus::Ok),
            1 => Some(SolveStatus::QpInaccurate),
            2 => Some(SolveStatus::Fallback),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    /// Nonlinear cost at the linearization point.
    pub cost: f64,
    /// QP objective at its solution, relative to the zero step.
    pub predicted_change: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub kkt: f64,
    pub max_slack: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub increments: Vec<[f64; N_ACT]>,
    /// Rollout of the final increments through the nonlinear model.
    pub trajectory: Trajectory,
    /// Outputs predicted by the last accepted QP step (the linearized model
    /// at the previous iterate); equals the rollout when no step was taken.
    pub predicted: Vec<ModelOutput>,
    /// First-stage actuation after clamping to the actuator bounds.
    pub applied: Actuation,
    /// `|applied - unclamped|` per actuator.
    pub clamp: [f64; N_ACT],
    pub iterations: Vec<IterationLog>,
    pub status: SolveStatus,
}

impl SolveResult {
    pub fn qp_iterations(&self) -> usize {
        self.iterations.iter().map(|l| l.qp_iterations).sum()
    }

    pub fn max_kkt(&self) -> f64 {
        self.iterations.iter().fold(0.0, |m, l| m.max(l.kkt))
    }

    pub fn max_slack(&self) -> f64 {
        self.iterations.iter().fold(0.0, |m, l| m.max(l.max_slack))
    }

    /// Largest slack of the last QP, in units of the bound span.
    pub fn final_slack(&self) -> f64 {
        self.iterations.last().map_or(0.0, |l| l.max_slack)
    }
}

/// Shifts a plan one stage forward, repeating its last stage.
pub fn shift_increments(plan: &[[f64; N_ACT]]) -> Vec<[f64; N_ACT]> {
    match plan.split_first() {
        None => Vec::new(),
        Some((_, rest)) => {
            let mut out = rest.to_vec();
            out.push(*plan.last().expect("non-empty"));
            out
        }
    }
}

fn all_finite(v: &[[f64; N_ACT]]) -> bool {
    v.iter().flatten().all(|x| x.is_finite())
}

/// Runs `config.sqp_iterations` full Gauss–Newton steps from `warm_start`
/// (zeros if absent) and clamps the first actuation to the hardware bounds.
pub fn solve_ocp(problem: &OcpProblem, warm_start: Option<&[[f64; N_ACT]]>, config: &SolverConfig) -> Result<SolveResult, SolveError> {
    let n = problem.horizon;
    let cold = vec![[0.0; N_ACT]; n];
    let mut w = match warm_start {
        Some(ws) if ws.len() == n && all_finite(ws) && problem.rollout(ws).is_ok() => ws.to_vec(),
        Some(ws) if ws.len() != n => {
            return Err(OcpError::IncrementCount {
                expected: n,
                got: ws.len(),
            }
            .into())
        }
        _ => cold,
    };

    let mut status = SolveStatus::Ok;
    let mut iterations = Vec::with_capacity(config.sqp_iterations);
    let mut last = problem.rollout(&w)?;
    let mut predicted = last.outputs.clone();
    for _ in 0..config.sqp_iterations {
        let lin = match linearize_horizon(problem, &w) {
            Ok(lin) => lin,
            Err(OcpError::Model(_)) => {
                status = SolveStatus::Fallback;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let cq = condense(problem, &lin, config);
        let sol = match solve_qp(&cq.qp, &config.qp) {
            Ok(sol) => sol,
            Err(QpError::NonFinite) => {
                status = SolveStatus::Fallback;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let step = cq.increments(&sol.x);
        iterations.push(IterationLog {
            cost: lin.trajectory.cost,
            predicted_change: cq.qp.objective(&sol.x),
            qp_status: sol.status,
            qp_iterations: sol.iterations,
            kkt: sol.kkt.max(),
            max_slack: cq.slack_values(&sol.x).fold(0.0, f64::max),
            step_norm: DVector::from_iterator(step.len() * N_ACT, step.iter().flatten().copied()).amax(),
        });
        match sol.status {
            QpStatus::Solved => {}
            QpStatus::MaxIterations => status = SolveStatus::QpInaccurate,
            QpStatus::NumericalFailure => {
                status = SolveStatus::Fallback;
                break;
            }
        }
        let next: Vec<[f64; N_ACT]> = w
            .iter()
            .zip(&step)
            .map(|(a, d)| std::array::from_fn(|j| a[j] + d[j]))
            .collect();
        match problem.rollout(&next) {
            Ok(traj) if all_finite(&next) && traj.cost.is_finite() => {
                w = next;
                last = traj;
                predicted = cq.predicted_outputs(&sol.x);
            }
            _ => {
                status = SolveStatus::Fallback;
                break;
            }
        }
    }

    let unclamped = last.inputs[0];
    let applied = problem.bounds.input.clamp(&unclamped);
    let (a, u) = (applied.to_array(), unclamped.to_array());
    Ok(SolveResult {
        increments: w,
        trajectory: last,
        predicted,
        applied,
        clamp: std::array::from_fn(|j| (a[j] - u[j]).abs()),
        iterations,
        status,
    })
}
