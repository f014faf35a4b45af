//! Receding-horizon controller and in-process closed-loop experiments.

use std::io::{Read, Write};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::timing::{collect_timing, Stopwatch, TimingSample, TimingStats};
use crate::nn::{LstmState, ModelOutput, NetworkWeights, NnError};
use crate::ocp::{AugmentedState, Bounds, CostWeights, Feedback, OcpError, OcpProblem, Reference, N_ACT};
use crate::plant::{Actuation, SurrogatePlant};
use crate::sqp::{shift_increments, solve_ocp, SolveError, SolveResult, SolveStatus, SolverConfig, WarmStart};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("closed loop left the output envelope at cycle {cycle}: {output:?}")]
    Unstable { cycle: usize, output: ModelOutput },
    #[error("reference profile: {0}")]
    Profile(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<OcpError> for SimError {
    fn from(e: OcpError) -> Self {
        SimError::Solve(e.into())
    }
}

/// Anything that turns an actuation into a measured cycle.
pub trait Plant {
    fn step(&mut self, a: &Actuation) -> ModelOutput;
}

impl Plant for SurrogatePlant {
    fn step(&mut self, a: &Actuation) -> ModelOutput {
        SurrogatePlant::step(self, a)
    }
}

/// The surrogate itself closed on its own outputs.
#[derive(Debug, Clone)]
pub struct ModelPlant {
    pub model: Arc<NetworkWeights>,
    pub state: LstmState,
    pub last: ModelOutput,
}

impl Plant for ModelPlant {
    fn step(&mut self, a: &Actuation) -> ModelOutput {
        let input = OcpProblem::model_input(&Feedback::from(&self.last), a);
        match self.model.step(&self.state, &input) {
            Ok((s, y)) => {
                self.state = s;
                self.last = y;
                y
            }
            Err(_) => ModelOutput::from_array([f64::NAN; 4]),
        }
    }
}

/// LSTM state reached by holding `a` while feeding back the constant
/// measurement `y`.
pub fn teacher_forced_state(model: &NetworkWeights, y: &ModelOutput, a: &Actuation, cycles: usize) -> Result<LstmState, NnError> {
    let input = OcpProblem::model_input(&Feedback::from(y), a);
    let mut s = LstmState::default();
    for _ in 0..cycles {
        s = model.step(&s, &input)?.0;
    }
    Ok(s)
}

/// Self-consistent operating point of the model under constant `a`: a state
/// and output that reproduce themselves when the output is fed back.
/// Returns the state, the output and the final update size.
pub fn model_steady_state(model: &NetworkWeights, a: &Actuation, y_guess: &ModelOutput, cycles: usize) -> Result<(LstmState, ModelOutput, f64), NnError> {
    let mut s = teacher_forced_state(model, y_guess, a, 50)?;
    let mut y = *y_guess;
    let mut delta = f64::INFINITY;
    for _ in 0..cycles {
        let (s2, y2) = model.step(&s, &OcpProblem::model_input(&Feedback::from(&y), a))?;
        let (a1, a2, b1, b2) = (s.to_array(), s2.to_array(), y.to_array(), y2.to_array());
        delta = a1.iter().zip(&a2).chain(b1.iter().zip(&b2)).fold(0.0, |m, (p, q)| m.max((p - q).abs()));
        s = s2;
        y = y2;
        if delta == 0.0 {
            break;
        }
    }
    Ok((s, y, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub weights: CostWeights,
    pub bounds: Bounds,
    pub solver: SolverConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            weights: CostWeights::default(),
            bounds: Bounds::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlStep {
    pub applied: Actuation,
    /// LSTM state the prediction for this cycle started from.
    pub state: LstmState,
    pub result: SolveResult,
    pub solve_time: Option<Duration>,
}

/// Receding-horizon controller holding the surrogate's state estimate, the
/// last applied actuation and the previous plan.
#[derive(Debug, Clone)]
pub struct Controller {
    pub model: Arc<NetworkWeights>,
    pub config: ControllerConfig,
    pub state: LstmState,
    pub u_prev: Actuation,
    plan: Option<Vec<[f64; N_ACT]>>,
}

impl Controller {
    pub fn new(model: Arc<NetworkWeights>, config: ControllerConfig, state: LstmState, u_prev: Actuation) -> Self {
        Self {
            model,
            config,
            state,
            u_prev,
            plan: None,
        }
    }

    /// Starts from the state reached by holding `u_prev` with `y` measured.
    pub fn settled(model: Arc<NetworkWeights>, config: ControllerConfig, y: &ModelOutput, u_prev: Actuation) -> Result<Self, NnError> {
        let state = teacher_forced_state(&model, y, &u_prev, 100)?;
        Ok(Self::new(model, config, state, u_prev))
    }

    pub fn problem(&self, feedback: Feedback, r_imep: f64, r_ca50: f64) -> Result<OcpProblem, OcpError> {
        let c = &self.config;
        OcpProblem::new(
            self.model.clone(),
            c.horizon,
            c.weights.clone(),
            c.bounds.clone(),
            Reference::constant(r_imep, r_ca50, c.horizon + 1),
            AugmentedState {
                lstm: self.state,
                u_prev: self.u_prev,
            },
            feedback,
        )
    }

    /// Solves for the next actuation given the previous cycle's measurement
    /// and advances the state estimate with it.
    pub fn step(&mut self, feedback: Feedback, r_imep: f64, r_ca50: f64) -> Result<ControlStep, SimError> {
        let problem = self.problem(feedback, r_imep, r_ca50)?;
        let warm = match self.config.solver.warm_start {
            WarmStart::Shift => self.plan.as_deref(),
            WarmStart::Cold => None,
        };
        let watch = Stopwatch::start();
        let result = solve_ocp(&problem, warm, &self.config.solver)?;
        let solve_time = watch.elapsed();

        let applied = result.applied;
        let state = self.state;
        self.state = self.model.step(&state, &OcpProblem::model_input(&feedback, &applied))?.0;
        self.u_prev = applied;
        self.plan = Some(shift_increments(&result.increments));
        Ok(ControlStep {
            applied,
            state,
            result,
            solve_time,
        })
    }
}

/// Step-hold reference: each point sets the references from its cycle on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub cycle: usize,
    pub r_imep: f64,
    pub r_ca50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    pub points: Vec<ReferencePoint>,
    pub cycles: usize,
}

impl Default for ReferenceProfile {
    /// 650 cycles of IMEP steps between 2 and 5 bar at CA50 = 6 CAD aTDC.
    fn default() -> Self {
        let levels = [3.0, 4.0, 2.5, 4.5, 3.5, 5.0, 2.0, 3.0, 4.0, 2.5, 3.5, 4.5, 3.0];
        Self {
            points: levels
                .iter()
                .enumerate()
                .map(|(i, &r)| ReferencePoint {
                    cycle: 50 * i,
                    r_imep: r,
                    r_ca50: 6.0,
                })
                .collect(),
            cycles: 650,
        }
    }
}

impl ReferenceProfile {
    pub fn constant(r_imep: f64, r_ca50: f64, cycles: usize) -> Self {
        Self {
            points: vec![ReferencePoint { cycle: 0, r_imep, r_ca50 }],
            cycles,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match self.points.first() {
            Some(p) if p.cycle == 0 => {}
            _ => return Err(SimError::Profile("first point must be at cycle 0".into())),
        }
        if self.points.windows(2).any(|w| w[1].cycle <= w[0].cycle) {
            return Err(SimError::Profile("cycles must be strictly increasing".into()));
        }
        if self.points.iter().any(|p| !(p.r_imep.is_finite() && p.r_ca50.is_finite())) {
            return Err(SimError::Profile("non-finite reference".into()));
        }
        Ok(())
    }

    pub fn expand(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.cycles);
        let mut idx = 0;
        for k in 0..self.cycles {
            while idx + 1 < self.points.len() && self.points[idx + 1].cycle <= k {
                idx += 1;
            }
            let p = &self.points[idx];
            out.push((p.r_imep, p.r_ca50));
        }
        out
    }

    /// Header `cycle,r_imep,r_ca50`; the run length is one past the last row
    /// unless given.
    pub fn read_csv<R: Read>(r: R, cycles: Option<usize>) -> Result<Self, SimError> {
        let mut points = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            points.push(row?);
        }
        let last = points.last().map_or(0, |p: &ReferencePoint| p.cycle + 1);
        let profile = Self {
            points,
            cycles: cycles.unwrap_or(last),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.points {
            out.serialize(p)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub controller: ControllerConfig,
    /// Actuation held before the first controlled cycle.
    pub initial_actuation: Actuation,
    /// Cycles excluded from the tracking statistics.
    pub warmup: usize,
    /// Abort once an output leaves this many half-widths around the bounds.
    pub envelope_factor: f64,
    pub budget_ms: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            controller: ControllerConfig::default(),
            initial_actuation: Actuation::new(0.75, 0.0, 255.0),
            warmup: 10,
            envelope_factor: 5.0,
            budget_ms: 22.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub r_imep: f64,
    pub r_ca50: f64,
    pub measured: ModelOutput,
    /// Model prediction of this cycle made when choosing its actuation.
    pub predicted: ModelOutput,
    pub applied: Actuation,
    pub state: LstmState,
    pub solve_ms: Option<f64>,
    pub status: SolveStatus,
    pub qp_iterations: usize,
    pub kkt: f64,
    /// Largest output-bound slack of the last SQP iteration.
    pub final_slack: f64,
    pub clamp: f64,
    pub cost: f64,
    /// Largest output-bound violation of the QP's predicted trajectory.
    pub predicted_violation: f64,
    /// Same for the nonlinear rollout of the returned plan.
    pub rollout_violation: f64,
}

impl CycleRecord {
    pub fn from_step(cycle: usize, r: (f64, f64), measured: ModelOutput, step: &ControlStep, bounds: &Bounds) -> Self {
        let res = &step.result;
        Self {
            cycle,
            r_imep: r.0,
            r_ca50: r.1,
            measured,
            predicted: res.trajectory.outputs[0],
            applied: step.applied,
            state: step.state,
            solve_ms: step.solve_time.map(|d| d.as_secs_f64() * 1e3),
            status: res.status,
            qp_iterations: res.qp_iterations(),
            kkt: res.max_kkt(),
            final_slack: res.final_slack(),
            clamp: res.clamp.iter().fold(0.0, |m: f64, c| m.max(*c)),
            cost: res.trajectory.cost,
            predicted_violation: res.predicted.iter().map(|y| output_violation(y, bounds)).fold(0.0, f64::max),
            rollout_violation: res.trajectory.outputs.iter().map(|y| output_violation(y, bounds)).fold(0.0, f64::max),
        }
    }
}

/// Largest amount by which a selected output bound is exceeded.
pub fn output_violation(y: &ModelOutput, bounds: &Bounds) -> f64 {
    let (v, lo, hi) = (y.to_array(), bounds.output_min.to_array(), bounds.output_max.to_array());
    (0..4)
        .filter(|&k| bounds.output_selected[k])
        .map(|k| (lo[k] - v[k]).max(v[k] - hi[k]).max(0.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub cycles: usize,
    pub warmup: usize,
    pub imep_rmse: f64,
    pub ca50_rmse: f64,
    /// Prediction of each cycle versus its measurement, per output.
    pub one_step_rmse: [f64; 4],
    /// Plant-side output bound exceedances.
    pub violations: usize,
    pub worst_violation: f64,
    /// Cycle and channel of the worst exceedance.
    pub worst_violation_at: Option<(usize, String)>,
    pub input_violations: usize,
    pub degraded_solves: usize,
    pub timing: TimingStats,
}

impl ClosedLoopReport {
    pub fn from_records(records: &[CycleRecord], warmup: usize, bounds: &Bounds, budget_ms: f64) -> Self {
        let scored = records.get(warmup..).unwrap_or(&[]);
        let rms = |f: &dyn Fn(&CycleRecord) -> f64| {
            if scored.is_empty() {
                return f64::NAN;
            }
            (scored.iter().map(|r| f(r).powi(2)).sum::<f64>() / scored.len() as f64).sqrt()
        };
        let one_step = std::array::from_fn(|k| rms(&|r| r.measured.to_array()[k] - r.predicted.to_array()[k]));

        const NAMES: [&str; 4] = ["imep", "ca50", "nox", "mprr"];
        let (lo, hi) = (bounds.output_min.to_array(), bounds.output_max.to_array());
        let mut violations = 0;
        let mut worst = 0.0;
        let mut worst_at = None;
        for r in records {
            let v = r.measured.to_array();
            let mut hit = false;
            for k in (0..4).filter(|&k| bounds.output_selected[k]) {
                let e = (lo[k] - v[k]).max(v[k] - hi[k]);
                if e > 0.0 {
                    hit = true;
                    if e > worst {
                        worst = e;
                        worst_at = Some((r.cycle, NAMES[k].to_string()));
                    }
                }
            }
            violations += hit as usize;
        }
        let samples: Vec<TimingSample> = records
            .iter()
            .map(|r| TimingSample {
                solve_ms: r.solve_ms,
                ..Default::default()
            })
            .collect();
        Self {
            cycles: records.len(),
            warmup,
            imep_rmse: rms(&|r| r.measured.imep - r.r_imep),
            ca50_rmse: rms(&|r| r.measured.ca50 - r.r_ca50),
            one_step_rmse: one_step,
            violations,
            worst_violation: worst,
            worst_violation_at: worst_at,
            input_violations: records.iter().filter(|r| !bounds.input.contains(&r.applied)).count(),
            degraded_solves: records.iter().filter(|r| r.status != SolveStatus::Ok).count(),
            timing: collect_timing(&samples, budget_ms),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "cycles {} (warm-up {})\nIMEP RMSE {:.4} bar\nCA50 RMSE {:.4} CAD\none-step RMSE imep {:.4} ca50 {:.4} nox {:.3} mprr {:.4}\n",
            self.cycles,
            self.warmup,
            self.imep_rmse,
            self.ca50_rmse,
            self.one_step_rmse[0],
            self.one_step_rmse[1],
            self.one_step_rmse[2],
            self.one_step_rmse[3]
        );
        s += &format!("output violations {} (worst {:.4}", self.violations, self.worst_violation);
        if let Some((c, ch)) = &self.worst_violation_at {
            s += &format!(" {ch} at cycle {c}");
        }
        s += &format!(")\ninput violations {}\ndegraded solves {}\n", self.input_violations, self.degraded_solves);
        s += &self.timing.summary();
        s
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub records: Vec<CycleRecord>,
    pub report: ClosedLoopReport,
}

/// Runs `profile` against `plant`, starting from measurement `y0` taken at
/// `config.initial_actuation`.
pub fn run_closed_loop<P: Plant>(
    model: Arc<NetworkWeights>,
    plant: &mut P,
    y0: ModelOutput,
    profile: &ReferenceProfile,
    config: &ClosedLoopConfig,
) -> Result<ClosedLoopRun, SimError> {
    profile.validate()?;
    let bounds = &config.controller.bounds;
    let mut ctrl = Controller::settled(model, config.controller.clone(), &y0, config.initial_actuation)?;
    let (lo, hi) = (bounds.output_min.to_array(), bounds.output_max.to_array());
    let mut records = Vec::with_capacity(profile.cycles);
    let mut y = y0;
    for (cycle, r) in profile.expand().into_iter().enumerate() {
        let step = ctrl.step(Feedback::from(&y), r.0, r.1)?;
        y = plant.step(&step.applied);
        let v = y.to_array();
        let outside = (0..4).any(|k| {
            let (mid, half) = (0.5 * (lo[k] + hi[k]), 0.5 * (hi[k] - lo[k]).max(1.0));
            !((v[k] - mid).abs() <= config.envelope_factor * half)
        });
        if outside {
            return Err(SimError::Unstable { cycle, output: y });
        }
        records.push(CycleRecord::from_step(cycle, r, y, &step, bounds));
    }
    let report = ClosedLoopReport::from_records(&records, config.warmup, bounds, config.budget_ms);
    Ok(ClosedLoopRun { records, report })
}

/// Cycles after each IMEP reference step until the measurement stays within
/// `band(step)` of the reference for the rest of the segment. `None` for a
/// segment that never settles.
pub fn settling_cycles(records: &[CycleRecord], band: impl Fn(f64) -> f64) -> Vec<(usize, Option<usize>)> {
    let mut starts: Vec<usize> = (1..records.len())
        .filter(|&k| records[k].r_imep != records[k - 1].r_imep)
        .collect();
    let mut out = Vec::with_capacity(starts.len());
    starts.push(records.len());
    for w in starts.windows(2) {
        let (s, e) = (w[0], w[1]);
        let tol = band((records[s].r_imep - records[s - 1].r_imep).abs());
        let last_out = (s..e).rev().find(|&k| (records[k].measured.imep - records[k].r_imep).abs() > tol);
        let settle = match last_out {
            None => Some(0),
            Some(k) if k + 1 < e => Some(k + 1 - s),
            Some(_) => None,
        };
        out.push((s, settle));
    }
    out
}

/// Solve-time benchmark on perturbed copies of a base problem.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub timing: TimingStats,
    pub mean_qp_iterations: f64,
}

/// Runs `n` controller solves along a noisy closed loop and returns the
/// solve-time statistics.
pub fn bench_solver<P: Plant>(
    model: Arc<NetworkWeights>,
    plant: &mut P,
    y0: ModelOutput,
    profile: &ReferenceProfile,
    config: &ClosedLoopConfig,
    n: usize,
) -> Result<BenchResult, SimError> {
    let mut ctrl = Controller::settled(model, config.controller.clone(), &y0, config.initial_actuation)?;
    let refs = profile.expand();
    let mut y = y0;
    let mut samples = Vec::with_capacity(n);
    let mut qp_iters = 0usize;
    for k in 0..n {
        let r = refs.get(k % refs.len().max(1)).copied().unwrap_or((3.0, 6.0));
        let step = ctrl.step(Feedback::from(&y), r.0, r.1)?;
        qp_iters += step.result.qp_iterations();
        samples.push(TimingSample {
            solve_ms: step.solve_time.map(|d| d.as_secs_f64() * 1e3),
            ..Default::default()
        });
        y = plant.step(&step.applied);
    }
    Ok(BenchResult {
        timing: collect_timing(&samples, config.budget_ms),
        mean_qp_iterations: qp_iters as f64 / n.max(1) as f64,
    })
}
