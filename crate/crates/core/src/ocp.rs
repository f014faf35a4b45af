//! Δu-augmented optimal control problem: augmented dynamics, stage costs,
//! references and bounds, independent of any solver.
//!
//! Stage `i` applies `u_i = u_{i-1} + Δu_i` and produces `y_i`. The decision
//! variables are `Δu_0 .. Δu_{N-1}`; the terminal stage `N` holds the last
//! actuation (`Δu_N = 0`), so costs and output bounds cover stages `0..=N`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{LstmState, ModelInput, ModelOutput, NetworkWeights, NnError};
use crate::plant::{ActuatorBounds, Actuation};

/// Number of actuators (fuel DOI, water DOI, NVO).
pub const N_ACT: usize = 3;
/// Residual entries per stage in the least-squares form of the cost.
pub const N_RESIDUALS: usize = 5 + N_ACT;

#[derive(Debug, Error, PartialEq)]
pub enum OcpError {
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("reference covers {got} stages, horizon needs {needed}")]
    ShortReference { needed: usize, got: usize },
    #[error("invalid cost weights: {0}")]
    InvalidWeights(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("expected {expected} increments, got {got}")]
    IncrementCount { expected: usize, got: usize },
    #[error("non-finite increment")]
    NonFiniteIncrement,
    #[error(transparent)]
    Model(#[from] NnError),
}

/// LSTM state plus the previously applied actuation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub lstm: LstmState,
    pub u_prev: Actuation,
}

/// Measured (or predicted) load and phasing of the previous cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub imep: f64,
    pub ca50: f64,
}

impl From<&ModelOutput> for Feedback {
    fn from(y: &ModelOutput) -> Self {
        Self {
            imep: y.imep,
            ca50: y.ca50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    /// per bar²
    pub q_imep: f64,
    /// per CAD²
    pub q_ca50: f64,
    /// per ppm²
    pub q_nox: f64,
    /// per ms²
    pub r_doi_fuel: f64,
    /// per ms²
    pub r_doi_water: f64,
    /// Diagonal of the Δu weight (ms², ms², CAD²).
    pub r_delta: [f64; N_ACT],
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            q_imep: 20.0,
            q_ca50: 0.5,
            q_nox: 1e-6,
            r_doi_fuel: 0.01,
            r_doi_water: 0.05,
            r_delta: [0.5, 0.5, 2e-5],
        }
    }
}

impl CostWeights {
    /// Reference tracking plus Δu damping only.
    pub fn tracking_only(&self) -> Self {
        Self {
            q_nox: 0.0,
            r_doi_fuel: 0.0,
            r_doi_water: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let all = [self.q_imep, self.q_ca50, self.q_nox, self.r_doi_fuel, self.r_doi_water];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(OcpError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        if self.r_delta.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(OcpError::InvalidWeights("Δu weight must be positive definite".into()));
        }
        Ok(())
    }
}

/// Input and output bounds with 0/1 selectors for which ones are enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bounds {
    pub output_min: ModelOutput,
    pub output_max: ModelOutput,
    pub input: ActuatorBounds,
    pub output_selected: [bool; 4],
    pub input_selected: [bool; N_ACT],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            output_min: ModelOutput {
                imep: 1.0,
                ca50: 0.0,
                nox: 0.0,
                mprr: 0.0,
            },
            output_max: ModelOutput {
                imep: 6.0,
                ca50: 17.0,
                nox: 500.0,
                mprr: 15.0,
            },
            input: ActuatorBounds::default(),
            output_selected: [true; 4],
            input_selected: [true; N_ACT],
        }
    }
}

impl Bounds {
    /// Default bounds with the NOx ceiling lowered to 300 ppm.
    pub fn nox_cap_preset() -> Self {
        let mut b = Self::default();
        b.output_max.nox = 300.0;
        b
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let (lo, hi) = (self.output_min.to_array(), self.output_max.to_array());
        if (0..4).any(|j| !(lo[j] <= hi[j])) {
            return Err(OcpError::InvalidBounds("output min exceeds max".into()));
        }
        let (lo, hi) = (self.input.min.to_array(), self.input.max.to_array());
        if (0..N_ACT).any(|j| !(lo[j] <= hi[j])) {
            return Err(OcpError::InvalidBounds("input min exceeds max".into()));
        }
        Ok(())
    }
}

/// Per-stage reference trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub imep: Vec<f64>,
    pub ca50: Vec<f64>,
}

impl Reference {
    pub fn constant(imep: f64, ca50: f64, stages: usize) -> Self {
        Self {
            imep: vec![imep; stages],
            ca50: vec![ca50; stages],
        }
    }

    pub fn len(&self) -> usize {
        self.imep.len().min(self.ca50.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub model: Arc<NetworkWeights>,
    pub horizon: usize,
    pub weights: CostWeights,
    pub bounds: Bounds,
    pub reference: Reference,
    pub initial: AugmentedState,
    pub feedback: Feedback,
}

impl OcpProblem {
    pub fn new(
        model: Arc<NetworkWeights>,
        horizon: usize,
        weights: CostWeights,
        bounds: Bounds,
        reference: Reference,
        initial: AugmentedState,
        feedback: Feedback,
    ) -> Result<Self, OcpError> {
        if horizon == 0 {
            return Err(OcpError::ZeroHorizon);
        }
        if reference.len() < horizon + 1 {
            return Err(OcpError::ShortReference {
                needed: horizon + 1,
                got: reference.len(),
            });
        }
        weights.validate()?;
        bounds.validate()?;
        Ok(Self {
            model,
            horizon,
            weights,
            bounds,
            reference,
            initial,
            feedback,
        })
    }

    /// Number of output stages (`N + 1`).
    pub fn stages(&self) -> usize {
        self.horizon + 1
    }

    pub fn model_input(feedback: &Feedback, u: &Actuation) -> ModelInput {
        ModelInput {
            imep_prev: feedback.imep,
            ca50_prev: feedback.ca50,
            doi_fuel: u.doi_fuel,
            doi_water: u.doi_water,
            nvo: u.nvo,
        }
    }

    /// Applies `u = u_prev + Δu`, evaluates the model with the given feedback
    /// pair and returns the next augmented state and the stage output.
    pub fn augmented_step(
        &self,
        state: &AugmentedState,
        du: &[f64; N_ACT],
        feedback: &Feedback,
    ) -> Result<(AugmentedState, ModelOutput), OcpError> {
        if du.iter().any(|d| !d.is_finite()) {
            return Err(OcpError::NonFiniteIncrement);
        }
        let prev = state.u_prev.to_array();
        let u = Actuation::from_array(std::array::from_fn(|j| prev[j] + du[j]));
        let (lstm, y) = self.model.step(&state.lstm, &Self::model_input(feedback, &u))?;
        Ok((AugmentedState { lstm, u_prev: u }, y))
    }

    /// Weighted least-squares residuals of one stage; their squares sum to
    /// [`OcpProblem::stage_cost`].
    pub fn stage_residuals(&self, y: &ModelOutput, u: &Actuation, du: &[f64; N_ACT], stage: usize) -> [f64; N_RESIDUALS] {
        let w = &self.weights;
        let r_imep = self.reference.imep[stage];
        let r_ca50 = self.reference.ca50[stage];
        [
            w.q_imep.sqrt() * (y.imep - r_imep),
            w.q_ca50.sqrt() * (y.ca50 - r_ca50),
            w.q_nox.sqrt() * y.nox,
            w.r_doi_fuel.sqrt() * u.doi_fuel,
            w.r_doi_water.sqrt() * u.doi_water,
            w.r_delta[0].sqrt() * du[0],
            w.r_delta[1].sqrt() * du[1],
            w.r_delta[2].sqrt() * du[2],
        ]
    }

    /// Tracking, consumption, emission and Δu terms of one stage.
    pub fn stage_cost(&self, y: &ModelOutput, u: &Actuation, du: &[f64; N_ACT], stage: usize) -> f64 {
        self.stage_residuals(y, u, du, stage).iter().map(|r| r * r).sum()
    }

    /// Rolls the augmented dynamics over the horizon. Within the horizon the
    /// feedback for stage `i >= 1` is the prediction of stage `i - 1`.
    pub fn rollout(&self, increments: &[[f64; N_ACT]]) -> Result<Trajectory, OcpError> {
        if increments.len() != self.horizon {
            return Err(OcpError::IncrementCount {
                expected: self.horizon,
                got: increments.len(),
            });
        }
        let mut states = Vec::with_capacity(self.stages() + 1);
        let mut outputs = Vec::with_capacity(self.stages());
        let mut inputs = Vec::with_capacity(self.stages());
        let mut deltas = Vec::with_capacity(self.stages());
        let mut feedback = Vec::with_capacity(self.stages());
        let mut x = self.initial;
        let mut fb = self.feedback;
        let mut cost = 0.0;
        states.push(x);
        for i in 0..self.stages() {
            let du = increments.get(i).copied().unwrap_or([0.0; N_ACT]);
            let (next, y) = self.augmented_step(&x, &du, &fb)?;
            cost += self.stage_cost(&y, &next.u_prev, &du, i);
            feedback.push(fb);
            inputs.push(next.u_prev);
            outputs.push(y);
            deltas.push(du);
            states.push(next);
            fb = Feedback::from(&y);
            x = next;
        }
        Ok(Trajectory {
            states,
            outputs,
            inputs,
            increments: deltas,
            feedback,
            cost,
        })
    }

    /// Signed bound margins (positive = satisfied) for every selected bound at
    /// every stage.
    pub fn constraint_residuals(&self, traj: &Trajectory) -> Vec<ConstraintResidual> {
        const INPUTS: [&str; N_ACT] = ["doi_fuel", "doi_water", "nvo"];
        const OUTPUTS: [&str; 4] = ["imep", "ca50", "nox", "mprr"];
        let b = &self.bounds;
        let mut out = Vec::new();
        for (stage, (u, y)) in traj.inputs.iter().zip(&traj.outputs).enumerate() {
            let (lo, hi, v) = (b.input.min.to_array(), b.input.max.to_array(), u.to_array());
            for j in (0..N_ACT).filter(|&j| b.input_selected[j]) {
                out.push(ConstraintResidual::new(stage, INPUTS[j], BoundSide::Lower, v[j] - lo[j]));
                out.push(ConstraintResidual::new(stage, INPUTS[j], BoundSide::Upper, hi[j] - v[j]));
            }
            let (lo, hi, v) = (b.output_min.to_array(), b.output_max.to_array(), y.to_array());
            for j in (0..4).filter(|&j| b.output_selected[j]) {
                out.push(ConstraintResidual::new(stage, OUTPUTS[j], BoundSide::Lower, v[j] - lo[j]));
                out.push(ConstraintResidual::new(stage, OUTPUTS[j], BoundSide::Upper, hi[j] - v[j]));
            }
        }
        out
    }
}

/// States `x̃_0 ..= x̃_{N+1}`, and per stage `0..=N` the applied actuation,
/// increment, feedback used and output.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<AugmentedState>,
    pub outputs: Vec<ModelOutput>,
    pub inputs: Vec<Actuation>,
    pub increments: Vec<[f64; N_ACT]>,
    pub feedback: Vec<Feedback>,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintResidual {
    pub stage: usize,
    pub channel: &'static str,
    pub side: BoundSide,
    pub margin: f64,
}

impl ConstraintResidual {
    fn new(stage: usize, channel: &'static str, side: BoundSide, margin: f64) -> Self {
        Self {
            stage,
            channel,
            side,
            margin,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NetworkSpec, Normalization};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Arc<NetworkWeights> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = Normalization {
            input_offset: [3.0, 6.0, 0.75, 0.5, 255.0],
            input_scale: [1.2, 4.0, 0.4, 0.3, 60.0],
            output_offset: [3.0, 6.0, 150.0, 5.0],
            output_scale: [1.2, 4.0, 90.0, 3.0],
        };
        Arc::new(NetworkWeights::random(NetworkSpec::default(), norm, &mut rng).unwrap())
    }

    fn problem(seed: u64, weights: CostWeights) -> OcpProblem {
        OcpProblem::new(
            model(seed),
            3,
            weights,
            Bounds::default(),
            Reference::constant(3.5, 6.0, 4),
            AugmentedState {
                lstm: LstmState {
                    c: [0.2, -0.1, 0.3, 0.0],
                    h: [0.1, 0.05, -0.2, 0.15],
                },
                u_prev: Actuation::new(0.8, 0.3, 250.0),
            },
            Feedback { imep: 3.2, ca50: 7.0 },
        )
        .unwrap()
    }

    #[test]
    fn construction_checks() {
        let p = problem(1, CostWeights::default());
        let short = OcpProblem::new(
            p.model.clone(),
            3,
            CostWeights::default(),
            Bounds::default(),
            Reference::constant(3.0, 6.0, 3),
            p.initial,
            p.feedback,
        );
        assert_eq!(short.unwrap_err(), OcpError::ShortReference { needed: 4, got: 3 });
        let zero = OcpProblem::new(p.model.clone(), 0, CostWeights::default(), Bounds::default(), p.reference.clone(), p.initial, p.feedback);
        assert_eq!(zero.unwrap_err(), OcpError::ZeroHorizon);
        let mut w = CostWeights::default();
        w.r_delta[2] = 0.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn zero_increment_is_plain_model_step() {
        let p = problem(2, CostWeights::default());
        let (next, y) = p.augmented_step(&p.initial, &[0.0; 3], &p.feedback).unwrap();
        assert_eq!(next.u_prev, p.initial.u_prev);
        let (s, y2) = p.model.step(&p.initial.lstm, &OcpProblem::model_input(&p.feedback, &p.initial.u_prev)).unwrap();
        assert_eq!((next.lstm, y), (s, y2));
    }

    #[test]
    fn two_stages_match_two_model_steps() {
        let p = problem(3, CostWeights::default());
        let traj = p.rollout(&[[0.0; 3]; 3]).unwrap();
        let u = p.initial.u_prev;
        let (s1, y1) = p.model.step(&p.initial.lstm, &OcpProblem::model_input(&p.feedback, &u)).unwrap();
        let (_, y2) = p.model.step(&s1, &OcpProblem::model_input(&Feedback::from(&y1), &u)).unwrap();
        assert_eq!(traj.outputs[0], y1);
        assert_eq!(traj.outputs[1], y2);
        assert!(traj.inputs.iter().all(|a| *a == u));
    }

    #[test]
    fn applied_inputs_are_prefix_sums() {
        let p = problem(4, CostWeights::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let du: Vec<[f64; 3]> = (0..3)
            .map(|_| [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-20.0..20.0)])
            .collect();
        let traj = p.rollout(&du).unwrap();
        let mut acc = p.initial.u_prev.to_array();
        for i in 0..=3 {
            if i < 3 {
                for j in 0..3 {
                    acc[j] += du[i][j];
                }
            }
            assert_eq!(traj.inputs[i].to_array(), acc);
        }
        assert_eq!(traj.increments[3], [0.0; 3]);
    }

    #[test]
    fn permuted_input_assembly_changes_output() {
        let p = problem(5, CostWeights::default());
        let u = p.initial.u_prev;
        let good = OcpProblem::model_input(&p.feedback, &u);
        let (_, y) = p.model.step(&p.initial.lstm, &good).unwrap();
        let a = good.to_array();
        let shuffled = ModelInput::from_array([a[2], a[0], a[1], a[4], a[3]]);
        let (_, y_bad) = p.model.step(&p.initial.lstm, &shuffled).unwrap();
        assert_ne!(y, y_bad);
        assert_eq!(a, [3.2, 7.0, 0.8, 0.3, 250.0]);
    }

    #[test]
    fn cost_zero_at_reference_without_effort() {
        let p = problem(6, CostWeights::default());
        let y = ModelOutput {
            imep: 3.5,
            ca50: 6.0,
            nox: 0.0,
            mprr: 2.0,
        };
        assert_eq!(p.stage_cost(&y, &Actuation::default(), &[0.0; 3], 0), 0.0);
    }

    #[test]
    fn single_term_arithmetic() {
        let w = CostWeights {
            q_imep: 1.0,
            q_ca50: 0.0,
            q_nox: 0.0,
            r_doi_fuel: 0.0,
            r_doi_water: 0.0,
            r_delta: [1e-300; 3],
        };
        let p = problem(7, w);
        let y = ModelOutput {
            imep: 4.0,
            ca50: 9.0,
            nox: 100.0,
            mprr: 3.0,
        };
        assert_relative_eq!(p.stage_cost(&y, &Actuation::new(1.0, 1.0, 200.0), &[0.0; 3], 1), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn full_cost_matches_term_by_term_sum() {
        let p = problem(8, CostWeights::default());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for stage in 0..=3 {
            let y = ModelOutput {
                imep: rng.random_range(1.0..6.0),
                ca50: rng.random_range(0.0..17.0),
                nox: rng.random_range(0.0..500.0),
                mprr: rng.random_range(0.0..15.0),
            };
            let u = Actuation::new(rng.random_range(0.0..1.5), rng.random_range(0.0..1.0), rng.random_range(150.0..360.0));
            let du = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-30.0..30.0)];
            let w = &p.weights;
            let expected = w.q_imep * (3.5 - y.imep).powi(2)
                + w.q_ca50 * (6.0 - y.ca50).powi(2)
                + w.r_doi_fuel * u.doi_fuel.powi(2)
                + w.r_doi_water * u.doi_water.powi(2)
                + w.q_nox * y.nox.powi(2)
                + (0..3).map(|j| w.r_delta[j] * du[j] * du[j]).sum::<f64>();
            assert_relative_eq!(p.stage_cost(&y, &u, &du, stage), expected, max_relative = 1e-14);
        }
    }

    #[test]
    fn constraint_margins() {
        let p = problem(9, CostWeights::default());
        let mut traj = p.rollout(&[[0.0; 3]; 3]).unwrap();
        for y in &mut traj.outputs {
            *y = ModelOutput {
                imep: 3.0,
                ca50: 8.0,
                nox: 200.0,
                mprr: 6.0,
            };
        }
        assert!(p.constraint_residuals(&traj).iter().all(|r| r.margin > 0.0));

        traj.inputs[0].doi_fuel = 1.5;
        traj.outputs[1].mprr = 16.0;
        let res = p.constraint_residuals(&traj);
        let fuel_hi = res.iter().find(|r| r.stage == 0 && r.channel == "doi_fuel" && r.side == BoundSide::Upper).unwrap();
        assert_eq!(fuel_hi.margin, 0.0);
        let mprr_hi = res.iter().find(|r| r.stage == 1 && r.channel == "mprr" && r.side == BoundSide::Upper).unwrap();
        assert_eq!(mprr_hi.margin, -1.0);
    }
}
