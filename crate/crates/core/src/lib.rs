//! LSTM-surrogate nonlinear model predictive control for cycle-to-cycle
//! combustion control.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] evaluates the recurrent surrogate and its exact sensitivities.
//! * [`plant`] is a synthetic ground-truth engine with cycle-to-cycle coupling.
//! * [`trainer`] generates data and fits the surrogate with truncated BPTT.
//! * [`ocp`] builds the Δu-augmented optimal control problem.
//! * [`sqp`] solves it with Gauss–Newton SQP over a condensed interior-point QP.
//! * [`bridge`] runs plant and controller as separate UDP nodes.
//! * [`sim`] drives closed-loop experiments, benchmarks and reports.

pub mod bridge;
pub mod config;
pub mod nn;
pub mod plant;
pub mod ocp;
pub mod sqp;
pub mod sim;
pub mod trainer;
