//! Horizon linearization and elimination of the state trajectory.
//!
//! The linearized augmented state is `z = [c; h; u_prev; imep_fb; ca50_fb]`
//! (13 entries). Per stage:
//!
//! ```text
//! z_{i+1} = A_i z_i + B_i Δu_i
//! y_i     = C_i z_i + D_i Δu_i
//! ```

use nalgebra::{Const, DMatrix, DVector, Dyn, OMatrix, SMatrix};

use super::qp::QpProblem;
use super::SolverConfig;
use crate::nn::{ModelOutput, N_STATE};
use crate::ocp::{OcpError, OcpProblem, Trajectory, N_ACT, N_RESIDUALS};

pub const N_AUG: usize = N_STATE + N_ACT + 2;
const U0: usize = N_STATE;
const FB0: usize = N_STATE + N_ACT;

#[derive(Debug, Clone, PartialEq)]
pub struct StageLinearization {
    pub a: SMatrix<f64, N_AUG, N_AUG>,
    pub b: SMatrix<f64, N_AUG, N_ACT>,
    pub c: SMatrix<f64, 4, N_AUG>,
    pub d: SMatrix<f64, 4, N_ACT>,
}

#[derive(Debug, Clone)]
pub struct HorizonLinearization {
    pub trajectory: Trajectory,
    /// One block per output stage `0..=N`.
    pub stages: Vec<StageLinearization>,
}

/// Rolls out at the given increments and linearizes every stage about the
/// resulting trajectory.
pub fn linearize_horizon(problem: &OcpProblem, increments: &[[f64; N_ACT]]) -> Result<HorizonLinearization, OcpError> {
    let trajectory = problem.rollout(increments)?;
    let mut stages = Vec::with_capacity(problem.stages());
    for i in 0..problem.stages() {
        let input = OcpProblem::model_input(&trajectory.feedback[i], &trajectory.inputs[i]);
        let j = problem.model.jacobians(&trajectory.states[i].lstm, &input)?;
        let mut a = SMatrix::<f64, N_AUG, N_AUG>::zeros();
        let mut b = SMatrix::<f64, N_AUG, N_ACT>::zeros();
        let mut c = SMatrix::<f64, 4, N_AUG>::zeros();

        a.fixed_view_mut::<N_STATE, N_STATE>(0, 0).copy_from(&j.state_state);
        a.fixed_view_mut::<N_STATE, N_ACT>(0, U0).copy_from(&j.state_input.fixed_columns::<N_ACT>(2));
        a.fixed_view_mut::<N_STATE, 2>(0, FB0).copy_from(&j.state_input.fixed_columns::<2>(0));
        a.fixed_view_mut::<N_ACT, N_ACT>(U0, U0).fill_with_identity();

        c.fixed_view_mut::<4, N_STATE>(0, 0).copy_from(&j.output_state);
        c.fixed_view_mut::<4, N_ACT>(0, U0).copy_from(&j.output_input.fixed_columns::<N_ACT>(2));
        c.fixed_view_mut::<4, 2>(0, FB0).copy_from(&j.output_input.fixed_columns::<2>(0));
        let d: SMatrix<f64, 4, N_ACT> = j.output_input.fixed_columns::<N_ACT>(2).into_owned();

        // the next feedback pair is this stage's imep and ca50
        a.fixed_view_mut::<2, N_AUG>(FB0, 0).copy_from(&c.fixed_rows::<2>(0));

        b.fixed_view_mut::<N_STATE, N_ACT>(0, 0).copy_from(&j.state_input.fixed_columns::<N_ACT>(2));
        b.fixed_view_mut::<N_ACT, N_ACT>(U0, 0).fill_with_identity();
        b.fixed_view_mut::<2, N_ACT>(FB0, 0).copy_from(&d.fixed_rows::<2>(0));

        stages.push(StageLinearization { a, b, c, d });
    }
    Ok(HorizonLinearization { trajectory, stages })
}

/// Dense QP in scaled variables `x = [Δû; s]` with `Δu = T Δû` and one
/// slack per selected (stage, output) bound pair.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub qp: QpProblem,
    pub n_increments: usize,
    /// `(stage, output index)` of each slack, in variable order.
    pub slacks: Vec<(usize, usize)>,
    /// Physical size of one unit of each scaled increment.
    pub scale: DVector<f64>,
    /// Nonlinear cost at the linearization point, the QP objective's constant.
    pub constant: f64,
    /// `∂y_i/∂Δu` in physical units, one 4×3N block per stage.
    pub output_sensitivity: Vec<DMatrix<f64>>,
    pub base_outputs: Vec<ModelOutput>,
}

impl CondensedQp {
    pub fn increments(&self, x: &DVector<f64>) -> Vec<[f64; N_ACT]> {
        (0..self.n_increments / N_ACT)
            .map(|i| std::array::from_fn(|j| self.scale[i * N_ACT + j] * x[i * N_ACT + j]))
            .collect()
    }

    pub fn slack_values<'a>(&'a self, x: &'a DVector<f64>) -> impl Iterator<Item = f64> + 'a {
        x.iter().skip(self.n_increments).copied()
    }

    /// Outputs the linearized model predicts after taking step `x`.
    pub fn predicted_outputs(&self, x: &DVector<f64>) -> Vec<ModelOutput> {
        let step: Vec<f64> = self.increments(x).into_iter().flatten().collect();
        self.base_outputs
            .iter()
            .zip(&self.output_sensitivity)
            .map(|(y, sens)| {
                let mut v = y.to_array();
                for (k, vk) in v.iter_mut().enumerate() {
                    *vk += step.iter().enumerate().map(|(c, d)| sens[(k, c)] * d).sum::<f64>();
                }
                ModelOutput::from_array(v)
            })
            .collect()
    }

    /// Objective of the model including its constant.
    pub fn model_cost(&self, x: &DVector<f64>) -> f64 {
        self.constant + self.qp.objective(x)
    }
}

/// Output-stage sensitivities `∂y_i/∂Δu` obtained by chaining the stage blocks.
pub fn output_sensitivities(lin: &HorizonLinearization, horizon: usize) -> Vec<DMatrix<f64>> {
    let nd = N_ACT * horizon;
    let mut p = OMatrix::<f64, Const<N_AUG>, Dyn>::zeros(nd);
    let mut out = Vec::with_capacity(lin.stages.len());
    for (i, st) in lin.stages.iter().enumerate() {
        let mut s = st.c * &p;
        let mut next = st.a * &p;
        if i < horizon {
            for c in 0..N_ACT {
                let col = i * N_ACT + c;
                for r in 0..4 {
                    s[(r, col)] += st.d[(r, c)];
                }
                for r in 0..N_AUG {
                    next[(r, col)] += st.b[(r, c)];
                }
            }
        }
        out.push(DMatrix::from_column_slice(4, nd, s.as_slice()));
        p = next;
    }
    out
}

/// Stacked weighted residuals `r⁰` and their Jacobian with respect to the
/// physical increments.
pub fn residual_jacobian(problem: &OcpProblem, lin: &HorizonLinearization, sens: &[DMatrix<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = problem.horizon;
    let nd = N_ACT * n;
    let traj = &lin.trajectory;
    let w = &problem.weights;
    let mut r = DVector::zeros(N_RESIDUALS * (n + 1));
    let mut jac = DMatrix::zeros(N_RESIDUALS * (n + 1), nd);
    let sq = [w.q_imep.sqrt(), w.q_ca50.sqrt(), w.q_nox.sqrt()];
    let su = [w.r_doi_fuel.sqrt(), w.r_doi_water.sqrt()];
    for i in 0..=n {
        let row = i * N_RESIDUALS;
        let res = problem.stage_residuals(&traj.outputs[i], &traj.inputs[i], &traj.increments[i], i);
        r.rows_mut(row, N_RESIDUALS).copy_from_slice(&res);
        for k in 0..3 {
            for c in 0..nd {
                jac[(row + k, c)] = sq[k] * sens[i][(k, c)];
            }
        }
        for k in 0..2 {
            for l in 0..=i.min(n - 1) {
                jac[(row + 3 + k, l * N_ACT + k)] = su[k];
            }
        }
        if i < n {
            for k in 0..N_ACT {
                jac[(row + 5 + k, i * N_ACT + k)] = w.r_delta[k].sqrt();
            }
        }
    }
    (r, jac)
}

pub fn condense(problem: &OcpProblem, lin: &HorizonLinearization, config: &SolverConfig) -> CondensedQp {
    let n = problem.horizon;
    let nd = N_ACT * n;
    let traj = &lin.trajectory;
    let bounds = &problem.bounds;
    let sens = output_sensitivities(lin, n);
    let (r0, jac) = residual_jacobian(problem, lin, &sens);

    let range = bounds.input.range();
    let scale = DVector::from_fn(nd, |i, _| if range[i % N_ACT] > 0.0 { range[i % N_ACT] } else { 1.0 });

    let slacks: Vec<(usize, usize)> = (0..=n)
        .flat_map(|i| (0..4).filter(|&k| bounds.output_selected[k]).map(move |k| (i, k)))
        .collect();
    let nx = nd + slacks.len();

    let mut h = DMatrix::zeros(nx, nx);
    let mut g = DVector::zeros(nx);
    let jt = DMatrix::from_fn(jac.nrows(), nd, |r, c| jac[(r, c)] * scale[c]);
    h.view_mut((0, 0), (nd, nd)).copy_from(&(2.0 * jt.tr_mul(&jt)));
    g.rows_mut(0, nd).copy_from(&(2.0 * jt.tr_mul(&r0)));
    for i in 0..nd {
        h[(i, i)] += config.regularization;
    }
    for s in nd..nx {
        h[(s, s)] = 2.0 * config.slack_l2;
        g[s] = config.slack_l1;
    }

    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let (umin, umax) = (bounds.input.min.to_array(), bounds.input.max.to_array());
    for i in 0..n {
        let u = traj.inputs[i].to_array();
        for k in (0..N_ACT).filter(|&k| bounds.input_selected[k]) {
            let span = scale[k];
            let upper: Vec<(usize, f64)> = (0..=i).map(|l| (l * N_ACT + k, 1.0)).collect();
            let lower: Vec<(usize, f64)> = upper.iter().map(|&(c, v)| (c, -v)).collect();
            rows.push((upper, (umax[k] - u[k]) / span));
            rows.push((lower, (u[k] - umin[k]) / span));
        }
    }
    let (ymin, ymax) = (bounds.output_min.to_array(), bounds.output_max.to_array());
    for (si, &(i, k)) in slacks.iter().enumerate() {
        let span = if ymax[k] > ymin[k] { ymax[k] - ymin[k] } else { 1.0 };
        let y = traj.outputs[i].to_array()[k];
        let coeffs: Vec<(usize, f64)> = (0..nd).map(|c| (c, sens[i][(k, c)] * scale[c] / span)).collect();
        let mut upper = coeffs.clone();
        upper.push((nd + si, -1.0 / span));
        let mut lower: Vec<(usize, f64)> = coeffs.iter().map(|&(c, v)| (c, -v)).collect();
        lower.push((nd + si, -1.0 / span));
        rows.push((upper, (ymax[k] - y) / span));
        rows.push((lower, (y - ymin[k]) / span));
        rows.push((vec![(nd + si, -1.0)], 0.0));
    }

    let mut a = DMatrix::zeros(rows.len(), nx);
    let mut b = DVector::zeros(rows.len());
    for (r, (coeffs, rhs)) in rows.into_iter().enumerate() {
        for (c, v) in coeffs {
            a[(r, c)] = v;
        }
        b[r] = rhs;
    }

    CondensedQp {
        qp: QpProblem { h, g, a, b },
        n_increments: nd,
        slacks,
        scale,
        constant: traj.cost,
        output_sensitivity: sens,
        base_outputs: traj.outputs.clone(),
    }
}
