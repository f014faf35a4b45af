//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use hcci_nmpc::nn::{Activation, LstmState, NetworkSpec, NetworkWeights, Normalization, N_HIDDEN};
use hcci_nmpc::ocp::{AugmentedState, Bounds, CostWeights, Feedback, OcpProblem, Reference};
use hcci_nmpc::plant::Actuation;
use hcci_nmpc::sqp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn plant_like_norm() -> Normalization {
    Normalization {
        input_offset: [3.0, 6.0, 0.75, 0.5, 255.0],
        input_scale: [1.2, 4.0, 0.4, 0.3, 60.0],
        output_offset: [3.0, 6.0, 150.0, 5.0],
        output_scale: [1.2, 4.0, 90.0, 3.0],
    }
}

pub fn random_model(rng: &mut ChaCha8Rng) -> NetworkWeights {
    NetworkWeights::random(NetworkSpec::default(), plant_like_norm(), rng).unwrap()
}

/// All activations linear and the input, forget and output gates saturated
/// open, so one step is affine in state and input.
pub fn linear_model(rng: &mut ChaCha8Rng) -> NetworkWeights {
    let spec = NetworkSpec {
        layers: NetworkSpec::default()
            .layers
            .into_iter()
            .map(|mut l| {
                l.activation = Activation::Linear;
                l
            })
            .collect(),
    };
    let mut w = NetworkWeights::random(spec, plant_like_norm(), rng).unwrap();
    let idx = w.spec.lstm_index();
    let l = w.spec.layers[idx];
    let bias0 = w.spec.offsets()[idx] + 4 * N_HIDDEN * (l.input_width + N_HIDDEN);
    for g in [0, 1, 3] {
        for j in 0..N_HIDDEN {
            w.params[bias0 + g * N_HIDDEN + j] = 60.0;
        }
    }
    w
}

pub fn problem(model: NetworkWeights, horizon: usize, weights: CostWeights, bounds: Bounds, r_imep: f64) -> OcpProblem {
    OcpProblem::new(
        Arc::new(model),
        horizon,
        weights,
        bounds,
        Reference::constant(r_imep, 6.0, horizon + 1),
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

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Strictly convex QP with `x = 0` strictly feasible.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let mut rn = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| gaussian(rng));
    let f = rn(n, n);
    let h = f.tr_mul(&f) + DMatrix::identity(n, n) * 0.1;
    let g = rn(n, 1).column(0) * 3.0;
    let a = rn(m, n);
    let b = DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0));
    QpProblem {
        h,
        g: g.into_owned(),
        a,
        b,
    }
}

/// Brute-force active-set enumeration: the first subset (by increasing size)
/// whose equality-constrained optimum is primal and dual feasible.
pub fn enumerate_qp(qp: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let (n, m) = (qp.n(), qp.m());
    let mut subset = Vec::new();
    for k in 0..=n.min(m) {
        if let Some(found) = search(qp, 0, k, &mut subset) {
            return Some(found);
        }
    }
    let _ = m;
    None
}

fn search(qp: &QpProblem, start: usize, left: usize, subset: &mut Vec<usize>) -> Option<(DVector<f64>, f64)> {
    if left == 0 {
        return solve_active(qp, subset);
    }
    for i in start..=qp.m() - left {
        // a row and its mirror cannot both be active
        if subset.iter().any(|&j| (0..qp.n()).all(|c| qp.a[(i, c)] == -qp.a[(j, c)])) {
            continue;
        }
        subset.push(i);
        let r = search(qp, i + 1, left - 1, subset);
        subset.pop();
        if r.is_some() {
            return r;
        }
    }
    None
}

fn solve_active(qp: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, f64)> {
    let (n, k) = (qp.n(), active.len());
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&qp.g));
    for (r, &i) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + r, c)] = qp.a[(i, c)];
            kkt[(c, n + r)] = qp.a[(i, c)];
        }
        rhs[n + r] = qp.b[i];
    }
    if k > 0 {
        // dependent active rows leave the system singular
        let rows = DMatrix::from_fn(k, n, |r, c| qp.a[(active[r], c)]);
        let sv = rows.singular_values();
        if sv.min() <= 1e-9 * sv.max() {
            return None;
        }
    }
    let sol = kkt.lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let tol = 1e-9;
    if sol.rows(n, k).iter().any(|&l| l < -tol) {
        return None;
    }
    let slack = &qp.b - &qp.a * &x;
    if slack.iter().any(|&s| s < -tol) {
        return None;
    }
    let obj = qp.objective(&x);
    Some((x, obj))
}
