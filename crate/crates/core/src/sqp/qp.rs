//! Dense convex QP `min ½xᵀHx + gᵀx  s.t.  Ax ≤ b` solved with a
//! Mehrotra predictor-corrector primal-dual interior-point method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    fn check(&self) -> Result<(), QpError> {
        let (n, m) = (self.n(), self.m());
        if self.h.shape() != (n, n) || self.a.shape() != (m, n) {
            return Err(QpError::Dimensions {
                h: self.h.shape(),
                g: n,
                a: self.a.shape(),
                b: m,
            });
        }
        let finite = self.h.iter().chain(self.g.iter()).chain(self.a.iter()).chain(self.b.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("inconsistent dimensions: H {h:?}, g {g}, A {a:?}, b {b}")]
    Dimensions {
        h: (usize, usize),
        g: usize,
        a: (usize, usize),
        b: usize,
    },
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Re-solve the equality system of the identified active set and keep
    /// the result when it lowers the KKT residual.
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 60,
            tolerance: 1e-10,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    NumericalFailure,
}

/// Violations of the first-order optimality conditions at a primal-dual pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// `‖Hx + g + Aᵀz‖∞`
    pub stationarity: f64,
    /// `max(Ax - b, 0)`
    pub primal: f64,
    /// `max(-z, 0)`
    pub dual: f64,
    /// `max |z_i (b - Ax)_i|`
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

pub fn kkt_residual(qp: &QpProblem, x: &DVector<f64>, z: &DVector<f64>) -> KktResidual {
    let stat = &qp.h * x + &qp.g + qp.a.tr_mul(z);
    let slack = &qp.b - &qp.a * x;
    KktResidual {
        stationarity: stat.amax(),
        primal: slack.iter().fold(0.0, |m, s| m.max(-s)),
        dual: z.iter().fold(0.0, |m, v| m.max(-v)),
        complementarity: slack.iter().zip(z.iter()).fold(0.0, |m, (s, v)| m.max((s * v).abs())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Inequality multipliers.
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktResidual,
}

/// Largest step in `[0, 1]` keeping `v + α dv >= 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .fold(1.0, |a, (v, d)| a.min(-v / d))
}

struct Newton {
    dx: DVector<f64>,
    ds: DVector<f64>,
    dz: DVector<f64>,
}

fn factor(k: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = k.diagonal().amax().max(1.0);
    let mut delta = 0.0;
    for _ in 0..8 {
        let mut kd = k.clone();
        for i in 0..kd.nrows() {
            kd[(i, i)] += delta;
        }
        if let Some(c) = kd.cholesky() {
            return Some(c);
        }
        delta = if delta == 0.0 { 1e-14 * scale } else { delta * 100.0 };
    }
    None
}

pub fn solve_qp(qp: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    qp.check()?;
    let (n, m) = (qp.n(), qp.m());
    let tol = settings.tolerance;

    if m == 0 {
        let Some(chol) = factor(qp.h.clone()) else {
            return Ok(failure(n, 0, 0, qp));
        };
        let x = chol.solve(&(-&qp.g));
        let z = DVector::zeros(0);
        let kkt = kkt_residual(qp, &x, &z);
        return Ok(QpSolution {
            status: QpStatus::Solved,
            x,
            z,
            iterations: 1,
            kkt,
        });
    }

    let mut x = DVector::zeros(n);
    let mut s = qp.b.map(|b| b.max(1.0));
    let mut z = DVector::from_element(m, 1.0);
    let g_scale = 1.0 + qp.g.amax();
    let b_scale = 1.0 + qp.b.amax();

    for iter in 0..settings.max_iterations {
        let rd = &qp.h * &x + &qp.g + qp.a.tr_mul(&z);
        let rp = &qp.a * &x + &s - &qp.b;
        let mu = s.dot(&z) / m as f64;

        let kkt = kkt_residual(qp, &x, &z);
        if kkt.stationarity <= tol * g_scale && kkt.primal <= tol * b_scale && rp.amax() <= tol * b_scale && mu <= tol {
            let sol = QpSolution {
                x,
                z,
                status: QpStatus::Solved,
                iterations: iter,
                kkt,
            };
            return Ok(if settings.polish { polish(qp, &s, sol) } else { sol });
        }

        let w = z.component_div(&s);
        let mut k = qp.h.clone();
        let aw = DMatrix::from_fn(m, n, |i, j| qp.a[(i, j)] * w[i]);
        k += qp.a.tr_mul(&aw);
        let Some(chol) = factor(k) else {
            return Ok(failure(n, m, iter, qp));
        };

        let solve = |rc: &DVector<f64>| -> Newton {
            let t = (rc + z.component_mul(&rp)).component_div(&s);
            let dx = chol.solve(&(-&rd - qp.a.tr_mul(&t)));
            let ds = -&rp - &qp.a * &dx;
            let dz = (rc - z.component_mul(&ds)).component_div(&s);
            Newton { dx, ds, dz }
        };

        let sz = s.component_mul(&z);
        let aff = solve(&(-&sz));
        let alpha_aff = max_step(&s, &aff.ds).min(max_step(&z, &aff.dz));
        let mu_aff = (&s + alpha_aff * &aff.ds).dot(&(&z + alpha_aff * &aff.dz)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        let rc = (-&sz - aff.ds.component_mul(&aff.dz)).add_scalar(sigma * mu);
        let step = solve(&rc);
        let alpha = (0.99 * max_step(&s, &step.ds).min(max_step(&z, &step.dz))).min(1.0);

        x += alpha * &step.dx;
        s += alpha * &step.ds;
        z += alpha * &step.dz;
        if !(x.iter().chain(s.iter()).chain(z.iter()).all(|v| v.is_finite())) {
            return Ok(failure(n, m, iter + 1, qp));
        }
    }
    let kkt = kkt_residual(qp, &x, &z);
    Ok(QpSolution {
        x,
        z,
        status: QpStatus::MaxIterations,
        iterations: settings.max_iterations,
        kkt,
    })
}

/// Active-set refinement of an interior-point solution. Constraints whose
/// multiplier exceeds their slack are taken as active.
fn polish(qp: &QpProblem, s: &DVector<f64>, sol: QpSolution) -> QpSolution {
    let n = qp.n();
    let active: Vec<usize> = (0..qp.m()).filter(|&i| sol.z[i] > s[i]).collect();
    let k = active.len();
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
    let Some(v) = kkt.lu().solve(&rhs) else {
        return sol;
    };
    if !v.iter().all(|x| x.is_finite()) {
        return sol;
    }
    let x = v.rows(0, n).into_owned();
    let mut z = DVector::zeros(qp.m());
    for (r, &i) in active.iter().enumerate() {
        z[i] = v[n + r];
    }
    let res = kkt_residual(qp, &x, &z);
    if res.max() <= sol.kkt.max() {
        QpSolution { x, z, kkt: res, ..sol }
    } else {
        sol
    }
}

fn failure(n: usize, m: usize, iterations: usize, qp: &QpProblem) -> QpSolution {
    let x = DVector::zeros(n);
    let z = DVector::zeros(m);
    let kkt = kkt_residual(qp, &x, &z);
    QpSolution {
        x,
        z,
        status: QpStatus::NumericalFailure,
        iterations,
        kkt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn unconstrained_minimizer() {
        let qp = QpProblem {
            h: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]),
            g: DVector::from_vec(vec![1.0, 2.0]),
            a: DMatrix::zeros(0, 2),
            b: DVector::zeros(0),
        };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        // [4 1; 1 3] x = -[1; 2]
        assert_abs_diff_eq!(sol.x[0], -1.0 / 11.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.x[1], -7.0 / 11.0, epsilon = 1e-14);
    }

    #[test]
    fn scalar_with_active_bound() {
        // min (x - 3)² / 2 s.t. x <= 1
        let qp = QpProblem {
            h: DMatrix::from_element(1, 1, 1.0),
            g: DVector::from_element(1, -3.0),
            a: DMatrix::from_element(1, 1, 1.0),
            b: DVector::from_element(1, 1.0),
        };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.z[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn projection_onto_simplex_corner() {
        // nearest point to (1, 1) with x + y <= 1, x >= 0, y >= 0 is (0.5, 0.5)
        let qp = QpProblem {
            h: DMatrix::identity(2, 2),
            g: DVector::from_vec(vec![-1.0, -1.0]),
            a: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            b: DVector::from_vec(vec![1.0, 0.0, 0.0]),
        };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[1], 0.5, epsilon = 1e-9);
        assert!(sol.kkt.max() < 1e-8);
    }

    #[test]
    fn polishing_settles_degenerate_bound() {
        // min x²/2 + y²/2 - y s.t. x >= 0, y <= 2: x = 0 sits on its bound
        // with a zero multiplier
        let qp = QpProblem {
            h: DMatrix::identity(2, 2),
            g: DVector::from_vec(vec![0.0, -1.0]),
            a: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]),
            b: DVector::from_vec(vec![0.0, 2.0]),
        };
        let rough = solve_qp(
            &qp,
            &QpSettings {
                polish: false,
                ..QpSettings::default()
            },
        )
        .unwrap();
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(sol.kkt.max() <= rough.kkt.max());
        assert!(sol.x[0].abs() <= 1e-14 && (sol.x[1] - 1.0).abs() <= 1e-14, "{}", sol.x);
    }

    #[test]
    fn inactive_constraints_leave_unconstrained_solution() {
        let qp = QpProblem {
            h: DMatrix::identity(2, 2) * 2.0,
            g: DVector::from_vec(vec![-2.0, 4.0]),
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            b: DVector::from_vec(vec![100.0, 100.0]),
        };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[1], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        let mut qp = QpProblem {
            h: DMatrix::identity(2, 2),
            g: DVector::zeros(2),
            a: DMatrix::zeros(1, 3),
            b: DVector::zeros(1),
        };
        assert!(matches!(solve_qp(&qp, &QpSettings::default()), Err(QpError::Dimensions { .. })));
        qp.a = DMatrix::zeros(1, 2);
        qp.g[0] = f64::NAN;
        assert_eq!(solve_qp(&qp, &QpSettings::default()), Err(QpError::NonFinite));
    }
}
