#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use safe_maddpg::qp::QpProblem;

/// Random strictly convex problem with `n` variables and `r` rows. The
/// constraints are satisfied with positive slack at a random interior point,
/// so the problem is always feasible.
pub fn feasible_instance(rng: &mut ChaCha8Rng, n: usize, r: usize) -> QpProblem {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let hessian = m.transpose() * &m / n as f64 + DMatrix::identity(n, n) * rng.gen_range(0.1..1.0);
    let linear_cost = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let a = DMatrix::from_fn(r, n, |_, _| rng.gen_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let slack = DVector::from_fn(r, |_, _| rng.gen_range(0.0..0.5));
    let b = &a * x0 + slack;
    QpProblem {
        hessian,
        linear_cost,
        ineq_matrix: a,
        ineq_rhs: b,
    }
}

pub struct OracleResult {
    pub primal: DVector<f64>,
    pub dual: DVector<f64>,
    pub dual_objective: f64,
    pub iterations: usize,
}

/// Accelerated projected gradient ascent on the Lagrange dual
///
/// ```text
///     max_{lambda >= 0}  -1/2 (f + A'l)' H^{-1} (f + A'l) - b'l
/// ```
///
/// with adaptive restart. Uses an explicit inverse of `H`, so it shares no
/// factorization or active-set logic with the solver under test.
pub fn projected_gradient_oracle(problem: &QpProblem, max_iterations: usize) -> OracleResult {
    let r = problem.n_rows();
    let h_inv = problem.hessian.clone().try_inverse().expect("hessian is invertible");
    let a = &problem.ineq_matrix;
    let b = &problem.ineq_rhs;
    let f = &problem.linear_cost;
    let primal_of = |lam: &DVector<f64>| -(&h_inv * (f + a.transpose() * lam));
    // D(l) = -1/2 l'Ml - c'l - k with M = A H^{-1} A', c = A H^{-1} f + b
    let m = a * &h_inv * a.transpose();
    let c = a * (&h_inv * f) + b;
    let k = 0.5 * f.dot(&(&h_inv * f));
    let dual_value = |lam: &DVector<f64>| -0.5 * lam.dot(&(&m * lam)) - c.dot(lam) - k;
    if r == 0 {
        return OracleResult {
            primal: primal_of(&DVector::zeros(0)),
            dual: DVector::zeros(0),
            dual_objective: -k,
            iterations: 0,
        };
    }
    let lipschitz = m.clone().symmetric_eigenvalues().amax().max(1e-12);
    let step = 1.0 / lipschitz;

    let mut lam = DVector::<f64>::zeros(r);
    let mut y = lam.clone();
    let mut next = lam.clone();
    let mut grad = lam.clone();
    let mut work = lam.clone();
    let mut t = 1.0f64;
    let mut value = dual_value(&lam);
    let mut iterations = 0;
    // buffers are reused, the iteration runs up to 200k times per instance
    for it in 0..max_iterations {
        iterations = it + 1;
        grad.copy_from(&c);
        grad.gemv(-1.0, &m, &y, -1.0);
        next.copy_from(&y);
        next.axpy(step, &grad, 1.0);
        next.apply(|v| *v = v.max(0.0));
        work.gemv(1.0, &m, &next, 0.0);
        let next_value = -0.5 * next.dot(&work) - c.dot(&next) - k;
        let moved = next.iter().zip(lam.iter()).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        if next_value < value {
            // restart momentum
            y.copy_from(&lam);
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y.copy_from(&next);
        y.axpy(beta, &next, 1.0);
        y.axpy(-beta, &lam, 1.0);
        t = t_next;
        std::mem::swap(&mut lam, &mut next);
        value = next_value;
        if moved <= 1e-13 * (1.0 + lam.amax()) {
            break;
        }
    }
    OracleResult {
        primal: primal_of(&lam),
        dual: lam,
        dual_objective: value,
        iterations,
    }
}
