//! Dense strictly convex quadratic programs
//!
//! ```text
//!     minimize    1/2 x' H x + f' x
//!     subject to  A x <= b
//! ```
//!
//! solved with the Goldfarb–Idnani dual active-set method, plus the builders
//! for the hard and soft action-projection problems of the safety layer.
//!
//! The solver starts from the unconstrained minimizer `-H^{-1} f` and adds
//! violated constraints one at a time (most violated first, measured as
//! distance to the half-space), dropping active constraints whose multipliers
//! would turn negative. If a violated constraint can't be added because its
//! normal is spanned by the active set and no multiplier blocks the dual step,
//! the dual is unbounded and the problem is reported infeasible.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear_cost: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub primal: Vec<f64>,
    /// One multiplier per inequality row; zero for inactive rows.
    pub dual: Vec<f64>,
    pub status: QpStatus,
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

impl QpProblem {
    pub fn n_vars(&self) -> usize {
        self.linear_cost.len()
    }

    pub fn n_rows(&self) -> usize {
        self.ineq_rhs.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        0.5 * x.dot(&(&self.hessian * &x)) + self.linear_cost.dot(&x)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        check_len("qp hessian rows", n, self.hessian.nrows())?;
        check_len("qp hessian cols", n, self.hessian.ncols())?;
        check_len("qp constraint rows", self.n_rows(), self.ineq_matrix.nrows())?;
        if self.n_rows() > 0 {
            check_len("qp constraint cols", n, self.ineq_matrix.ncols())?;
        }
        let finite = self.hessian.iter().all(|v| v.is_finite())
            && self.linear_cost.iter().all(|v| v.is_finite())
            && self.ineq_matrix.iter().all(|v| v.is_finite())
            && self.ineq_rhs.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("qp data"));
        }
        let scale = self.hessian.amax().max(1.0);
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::HessianNotSymmetric(asym));
        }
        Ok(())
    }

    /// Plain-text dump for cross-checking against other solvers: a header
    /// line `qp <n> <r>`, then sections `H` (n rows), `f` (1 row), `A`
    /// (r rows) and `b` (1 row), whitespace-separated, shortest round-trip
    /// float formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let n = self.n_vars();
        let r = self.n_rows();
        let row = |out: &mut String, vals: &mut dyn Iterator<Item = f64>| {
            let parts: Vec<String> = vals.map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", parts.join(" "));
        };
        let _ = writeln!(out, "qp {n} {r}");
        out.push_str("H\n");
        for i in 0..n {
            row(&mut out, &mut (0..n).map(|j| self.hessian[(i, j)]));
        }
        out.push_str("f\n");
        row(&mut out, &mut self.linear_cost.iter().copied());
        out.push_str("A\n");
        for i in 0..r {
            row(&mut out, &mut (0..n).map(|j| self.ineq_matrix[(i, j)]));
        }
        out.push_str("b\n");
        row(&mut out, &mut self.ineq_rhs.iter().copied());
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end of input, expected {what}")))
        };
        let (ln, header) = next("header")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "qp" {
            return Err(Error::Parse(format!("line {}: expected `qp <n> <r>`", ln + 1)));
        }
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))
        };
        let (n, r) = (dim(parts[1])?, dim(parts[2])?);

        let mut read_rows = |tag: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
            let (ln, line) = next(tag)?;
            if line.trim() != tag {
                return Err(Error::Parse(format!("line {}: expected section `{tag}`", ln + 1)));
            }
            let mut vals = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, line) = next(tag)?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?;
                if row.len() != cols {
                    return Err(Error::Parse(format!(
                        "line {}: expected {cols} values, found {}",
                        ln + 1,
                        row.len()
                    )));
                }
                vals.extend(row);
            }
            Ok(vals)
        };
        let h = read_rows("H", n, n)?;
        let f = read_rows("f", 1, n)?;
        let a = if r > 0 { read_rows("A", r, n)? } else { read_rows("A", 0, n)? };
        let b = read_rows("b", 1, r)?;
        Ok(QpProblem {
            hessian: DMatrix::from_row_slice(n, n, &h),
            linear_cost: DVector::from_vec(f),
            ineq_matrix: DMatrix::from_row_slice(r, n, &a),
            ineq_rhs: DVector::from_vec(b),
        })
    }
}

/// Residuals of the KKT conditions at a candidate primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `max |H x + f + A' lambda|`
    pub stationarity: f64,
    /// `max(0, max_j (A x - b)_j)`
    pub primal_violation: f64,
    /// `max(0, -min_j lambda_j)`
    pub dual_violation: f64,
    /// `max_j |lambda_j (A x - b)_j|`
    pub complementarity: f64,
}

impl KktReport {
    /// Acceptance thresholds: stationarity `<= 1e-6 (1 + |f|_inf)`, primal
    /// feasibility and complementarity `<= 1e-8`, multipliers non-negative.
    pub fn passes(&self, problem: &QpProblem) -> bool {
        let f_inf = problem.linear_cost.amax();
        self.stationarity <= 1e-6 * (1.0 + f_inf)
            && self.primal_violation <= 1e-8
            && self.dual_violation <= 1e-8
            && self.complementarity <= 1e-8
    }
}

/// Evaluates the KKT residuals with plain loops over the problem data.
pub fn kkt_residuals(problem: &QpProblem, primal: &[f64], dual: &[f64]) -> Result<KktReport> {
    let n = problem.n_vars();
    let r = problem.n_rows();
    check_len("kkt primal", n, primal.len())?;
    check_len("kkt dual", r, dual.len())?;
    let mut stationarity = 0.0f64;
    for i in 0..n {
        let mut g = problem.linear_cost[i];
        for j in 0..n {
            g += problem.hessian[(i, j)] * primal[j];
        }
        for k in 0..r {
            g += problem.ineq_matrix[(k, i)] * dual[k];
        }
        stationarity = stationarity.max(g.abs());
    }
    let mut primal_violation = 0.0f64;
    let mut complementarity = 0.0f64;
    let mut dual_violation = 0.0f64;
    for k in 0..r {
        let mut ax = 0.0;
        for j in 0..n {
            ax += problem.ineq_matrix[(k, j)] * primal[j];
        }
        let resid = ax - problem.ineq_rhs[k];
        primal_violation = primal_violation.max(resid);
        complementarity = complementarity.max((dual[k] * resid).abs());
        dual_violation = dual_violation.max(-dual[k]);
    }
    Ok(KktReport {
        stationarity,
        primal_violation,
        dual_violation,
        complementarity,
    })
}

/// Relative threshold below which a new constraint normal counts as spanned
/// by the active normals.
const DEPENDENCE_TOL: f64 = 1e-10;

/// Solves `problem` with the dual active-set method. `tolerance` is the
/// largest constraint violation accepted at termination.
pub fn solve_qp(problem: &QpProblem, tolerance: f64) -> Result<QpSolution> {
    problem.validate()?;
    if !(tolerance > 0.0) {
        return Err(Error::config("tolerance", "must be positive"));
    }
    let n = problem.n_vars();
    let m = problem.n_rows();
    let chol: Cholesky<f64, Dyn> =
        Cholesky::new(problem.hessian.clone()).ok_or(Error::HessianNotPositiveDefinite)?;
    let l = chol.l();

    let mut x = chol.solve(&(-&problem.linear_cost));
    let row_norms: Vec<f64> = (0..m)
        .map(|j| problem.ineq_matrix.row(j).norm())
        .collect();
    // normals of the active constraints written as n' x >= c with n = -a
    let normal = |j: usize| -> DVector<f64> { -problem.ineq_matrix.row(j).transpose() };
    let slack = |x: &DVector<f64>, j: usize| -> f64 {
        problem.ineq_rhs[j] - problem.ineq_matrix.row(j).dot(&x.transpose())
    };

    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut multipliers: Vec<f64> = Vec::with_capacity(n);
    let max_iterations = 50 * (n + m) + 100;
    let mut iterations = 0usize;

    loop {
        // pick the most violated inactive constraint
        let mut candidate: Option<(usize, f64)> = None;
        for j in 0..m {
            if active.contains(&j) {
                continue;
            }
            let s = slack(&x, j);
            if s >= -tolerance {
                continue;
            }
            let scaled = if row_norms[j] > 0.0 { s / row_norms[j] } else { s };
            if candidate.map_or(true, |(_, best)| scaled < best) {
                candidate = Some((j, scaled));
            }
        }
        let Some((p, _)) = candidate else {
            break;
        };
        if row_norms[p] == 0.0 {
            // 0 <= b_p with b_p < 0
            return Ok(infeasible(x, m, &active, &multipliers, iterations));
        }

        let n_p = normal(p);
        let d = l.solve_lower_triangular(&n_p).expect("cholesky factor is nonsingular");
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(Error::QpIterationLimit(max_iterations));
            }
            let q = active.len();
            let (z, r) = if q == 0 {
                (d.clone(), DVector::zeros(0))
            } else {
                let mut b = DMatrix::zeros(n, q);
                for (col, &j) in active.iter().enumerate() {
                    let bj = l
                        .solve_lower_triangular(&normal(j))
                        .expect("cholesky factor is nonsingular");
                    b.set_column(col, &bj);
                }
                let qr = b.qr();
                let q1 = qr.q();
                let rr = qr.r();
                let w = q1.transpose() * &d;
                let r = rr
                    .solve_upper_triangular(&w)
                    .ok_or(Error::DegenerateActiveSet)?;
                (&d - &q1 * &w, r)
            };
            // z currently holds the component of d orthogonal to the active
            // normals; the primal direction is L^{-T} of it.
            let perp_norm = z.norm();
            let dependent = perp_norm <= DEPENDENCE_TOL * d.norm().max(1e-300);

            // largest dual step keeping active multipliers non-negative
            let mut partial: Option<(usize, f64)> = None;
            for (idx, (&u, &rj)) in multipliers.iter().zip(r.iter()).enumerate() {
                if rj > 0.0 {
                    let t = u / rj;
                    if partial.map_or(true, |(_, best)| t < best) {
                        partial = Some((idx, t));
                    }
                }
            }

            if dependent {
                let Some((k, t)) = partial else {
                    return Ok(infeasible(x, m, &active, &multipliers, iterations));
                };
                for (u, rj) in multipliers.iter_mut().zip(r.iter()) {
                    *u = (*u - t * rj).max(0.0);
                }
                u_p += t;
                active.remove(k);
                multipliers.remove(k);
                continue;
            }

            let step_dir = l
                .tr_solve_lower_triangular(&z)
                .expect("cholesky factor is nonsingular");
            let curvature = perp_norm * perp_norm;
            let s_p = slack(&x, p);
            let full = -s_p / curvature;
            let (t, blocking) = match partial {
                Some((k, t1)) if t1 < full => (t1, Some(k)),
                _ => (full, None),
            };
            x += &step_dir * t;
            for (u, rj) in multipliers.iter_mut().zip(r.iter()) {
                *u = (*u - t * rj).max(0.0);
            }
            u_p += t;
            match blocking {
                None => {
                    active.push(p);
                    multipliers.push(u_p);
                    break;
                }
                Some(k) => {
                    active.remove(k);
                    multipliers.remove(k);
                }
            }
        }
    }

    if let Some((xp, up)) = polish(problem, &active) {
        let worst = |x: &DVector<f64>| (0..m).map(|j| -slack(x, j)).fold(0.0f64, f64::max);
        if up.iter().all(|&u| u >= 0.0) && worst(&xp) <= worst(&x).max(tolerance) {
            x = xp;
            multipliers = up;
        }
    }

    let mut dual = vec![0.0; m];
    for (&j, &u) in active.iter().zip(&multipliers) {
        dual[j] = u;
    }
    Ok(QpSolution {
        primal: x.iter().copied().collect(),
        dual,
        status: QpStatus::Optimal,
        active_set: active,
        iterations,
    })
}

/// Re-solves the equality-constrained problem on the final active set
/// (plain `H x = -f` when nothing is active).
///
/// The dual iterates start from the unconstrained minimizer, which for the
/// soft projection sits near `-rho / (2 slack_reg)`; walking back from there
/// leaves cancellation error far above the feasibility tolerance. Solving the
/// KKT system directly removes it.
fn polish(problem: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, Vec<f64>)> {
    let n = problem.n_vars();
    let q = active.len();
    let mut kkt = DMatrix::zeros(n + q, n + q);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
    let mut rhs = DVector::zeros(n + q);
    rhs.rows_mut(0, n).copy_from(&(-&problem.linear_cost));
    for (col, &j) in active.iter().enumerate() {
        for i in 0..n {
            let a = problem.ineq_matrix[(j, i)];
            kkt[(i, n + col)] = a;
            kkt[(n + col, i)] = a;
        }
        rhs[n + col] = problem.ineq_rhs[j];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, q).iter().copied().collect()))
}

fn infeasible(
    x: DVector<f64>,
    m: usize,
    active: &[usize],
    multipliers: &[f64],
    iterations: usize,
) -> QpSolution {
    let mut dual = vec![0.0; m];
    for (&j, &u) in active.iter().zip(multipliers) {
        dual[j] = u;
    }
    QpSolution {
        primal: x.iter().copied().collect(),
        dual,
        status: QpStatus::Infeasible,
        active_set: active.to_vec(),
        iterations,
    }
}

/// Inputs of the action-projection problems.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpec {
    /// Concatenated policy outputs, agent-major.
    pub proposed_action: Vec<f64>,
    /// One sensitivity row per constraint, each of the joint action length.
    pub constraint_sensitivities: Vec<Vec<f64>>,
    /// `C_j - c_j(x)` per constraint (already tightened if requested).
    pub constraint_margins: Vec<f64>,
    pub action_bound: f64,
    pub rho: f64,
    /// Quadratic weight on the slacks that keeps the soft problem strictly convex.
    pub slack_reg: f64,
}

impl ProjectionSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.proposed_action.len();
        check_len(
            "projection margins",
            self.constraint_sensitivities.len(),
            self.constraint_margins.len(),
        )?;
        for row in &self.constraint_sensitivities {
            check_len("projection sensitivity row", n, row.len())?;
        }
        if !(self.rho > 0.0) {
            return Err(Error::config("rho", format!("must be positive, got {}", self.rho)));
        }
        if !(self.slack_reg > 0.0) {
            return Err(Error::config("slack_reg", "must be positive"));
        }
        if !(self.action_bound > 0.0) {
            return Err(Error::config("action_bound", "must be positive"));
        }
        Ok(())
    }

    fn n_actions(&self) -> usize {
        self.proposed_action.len()
    }

    fn n_constraints(&self) -> usize {
        self.constraint_margins.len()
    }
}

fn push_box_rows(a: &mut DMatrix<f64>, b: &mut DVector<f64>, first_row: usize, dims: usize, bound: f64) {
    for d in 0..dims {
        a[(first_row + 2 * d, d)] = 1.0;
        b[first_row + 2 * d] = bound;
        a[(first_row + 2 * d + 1, d)] = -1.0;
        b[first_row + 2 * d + 1] = bound;
    }
}

/// `min |a - proposal|^2` subject to `g_j' a <= margin_j` and `|a_d| <= bound`.
///
/// Rows: the `K` sensitivity rows first, then `a_d <= bound`, `-a_d <= bound`
/// interleaved per dimension.
pub fn build_hard_projection(spec: &ProjectionSpec) -> Result<QpProblem> {
    spec.validate()?;
    let n = spec.n_actions();
    let k = spec.n_constraints();
    let rows = k + 2 * n;
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    for (j, (g, margin)) in spec
        .constraint_sensitivities
        .iter()
        .zip(&spec.constraint_margins)
        .enumerate()
    {
        for (d, gd) in g.iter().enumerate() {
            a[(j, d)] = *gd;
        }
        b[j] = *margin;
    }
    push_box_rows(&mut a, &mut b, k, n, spec.action_bound);
    Ok(QpProblem {
        hessian: DMatrix::identity(n, n) * 2.0,
        linear_cost: DVector::from_iterator(n, spec.proposed_action.iter().map(|p| -2.0 * p)),
        ineq_matrix: a,
        ineq_rhs: b,
    })
}

/// `min |a - proposal|^2 + rho * sum(eps) + slack_reg * |eps|^2` over `(a, eps)`
/// subject to `g_j' a - eps_j <= margin_j`, `eps_j >= 0` and `|a_d| <= bound`.
///
/// Rows: `K` softened sensitivity rows, `K` rows `-eps_j <= 0`, then the
/// action box rows.
pub fn build_soft_projection(spec: &ProjectionSpec) -> Result<QpProblem> {
    spec.validate()?;
    let n = spec.n_actions();
    let k = spec.n_constraints();
    let vars = n + k;
    let rows = 2 * k + 2 * n;
    let mut h = DMatrix::zeros(vars, vars);
    for i in 0..n {
        h[(i, i)] = 2.0;
    }
    for j in 0..k {
        h[(n + j, n + j)] = 2.0 * spec.slack_reg;
    }
    let mut f = DVector::zeros(vars);
    for (i, p) in spec.proposed_action.iter().enumerate() {
        f[i] = -2.0 * p;
    }
    for j in 0..k {
        f[n + j] = spec.rho;
    }
    let mut a = DMatrix::zeros(rows, vars);
    let mut b = DVector::zeros(rows);
    for (j, (g, margin)) in spec
        .constraint_sensitivities
        .iter()
        .zip(&spec.constraint_margins)
        .enumerate()
    {
        for (d, gd) in g.iter().enumerate() {
            a[(j, d)] = *gd;
        }
        a[(j, n + j)] = -1.0;
        b[j] = *margin;
        a[(k + j, n + j)] = -1.0;
    }
    push_box_rows(&mut a, &mut b, 2 * k, n, spec.action_bound);
    Ok(QpProblem {
        hessian: h,
        linear_cost: f,
        ineq_matrix: a,
        ineq_rhs: b,
    })
}

/// Splits an optimal projection solution into `(action, slacks)`; hard
/// problems yield an empty slack vector.
pub fn extract_action(solution: &QpSolution, n_action_dims: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !solution.is_optimal() {
        return Err(Error::NotOptimal);
    }
    if solution.primal.len() < n_action_dims {
        return Err(Error::DimensionMismatch {
            context: "projection solution",
            expected: n_action_dims,
            actual: solution.primal.len(),
        });
    }
    let (action, slack) = solution.primal.split_at(n_action_dims);
    Ok((action.to_vec(), slack.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const TOL: f64 = 1e-10;

    fn problem(h: &[f64], f: &[f64], a: &[f64], b: &[f64]) -> QpProblem {
        let n = f.len();
        let r = b.len();
        QpProblem {
            hessian: DMatrix::from_row_slice(n, n, h),
            linear_cost: DVector::from_column_slice(f),
            ineq_matrix: DMatrix::from_row_slice(r, n, a),
            ineq_rhs: DVector::from_column_slice(b),
        }
    }

    #[test]
    fn unconstrained_projection() {
        let p = [0.3, -0.7, 0.2];
        let qp = problem(
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &p.map(|v| -v),
            &[],
            &[],
        );
        let sol = solve_qp(&qp, TOL).unwrap();
        assert!(sol.is_optimal());
        assert!(sol.active_set.is_empty());
        for (x, e) in sol.primal.iter().zip(p) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-14);
        }
    }

    #[test]
    fn one_dimensional_active_bound() {
        // (x - 1)^2 = x^2 - 2x + 1  ->  H = 2, f = -2
        let qp = problem(&[2.0], &[-2.0], &[1.0], &[0.0]);
        let sol = solve_qp(&qp, TOL).unwrap();
        assert!(sol.is_optimal());
        assert_abs_diff_eq!(sol.primal[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.dual[0], 2.0, epsilon = 1e-12);
        assert_eq!(sol.active_set, vec![0]);
    }

    #[test]
    fn contradictory_half_lines_are_infeasible() {
        let qp = problem(&[2.0], &[0.0], &[1.0, -1.0], &[-1.0, -1.0]);
        let sol = solve_qp(&qp, TOL).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn zero_row_with_negative_rhs_is_infeasible() {
        let qp = problem(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], &[-1.0]);
        assert_eq!(solve_qp(&qp, TOL).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_bad_hessians() {
        let asym = problem(&[1.0, 0.5, 0.0, 1.0], &[0.0, 0.0], &[], &[]);
        assert!(matches!(solve_qp(&asym, TOL), Err(Error::HessianNotSymmetric(_))));
        let indefinite = problem(&[1.0, 0.0, 0.0, -1.0], &[0.0, 0.0], &[], &[]);
        assert!(matches!(
            solve_qp(&indefinite, TOL),
            Err(Error::HessianNotPositiveDefinite)
        ));
        let semidefinite = problem(&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0], &[], &[]);
        assert!(solve_qp(&semidefinite, TOL).is_err());
    }

    #[test]
    fn textbook_two_variable_problem() {
        // min 1/2 x^2 + 1/2 y^2 + x  s.t. x + 2y >= 1  ->  (-0.6, 0.8)
        let qp = problem(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0], &[-1.0, -2.0], &[-1.0]);
        let sol = solve_qp(&qp, TOL).unwrap();
        assert_abs_diff_eq!(sol.primal[0], -0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.primal[1], 0.8, epsilon = 1e-12);
        let kkt = kkt_residuals(&qp, &sol.primal, &sol.dual).unwrap();
        assert!(kkt.passes(&qp), "{kkt:?}");
    }

    #[test]
    fn dependent_constraint_drops_blocker() {
        // x <= 1 and 2x <= 1 with unconstrained optimum x = 3
        let qp = problem(&[1.0], &[-3.0], &[1.0, 2.0], &[1.0, 1.0]);
        let sol = solve_qp(&qp, TOL).unwrap();
        assert!(sol.is_optimal());
        assert_abs_diff_eq!(sol.primal[0], 0.5, epsilon = 1e-12);
        let kkt = kkt_residuals(&qp, &sol.primal, &sol.dual).unwrap();
        assert!(kkt.passes(&qp), "{kkt:?}");
    }

    fn spec(proposal: Vec<f64>, rows: Vec<Vec<f64>>, margins: Vec<f64>) -> ProjectionSpec {
        ProjectionSpec {
            proposed_action: proposal,
            constraint_sensitivities: rows,
            constraint_margins: margins,
            action_bound: 1.0,
            rho: 1000.0,
            slack_reg: 1e-6,
        }
    }

    #[test]
    fn hard_projection_without_constraints_clamps() {
        let s = spec(vec![1.0, -0.4, 0.2, 0.9, -1.0, 0.0], vec![], vec![]);
        let qp = build_hard_projection(&s).unwrap();
        assert_eq!(qp.n_rows(), 12);
        let sol = solve_qp(&qp, TOL).unwrap();
        let (a, eps) = extract_action(&sol, 6).unwrap();
        assert!(eps.is_empty());
        for (x, e) in a.iter().zip(&s.proposed_action) {
            assert_abs_diff_eq!(x, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn hard_projection_onto_half_space() {
        let mut g = vec![0.0; 6];
        g[0] = 1.0;
        let s = spec(vec![0.0; 6], vec![g], vec![-0.5]);
        let qp = build_hard_projection(&s).unwrap();
        assert_eq!(qp.n_rows(), 1 + 12);
        let sol = solve_qp(&qp, TOL).unwrap();
        let (a, _) = extract_action(&sol, 6).unwrap();
        assert_abs_diff_eq!(a[0], -0.5, epsilon = 1e-12);
        assert!(a[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn soft_projection_layout() {
        let rows: Vec<Vec<f64>> = (0..6).map(|j| (0..6).map(|d| (j + d) as f64 * 0.1).collect()).collect();
        let s = spec(vec![0.1; 6], rows, vec![5.0; 6]);
        let qp = build_soft_projection(&s).unwrap();
        assert_eq!(qp.n_vars(), 12);
        assert_eq!(qp.n_rows(), 24);
        assert_eq!(qp.hessian[(7, 7)], 2e-6);
        assert_eq!(qp.linear_cost[8], 1000.0);
        let sol = solve_qp(&qp, TOL).unwrap();
        let (a, eps) = extract_action(&sol, 6).unwrap();
        assert_eq!((a.len(), eps.len()), (6, 6));
        for x in &a {
            assert_abs_diff_eq!(*x, 0.1, epsilon = 1e-10);
        }
        assert!(eps.iter().all(|e| e.abs() < 1e-9), "{eps:?}");
    }

    #[test]
    fn soft_projection_one_dimensional_conflict() {
        let s = ProjectionSpec {
            proposed_action: vec![1.0],
            constraint_sensitivities: vec![vec![1.0], vec![-1.0]],
            constraint_margins: vec![-1.0, -1.0],
            action_bound: 1.0,
            rho: 1000.0,
            slack_reg: 1e-6,
        };
        let hard = solve_qp(&build_hard_projection(&s).unwrap(), TOL).unwrap();
        assert_eq!(hard.status, QpStatus::Infeasible);
        let soft = solve_qp(&build_soft_projection(&s).unwrap(), TOL).unwrap();
        let (a, eps) = extract_action(&soft, 1).unwrap();
        assert_abs_diff_eq!(a[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(eps[0], 2.0, epsilon = 1e-5);
        assert_abs_diff_eq!(eps[1], 0.0, epsilon = 1e-5);
    }

    #[test]
    fn extract_action_rejects_infeasible() {
        let sol = QpSolution {
            primal: vec![0.0; 3],
            dual: vec![],
            status: QpStatus::Infeasible,
            active_set: vec![],
            iterations: 0,
        };
        assert!(matches!(extract_action(&sol, 3), Err(Error::NotOptimal)));
    }

    #[test]
    fn projection_spec_validation() {
        let mut s = spec(vec![0.0; 2], vec![vec![1.0, 0.0]], vec![0.0]);
        s.rho = -5.0;
        match build_soft_projection(&s) {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "rho"),
            other => panic!("{other:?}"),
        }
        let bad_rows = spec(vec![0.0; 2], vec![vec![1.0]], vec![0.0]);
        assert!(build_hard_projection(&bad_rows).is_err());
    }

    #[test]
    fn text_dump_round_trips() {
        let rows: Vec<Vec<f64>> = vec![vec![0.1, -0.3], vec![1.0 / 3.0, 2.5e-7]];
        let s = spec(vec![0.25, -0.125], rows, vec![-0.01, 0.3]);
        let qp = build_soft_projection(&s).unwrap();
        let back = QpProblem::from_text(&qp.to_text()).unwrap();
        assert_eq!(back, qp);
        assert!(QpProblem::from_text("qp 2 1\nH\n1 0\n").is_err());
    }
}
