//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀHx + fᵀx
//! subject to  A_ineq·x ≤ b_ineq
//!             A_eq·x   = b_eq
//! ```
//!
//! with a primal active-set method. Each iteration solves the equality-constrained
//! subproblem on the working set in range-space form (`K = A_W·H⁻¹·A_Wᵀ`,
//! Cholesky on `K`). A feasible start is found by projecting onto the equality
//! constraints and, when that point violates an inequality, running the same
//! active-set iteration on an elastic problem that minimizes the largest
//! violation. The final working set is polished with a direct LU solve of the
//! full KKT system.
//!
//! [`QpSolver`] caches `H⁻¹` and the constraint products so that a sequence of
//! problems sharing `H` and the constraint matrices (as in receding-horizon
//! control) only pays for them once.

use std::io::{self, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// KKT tolerance reported as the optimality target.
    pub tol: f64,
    pub max_iter: usize,
    /// Diagonal regularization applied, relative to the largest diagonal
    /// entry, when `H` is only positive semidefinite.
    pub ridge: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tol: 1e-6,
            max_iter: 1000,
            ridge: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda_ineq: DVector<f64>,
    pub nu_eq: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Inequality rows in the final working set, ascending.
    pub active_set: Vec<usize>,
}

impl QpSolution {
    pub fn objective(&self, h: &DMatrix<f64>, f: &DVector<f64>) -> f64 {
        objective(h, f, &self.x)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

pub fn objective(h: &DMatrix<f64>, f: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + f.dot(x)
}

/// One-shot solve. See [`QpSolver`] for repeated solves with shared matrices.
#[allow(clippy::too_many_arguments)]
pub fn solve_qp(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a_ineq: &DMatrix<f64>,
    b_ineq: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution, QpError> {
    let settings = QpSettings {
        tol,
        max_iter,
        ..QpSettings::default()
    };
    QpSolver::new(h, a_ineq, a_eq, settings)?.solve(f, b_ineq, b_eq, None)
}

/// Largest violation of the KKT conditions at `sol`: stationarity, primal
/// feasibility, dual feasibility and complementary slackness.
pub fn kkt_residual(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a_ineq: &DMatrix<f64>,
    b_ineq: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    sol: &QpSolution,
) -> f64 {
    let x = &sol.x;
    let mut grad = h * x + f;
    if a_ineq.nrows() > 0 {
        grad += a_ineq.transpose() * &sol.lambda_ineq;
    }
    if a_eq.nrows() > 0 {
        grad += a_eq.transpose() * &sol.nu_eq;
    }
    let mut res = grad.amax();
    if a_ineq.nrows() > 0 {
        let slack = a_ineq * x - b_ineq;
        for i in 0..slack.len() {
            let lam = sol.lambda_ineq[i];
            res = res
                .max(slack[i].max(0.0))
                .max((-lam).max(0.0))
                .max((lam * slack[i]).abs());
        }
    }
    if a_eq.nrows() > 0 {
        res = res.max((a_eq * x - b_eq).amax());
    }
    res
}

/// Writes the problem data as plain-text matrices for external cross-checking.
pub fn dump_problem<W: Write>(
    mut w: W,
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a_ineq: &DMatrix<f64>,
    b_ineq: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
) -> io::Result<()> {
    fn block<W: Write>(w: &mut W, name: &str, m: &DMatrix<f64>) -> io::Result<()> {
        writeln!(w, "# {name} {} {}", m.nrows(), m.ncols())?;
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    block(&mut w, "H", h)?;
    block(&mut w, "f", &col(f))?;
    block(&mut w, "A_ineq", a_ineq)?;
    block(&mut w, "b_ineq", &col(b_ineq))?;
    block(&mut w, "A_eq", a_eq)?;
    block(&mut w, "b_eq", &col(b_eq))
}

/// Solver with `H⁻¹` and all constraint products precomputed.
#[derive(Debug, Clone)]
pub struct QpSolver {
    settings: QpSettings,
    h: DMatrix<f64>,
    h_inv: DMatrix<f64>,
    a_ineq: DMatrix<f64>,
    a_eq: DMatrix<f64>,
    /// `[A_eq; A_ineq]`.
    rows: DMatrix<f64>,
    /// `H⁻¹·rowsᵀ`.
    y: DMatrix<f64>,
    /// `rows·H⁻¹·rowsᵀ`.
    k: DMatrix<f64>,
    row_norms: Vec<f64>,
}

impl QpSolver {
    pub fn new(
        h: &DMatrix<f64>,
        a_ineq: &DMatrix<f64>,
        a_eq: &DMatrix<f64>,
        settings: QpSettings,
    ) -> Result<Self, QpError> {
        let n = h.nrows();
        if h.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "H is {}x{}, expected square",
                h.nrows(),
                h.ncols()
            )));
        }
        for (name, m) in [("A_ineq", a_ineq), ("A_eq", a_eq)] {
            if m.nrows() > 0 && m.ncols() != n {
                return Err(QpError::DimensionMismatch(format!(
                    "{name} has {} columns, expected {n}",
                    m.ncols()
                )));
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("H"));
        }
        if a_ineq.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("A_ineq"));
        }
        if a_eq.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("A_eq"));
        }

        let a_ineq = if a_ineq.nrows() == 0 {
            DMatrix::zeros(0, n)
        } else {
            a_ineq.clone()
        };
        let a_eq = if a_eq.nrows() == 0 {
            DMatrix::zeros(0, n)
        } else {
            a_eq.clone()
        };

        let h_sym = (h + h.transpose()) * 0.5;
        let h_inv = invert_spd(&h_sym, settings.ridge);
        let mut rows = DMatrix::zeros(a_eq.nrows() + a_ineq.nrows(), n);
        rows.rows_mut(0, a_eq.nrows()).copy_from(&a_eq);
        rows.rows_mut(a_eq.nrows(), a_ineq.nrows()).copy_from(&a_ineq);
        let y = &h_inv * rows.transpose();
        let k = &rows * &y;
        let row_norms = (0..rows.nrows()).map(|i| rows.row(i).norm()).collect();
        Ok(QpSolver {
            settings,
            h: h_sym,
            h_inv,
            a_ineq,
            a_eq,
            rows,
            y,
            k,
            row_norms,
        })
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    pub fn n_vars(&self) -> usize {
        self.h.nrows()
    }

    /// Solves for the given linear term and right-hand sides. `hint` seeds the
    /// feasibility search; it need not be feasible.
    pub fn solve(
        &self,
        f: &DVector<f64>,
        b_ineq: &DVector<f64>,
        b_eq: &DVector<f64>,
        hint: Option<&DVector<f64>>,
    ) -> Result<QpSolution, QpError> {
        let n = self.n_vars();
        let n_eq = self.a_eq.nrows();
        let n_in = self.a_ineq.nrows();
        if f.len() != n {
            return Err(QpError::DimensionMismatch(format!(
                "f has length {}, expected {n}",
                f.len()
            )));
        }
        if b_ineq.len() != n_in {
            return Err(QpError::DimensionMismatch(format!(
                "b_ineq has length {}, expected {n_in}",
                b_ineq.len()
            )));
        }
        if b_eq.len() != n_eq {
            return Err(QpError::DimensionMismatch(format!(
                "b_eq has length {}, expected {n_eq}",
                b_eq.len()
            )));
        }
        if let Some(x) = hint {
            if x.len() != n {
                return Err(QpError::DimensionMismatch(format!(
                    "hint has length {}, expected {n}",
                    x.len()
                )));
            }
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("f"));
        }
        if b_eq.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("b_eq"));
        }
        if b_ineq.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(QpError::NonFinite("b_ineq"));
        }

        let mut rhs = DVector::zeros(n_eq + n_in);
        rhs.rows_mut(0, n_eq).copy_from(b_eq);
        rhs.rows_mut(n_eq, n_in).copy_from(b_ineq);

        let scale_b = 1.0
            + rhs
                .iter()
                .filter(|v| v.is_finite())
                .fold(0.0_f64, |m, v| m.max(v.abs()));
        let feas_tol = 1e-9 * scale_b;

        let x_start = hint.cloned().unwrap_or_else(|| DVector::zeros(n));
        let eq_rows: Vec<usize> = (0..n_eq).collect();
        let eq_basis = independent_rows(&self.rows, &eq_rows, &[]);
        let x0 = project_onto_equalities(&self.rows, &rhs, &eq_basis, &x_start);

        let infeasible = |x: DVector<f64>, iterations: usize| {
            let mut sol = QpSolution {
                x,
                lambda_ineq: DVector::zeros(n_in),
                nu_eq: DVector::zeros(n_eq),
                status: QpStatus::Infeasible,
                iterations,
                kkt_residual: 0.0,
                active_set: Vec::new(),
            };
            sol.kkt_residual = self.residual(f, b_ineq, b_eq, &sol);
            sol
        };

        if n_eq > 0 {
            let r = (&self.a_eq * &x0 - b_eq).amax();
            if r > feas_tol * 1e3 {
                return Ok(infeasible(x0, 0));
            }
        }

        let max_violation = (0..n_in)
            .map(|i| self.rows.row(n_eq + i).dot(&x0.transpose()) - rhs[n_eq + i])
            .fold(0.0_f64, f64::max);

        let mut iterations = 0;
        let (x, working) = if max_violation <= feas_tol {
            let active: Vec<usize> = (n_eq..n_eq + n_in)
                .filter(|&r| (self.rows.row(r).dot(&x0.transpose()) - rhs[r]).abs() <= feas_tol)
                .collect();
            let w = independent_rows(&self.rows, &eq_basis, &active);
            (x0, w)
        } else {
            match self.phase_one(&rhs, &eq_basis, &x0, feas_tol) {
                PhaseOne::Feasible {
                    x,
                    working,
                    iterations: it,
                } => {
                    iterations += it;
                    (x, working)
                }
                PhaseOne::Infeasible { x, iterations: it } => {
                    return Ok(infeasible(x, iterations + it));
                }
            }
        };

        let problem = Eqp {
            h: &self.h,
            h_inv: &self.h_inv,
            rows: &self.rows,
            n_eq,
            cache: Some((&self.y, &self.k)),
            row_norms: &self.row_norms,
        };
        let mut x = x;
        let mut working = working;
        let outcome = active_set(
            &problem,
            f,
            &rhs,
            &mut x,
            &mut working,
            self.settings.tol,
            self.settings.max_iter.saturating_sub(iterations),
            None,
        );
        iterations += outcome.iterations;
        let status = match outcome.end {
            End::Converged => QpStatus::Optimal,
            End::MaxIterations | End::Stopped => QpStatus::MaxIterations,
        };

        let mut sol = self.assemble(&x, &working, &outcome.multipliers, status, iterations);
        sol.kkt_residual = self.residual(f, b_ineq, b_eq, &sol);

        if status == QpStatus::Optimal {
            if let Some(polished) = self.polish(f, &rhs, &working, iterations) {
                let mut polished = polished;
                polished.kkt_residual = self.residual(f, b_ineq, b_eq, &polished);
                if polished.kkt_residual < sol.kkt_residual {
                    sol = polished;
                }
            }
        }
        Ok(sol)
    }

    fn residual(&self, f: &DVector<f64>, b_ineq: &DVector<f64>, b_eq: &DVector<f64>, sol: &QpSolution) -> f64 {
        let b_ineq = b_ineq.map(|v| if v.is_finite() { v } else { f64::MAX });
        kkt_residual(&self.h, f, &self.a_ineq, &b_ineq, &self.a_eq, b_eq, sol)
    }

    fn assemble(
        &self,
        x: &DVector<f64>,
        working: &[usize],
        multipliers: &DVector<f64>,
        status: QpStatus,
        iterations: usize,
    ) -> QpSolution {
        let n_eq = self.a_eq.nrows();
        let mut lambda_ineq = DVector::zeros(self.a_ineq.nrows());
        let mut nu_eq = DVector::zeros(n_eq);
        let mut active_set = Vec::new();
        for (pos, &row) in working.iter().enumerate() {
            let m = multipliers.get(pos).copied().unwrap_or(0.0);
            if row < n_eq {
                nu_eq[row] = m;
            } else {
                lambda_ineq[row - n_eq] = m;
                active_set.push(row - n_eq);
            }
        }
        active_set.sort_unstable();
        QpSolution {
            x: x.clone(),
            lambda_ineq,
            nu_eq,
            status,
            iterations,
            kkt_residual: 0.0,
            active_set,
        }
    }

    /// Direct solve of the full KKT system on the final working set.
    fn polish(&self, f: &DVector<f64>, rhs: &DVector<f64>, working: &[usize], iterations: usize) -> Option<QpSolution> {
        let (x, lam) = solve_kkt(&self.h, f, &self.rows, rhs, working)?;
        Some(self.assemble(&x, working, &lam, QpStatus::Optimal, iterations))
    }

    /// Searches for a feasible point with growing elastic weights. Small
    /// weights keep the multipliers, and so the rounding, small.
    fn phase_one(&self, rhs: &DVector<f64>, eq_basis: &[usize], x0: &DVector<f64>, feas_tol: f64) -> PhaseOne {
        let mut iterations = 0;
        let mut last = None;
        for weight in [1e2, 1e4, 1e6] {
            match self.elastic(rhs, eq_basis, x0, feas_tol, weight) {
                PhaseOne::Feasible {
                    x,
                    working,
                    iterations: it,
                } => {
                    return PhaseOne::Feasible {
                        x,
                        working,
                        iterations: iterations + it,
                    }
                }
                PhaseOne::Infeasible { x, iterations: it } => {
                    iterations += it;
                    last = Some(x);
                }
            }
        }
        PhaseOne::Infeasible {
            x: last.unwrap_or_else(|| x0.clone()),
            iterations,
        }
    }

    /// Minimizes `½‖x − x0‖² + ½τ² + weight·τ` with every inequality
    /// relaxed by `τ ≥ 0`, starting from a point that satisfies the
    /// equalities. Stops as soon as `τ` reaches zero.
    fn elastic(
        &self,
        rhs: &DVector<f64>,
        eq_basis: &[usize],
        x0: &DVector<f64>,
        feas_tol: f64,
        weight: f64,
    ) -> PhaseOne {
        let n = self.n_vars();
        let n_eq = self.a_eq.nrows();
        let n_in = self.a_ineq.nrows();
        let r = n_eq + n_in + 1;
        let tau_row = n_eq + n_in;

        let mut rows = DMatrix::zeros(r, n + 1);
        rows.view_mut((0, 0), (n_eq + n_in, n)).copy_from(&self.rows);
        for i in n_eq..n_eq + n_in {
            rows[(i, n)] = -1.0;
        }
        rows[(tau_row, n)] = -1.0;
        let mut rhs_el = DVector::zeros(r);
        rhs_el.rows_mut(0, n_eq + n_in).copy_from(rhs);
        for v in rhs_el.iter_mut() {
            if !v.is_finite() {
                *v = f64::MAX;
            }
        }

        let mut x = DVector::zeros(n + 1);
        x.rows_mut(0, n).copy_from(x0);
        let mut tau = 0.0;
        let mut worst = None;
        for i in n_eq..n_eq + n_in {
            let v = self.rows.row(i).dot(&x0.transpose()) - rhs[i];
            if v > tau {
                tau = v;
                worst = Some(i);
            }
        }
        x[n] = tau;
        let mut working: Vec<usize> = eq_basis.to_vec();
        working.extend(worst);

        let h = DMatrix::identity(n + 1, n + 1);
        let mut f = DVector::zeros(n + 1);
        f.rows_mut(0, n).copy_from(&(-x0));
        f[n] = weight;
        let row_norms: Vec<f64> = (0..r).map(|i| rows.row(i).norm()).collect();
        let problem = Eqp {
            h: &h,
            h_inv: &h,
            rows: &rows,
            n_eq,
            cache: None,
            row_norms: &row_norms,
        };
        let outcome = active_set(
            &problem,
            &f,
            &rhs_el,
            &mut x,
            &mut working,
            1e-12,
            self.settings.max_iter,
            Some(tau_row),
        );
        if !matches!(outcome.end, End::Stopped) && x[n] > feas_tol {
            if let Some((exact, _)) = solve_kkt(&h, &f, &rows, &rhs_el, &working) {
                let violation = (0..r)
                    .map(|i| rows.row(i).dot(&exact.transpose()) - rhs_el[i])
                    .fold(0.0_f64, f64::max);
                if violation <= feas_tol {
                    x = exact;
                }
            }
        }
        let tau = x[n];
        let xs = x.rows(0, n).into_owned();
        let feasible = match outcome.end {
            End::Stopped => true,
            End::Converged | End::MaxIterations => tau <= feas_tol,
        };
        if !feasible {
            return PhaseOne::Infeasible {
                x: xs,
                iterations: outcome.iterations,
            };
        }
        let active: Vec<usize> = working.iter().copied().filter(|&w| w >= n_eq && w != tau_row).collect();
        let working = independent_rows(&self.rows, eq_basis, &active);
        PhaseOne::Feasible {
            x: xs,
            working,
            iterations: outcome.iterations,
        }
    }
}

/// Solves `min ½xᵀHx + fᵀx` with the `working` rows held as equalities.
fn solve_kkt(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    rows: &DMatrix<f64>,
    rhs: &DVector<f64>,
    working: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let m = working.len();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    let mut b = DVector::zeros(n + m);
    b.rows_mut(0, n).copy_from(&(-f));
    for (pos, &row) in working.iter().enumerate() {
        let a = rows.row(row);
        kkt.view_mut((n + pos, 0), (1, n)).copy_from(&a);
        kkt.view_mut((0, n + pos), (n, 1)).copy_from(&a.transpose());
        b[n + pos] = rhs[row];
    }
    let sol = kkt.lu().solve(&b)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

enum PhaseOne {
    Feasible {
        x: DVector<f64>,
        working: Vec<usize>,
        iterations: usize,
    },
    Infeasible {
        x: DVector<f64>,
        iterations: usize,
    },
}

/// Inverse of a symmetric positive (semi)definite matrix, regularized when
/// the Cholesky factorization fails.
fn invert_spd(h: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    if let Some(ch) = h.clone().cholesky() {
        return ch.inverse();
    }
    let n = h.nrows();
    let scale = h.diagonal().amax().max(1.0);
    let mut eps = ridge * scale;
    loop {
        let hr = h + DMatrix::identity(n, n) * eps;
        if let Some(ch) = hr.cholesky() {
            return ch.inverse();
        }
        eps *= 10.0;
    }
}

/// Greedy selection, in the given order, of rows linearly independent from
/// `base` and from each other. `base` is assumed independent and is kept.
fn independent_rows(rows: &DMatrix<f64>, base: &[usize], candidates: &[usize]) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut chosen = Vec::new();
    let try_add = |idx: usize, basis: &mut Vec<DVector<f64>>| -> bool {
        let a = rows.row(idx).transpose();
        let norm = a.norm();
        if norm == 0.0 {
            return false;
        }
        let mut r = a.clone();
        for _ in 0..2 {
            for q in basis.iter() {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let rn = r.norm();
        if rn > 1e-9 * norm {
            basis.push(r / rn);
            true
        } else {
            false
        }
    };
    for &b in base {
        if try_add(b, &mut basis) {
            chosen.push(b);
        }
    }
    for &c in candidates {
        if !chosen.contains(&c) && try_add(c, &mut basis) {
            chosen.push(c);
        }
    }
    chosen
}

/// Minimum-distance correction of `x` onto the affine set of the selected
/// equality rows.
fn project_onto_equalities(rows: &DMatrix<f64>, rhs: &DVector<f64>, eq: &[usize], x: &DVector<f64>) -> DVector<f64> {
    if eq.is_empty() {
        return x.clone();
    }
    let n = rows.ncols();
    let mut e = DMatrix::zeros(eq.len(), n);
    let mut r = DVector::zeros(eq.len());
    for (i, &row) in eq.iter().enumerate() {
        e.row_mut(i).copy_from(&rows.row(row));
        r[i] = rows.row(row).dot(&x.transpose()) - rhs[row];
    }
    let gram = &e * e.transpose();
    let y = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&r),
        None => gram.lu().solve(&r).unwrap_or_else(|| DVector::zeros(eq.len())),
    };
    x - e.transpose() * y
}

/// Equality-constrained subproblem data for the active-set loop.
struct Eqp<'a> {
    h: &'a DMatrix<f64>,
    h_inv: &'a DMatrix<f64>,
    rows: &'a DMatrix<f64>,
    n_eq: usize,
    /// Precomputed `H⁻¹·rowsᵀ` and `rows·H⁻¹·rowsᵀ`.
    cache: Option<(&'a DMatrix<f64>, &'a DMatrix<f64>)>,
    row_norms: &'a [f64],
}

impl Eqp<'_> {
    /// Step `p` and multipliers `λ` of `min ½pᵀHp + gᵀp s.t. A_W·p = 0`,
    /// together with the factor of `A_W·H⁻¹·A_Wᵀ` when it is positive definite.
    fn step(&self, g: &DVector<f64>, working: &[usize]) -> (DVector<f64>, DVector<f64>, Option<Cholesky<f64, Dyn>>) {
        let n = self.h.nrows();
        let m = working.len();
        let w = self.h_inv * g;
        if m == 0 {
            return (-w, DVector::zeros(0), None);
        }
        let mut y_w = DMatrix::zeros(n, m);
        let mut k_w = DMatrix::zeros(m, m);
        match self.cache {
            Some((y, k)) => {
                for (j, &rj) in working.iter().enumerate() {
                    y_w.column_mut(j).copy_from(&y.column(rj));
                    for (i, &ri) in working.iter().enumerate() {
                        k_w[(i, j)] = k[(ri, rj)];
                    }
                }
            }
            None => {
                let mut a_w = DMatrix::zeros(m, n);
                for (i, &ri) in working.iter().enumerate() {
                    a_w.row_mut(i).copy_from(&self.rows.row(ri));
                }
                y_w = self.h_inv * a_w.transpose();
                k_w = &a_w * &y_w;
            }
        }
        let mut rhs = DVector::zeros(m);
        for (i, &ri) in working.iter().enumerate() {
            rhs[i] = -self.rows.row(ri).dot(&w.transpose());
        }
        let chol = k_w.clone().cholesky();
        let lam = match &chol {
            Some(ch) => ch.solve(&rhs),
            None => solve_spd(k_w, &rhs),
        };
        let p = -(w + &y_w * &lam);
        (p, lam, chol)
    }

    /// Whether `row` is numerically a combination of the working rows, from
    /// the Schur complement of `K_W` in `K_{W+row}`.
    fn depends_on_working(&self, row: usize, working: &[usize], chol: Option<&Cholesky<f64, Dyn>>) -> bool {
        let (k_wr, k_rr) = match self.cache {
            Some((_, k)) => (
                DVector::from_iterator(working.len(), working.iter().map(|&w| k[(w, row)])),
                k[(row, row)],
            ),
            None => {
                let y_r = self.h_inv * self.rows.row(row).transpose();
                (
                    DVector::from_iterator(
                        working.len(),
                        working.iter().map(|&w| self.rows.row(w).dot(&y_r.transpose())),
                    ),
                    self.rows.row(row).dot(&y_r.transpose()),
                )
            }
        };
        if k_rr <= 0.0 {
            return true;
        }
        let schur = if working.is_empty() {
            k_rr
        } else if let Some(ch) = chol {
            let z = ch
                .l()
                .solve_lower_triangular(&k_wr)
                .unwrap_or_else(|| DVector::zeros(working.len()));
            k_rr - z.norm_squared()
        } else {
            return !independent_rows(self.rows, working, &[row]).contains(&row);
        };
        schur <= 1e-10 * k_rr
    }
}

fn solve_spd(k: DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = k.clone().cholesky() {
        return ch.solve(rhs);
    }
    let m = k.nrows();
    let scale = k.diagonal().amax().max(f64::MIN_POSITIVE);
    let kr = &k + DMatrix::identity(m, m) * (1e-12 * scale);
    if let Some(ch) = kr.cholesky() {
        return ch.solve(rhs);
    }
    k.lu().solve(rhs).unwrap_or_else(|| DVector::zeros(m))
}

enum End {
    Converged,
    MaxIterations,
    /// The designated stop row entered the working set.
    Stopped,
}

struct Outcome {
    end: End,
    iterations: usize,
    /// Multipliers aligned with the working set.
    multipliers: DVector<f64>,
}

/// Number of consecutive zero-length steps after which constraint removal
/// switches from the most negative multiplier to the lowest index.
const BLAND_AFTER: usize = 50;

#[allow(clippy::too_many_arguments)]
fn active_set(
    prob: &Eqp,
    f: &DVector<f64>,
    rhs: &DVector<f64>,
    x: &mut DVector<f64>,
    working: &mut Vec<usize>,
    tol: f64,
    max_iter: usize,
    stop_row: Option<usize>,
) -> Outcome {
    let r = prob.rows.nrows();
    let mut in_w = vec![false; r];
    for &w in working.iter() {
        in_w[w] = true;
    }
    let mut degenerate = 0usize;
    let mut at_minimizer = false;
    let mut multipliers = DVector::zeros(working.len());

    for iter in 0..max_iter {
        let g = prob.h * &*x + f;
        let (p, lam, chol) = prob.step(&g, working);
        multipliers = lam;
        let p_norm = p.amax();
        let x_scale = 1.0 + x.amax();

        if at_minimizer || p_norm <= 1e-12 * x_scale {
            at_minimizer = false;
            let dual_tol = tol.min(1e-9) * (1.0 + g.amax());
            let mut leave: Option<(usize, f64)> = None;
            for (pos, &row) in working.iter().enumerate() {
                if row < prob.n_eq {
                    continue;
                }
                let l = multipliers[pos];
                if l >= -dual_tol {
                    continue;
                }
                let better = match leave {
                    None => true,
                    Some((lp, ll)) => {
                        if degenerate >= BLAND_AFTER {
                            row < working[lp]
                        } else {
                            l < ll || (l == ll && row < working[lp])
                        }
                    }
                };
                if better {
                    leave = Some((pos, l));
                }
            }
            match leave {
                None => {
                    return Outcome {
                        end: End::Converged,
                        iterations: iter + 1,
                        multipliers,
                    }
                }
                Some((pos, _)) => {
                    in_w[working[pos]] = false;
                    working.remove(pos);
                }
            }
            continue;
        }

        let p_len = p.norm();
        let mut skip: Vec<usize> = Vec::new();
        let (alpha, block) = loop {
            let (alpha, block) = ratio_test(prob, rhs, x, &p, p_len, &in_w, &skip);
            match block {
                // A row dependent on the working set cannot block in exact
                // arithmetic.
                Some(row) if prob.depends_on_working(row, working, chol.as_ref()) => skip.push(row),
                _ => break (alpha, block),
            }
        };
        x.axpy(alpha, &p, 1.0);
        match block {
            Some(row) => {
                if alpha == 0.0 {
                    degenerate += 1;
                } else {
                    degenerate = 0;
                }
                working.push(row);
                in_w[row] = true;
                if stop_row == Some(row) {
                    return Outcome {
                        end: End::Stopped,
                        iterations: iter + 1,
                        multipliers,
                    };
                }
            }
            None => {
                degenerate = 0;
                at_minimizer = true;
            }
        }
    }
    Outcome {
        end: End::MaxIterations,
        iterations: max_iter,
        multipliers,
    }
}

/// Largest feasible step along `p` up to 1 and the first row that blocks it.
fn ratio_test(
    prob: &Eqp,
    rhs: &DVector<f64>,
    x: &DVector<f64>,
    p: &DVector<f64>,
    p_len: f64,
    in_w: &[bool],
    skip: &[usize],
) -> (f64, Option<usize>) {
    let mut alpha = 1.0;
    let mut block = None;
    for row in prob.n_eq..prob.rows.nrows() {
        if in_w[row] || skip.contains(&row) {
            continue;
        }
        let a = prob.rows.row(row);
        let ap = a.dot(&p.transpose());
        if ap <= 1e-12 * prob.row_norms[row] * p_len {
            continue;
        }
        let slack = (rhs[row] - a.dot(&x.transpose())).max(0.0);
        let t = slack / ap;
        if t < alpha {
            alpha = t;
            block = Some(row);
        }
    }
    (alpha, block)
}
