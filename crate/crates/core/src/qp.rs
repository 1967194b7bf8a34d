//! Dense convex QP backend.
//!
//! Solves
//!
//! ```text
//! minimize   ½ xᵀ H x + gᵀ x
//! subject to E x = b_e,   A x ≤ b_i
//! ```
//!
//! with a deterministic operator-splitting (ADMM) method: equalities are
//! eliminated once up front by Gauss-Jordan reduction, the reduced
//! inequality-constrained problem is Ruiz-equilibrated and iterated with
//! over-relaxation and periodic residual-based penalty rebalancing, and the
//! solution is polished by solving the active-set KKT system with iterative
//! refinement. Optimal status is only reported when the polished solution
//! passes the KKT residual contract on the original problem data.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("hessian is not symmetric (max asymmetry {asymmetry:.2e})")]
    AsymmetricHessian { asymmetry: f64 },
    #[error("problem data contains non-finite entries in {context}")]
    NonFinite { context: &'static str },
}

/// Dense convex QP: ½xᵀHx + gᵀx subject to Ex = b_e and Ax ≤ b_i.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub eq_mat: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_mat: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        for (context, ok) in [
            ("hessian rows", self.hessian.nrows() == n),
            ("hessian cols", self.hessian.ncols() == n),
            ("eq_mat cols", self.eq_mat.ncols() == n || self.eq_mat.nrows() == 0),
            ("eq_rhs", self.eq_rhs.len() == self.eq_mat.nrows()),
            (
                "ineq_mat cols",
                self.ineq_mat.ncols() == n || self.ineq_mat.nrows() == 0,
            ),
            ("ineq_rhs", self.ineq_rhs.len() == self.ineq_mat.nrows()),
        ] {
            if !ok {
                return Err(QpError::Dimension {
                    context,
                    expected: n,
                    got: 0,
                });
            }
        }
        for (context, finite) in [
            ("hessian", self.hessian.iter().all(|x| x.is_finite())),
            ("linear", self.linear.iter().all(|x| x.is_finite())),
            ("eq_mat", self.eq_mat.iter().all(|x| x.is_finite())),
            ("eq_rhs", self.eq_rhs.iter().all(|x| x.is_finite())),
            ("ineq_mat", self.ineq_mat.iter().all(|x| x.is_finite())),
            ("ineq_rhs", self.ineq_rhs.iter().all(|x| x.is_finite())),
        ] {
            if !finite {
                return Err(QpError::NonFinite { context });
            }
        }
        let asymmetry = (&self.hessian - self.hessian.transpose()).abs().max();
        if asymmetry > 1e-12 * (1.0 + self.hessian.abs().max()) {
            return Err(QpError::AsymmetricHessian { asymmetry });
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.hessian * x)[(0, 0)] + self.linear.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub status: QpStatus,
    /// ∞-norm of equality residuals and inequality violations.
    pub primal_residual: f64,
    /// ∞-norm of the stationarity residual Hx + g + Eᵀν + Aᵀλ.
    pub dual_residual: f64,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    /// Residual contract scale: optimal requires residuals ≤ tol·(1 + data scale).
    pub tol: f64,
    pub max_iter: usize,
    /// ADMM over-relaxation factor.
    pub alpha: f64,
    /// ADMM proximal regularization.
    pub sigma: f64,
    /// Initial penalty.
    pub rho: f64,
    /// Residual/infeasibility checks run every this many iterations.
    pub check_interval: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200_000,
            alpha: 1.6,
            sigma: 1e-6,
            rho: 0.1,
            check_interval: 25,
        }
    }
}

/// Outcome of the one-time Gauss-Jordan equality elimination.
struct Elimination {
    /// x = x_base + basis · y for the reduced variable y.
    x_base: DVector<f64>,
    basis: DMatrix<f64>,
    /// Row-operation matrix M with R = M·E in reduced row-echelon form.
    row_ops: DMatrix<f64>,
    /// (row, column) of each pivot.
    pivots: Vec<(usize, usize)>,
    infeasible: bool,
}

/// Gauss-Jordan on the augmented system [E | b | I], processing rows in
/// order and pivoting each row on its largest remaining column.
///
/// Row-wise column pivoting keeps the pivots on the dominant (unit-scale)
/// coefficients of structured constraint sets — for the SCP equalities that
/// means states become basic and forces/slacks stay free, which keeps the
/// nullspace basis well conditioned. Produces a particular solution, the
/// nullspace basis from the free columns, and the row-op matrix used later
/// for equality-dual recovery. Rows with no usable pivot must have zero
/// reduced right-hand side or the system is inconsistent.
fn eliminate_equalities(e_mat: &DMatrix<f64>, b: &DVector<f64>, feas_tol: f64) -> Elimination {
    let m = e_mat.nrows();
    let n = e_mat.ncols();
    let mut tab = e_mat.clone_owned();
    let mut rhs = b.clone_owned();
    let mut ops = DMatrix::<f64>::identity(m, m);
    let scale = tab.abs().max().max(1.0);
    let pivot_tol = 1e-11 * scale;

    let mut is_pivot_col = vec![false; n];
    let mut pivots: Vec<(usize, usize)> = Vec::new();
    let mut infeasible = false;
    for r in 0..m {
        // Largest remaining entry of this (already reduced) row.
        let mut col = n;
        let mut best = pivot_tol;
        for c in 0..n {
            if !is_pivot_col[c] {
                let v = tab[(r, c)].abs();
                if v > best {
                    best = v;
                    col = c;
                }
            }
        }
        if col == n {
            if rhs[r].abs() > feas_tol {
                infeasible = true;
            }
            continue;
        }
        let inv = 1.0 / tab[(r, col)];
        for c in 0..n {
            tab[(r, c)] *= inv;
        }
        rhs[r] *= inv;
        for c in 0..m {
            ops[(r, c)] *= inv;
        }
        for other in 0..m {
            if other == r {
                continue;
            }
            let factor = tab[(other, col)];
            if factor == 0.0 {
                continue;
            }
            for c in 0..n {
                tab[(other, c)] -= factor * tab[(r, c)];
            }
            rhs[other] -= factor * rhs[r];
            for c in 0..m {
                ops[(other, c)] -= factor * ops[(r, c)];
            }
        }
        is_pivot_col[col] = true;
        pivots.push((r, col));
    }

    let free_cols: Vec<usize> = (0..n).filter(|&c| !is_pivot_col[c]).collect();
    let mut x_base = DVector::zeros(n);
    for &(r, c) in &pivots {
        x_base[c] = rhs[r];
    }
    let mut basis = DMatrix::zeros(n, free_cols.len());
    for (j, &fc) in free_cols.iter().enumerate() {
        basis[(fc, j)] = 1.0;
        for &(r, pc) in &pivots {
            basis[(pc, j)] = -tab[(r, fc)];
        }
    }

    Elimination {
        x_base,
        basis,
        row_ops: ops,
        pivots,
        infeasible,
    }
}

/// Modified Ruiz equilibration of the reduced problem. Returns the column
/// scaling d, row scaling e and cost scaling c applied in place.
fn ruiz_scale(
    h: &mut DMatrix<f64>,
    g: &mut DVector<f64>,
    a: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
) -> (DVector<f64>, DVector<f64>, f64) {
    let n = g.len();
    let m = b.len();
    let mut d_total = DVector::from_element(n, 1.0);
    let mut e_total = DVector::from_element(m, 1.0);
    let mut c_total = 1.0;
    for _ in 0..10 {
        let mut d = DVector::from_element(n, 1.0);
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(h[(i, j)].abs());
            }
            for i in 0..m {
                norm = norm.max(a[(i, j)].abs());
            }
            if norm > 0.0 {
                d[j] = 1.0 / norm.sqrt().clamp(1e-6, 1e6);
            }
        }
        let mut e = DVector::from_element(m, 1.0);
        for i in 0..m {
            let mut norm: f64 = 0.0;
            for j in 0..n {
                norm = norm.max(a[(i, j)].abs());
            }
            if norm > 0.0 {
                e[i] = 1.0 / norm.sqrt().clamp(1e-6, 1e6);
            }
        }
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] *= d[i] * d[j];
            }
        }
        for j in 0..n {
            g[j] *= d[j];
        }
        for i in 0..m {
            for j in 0..n {
                a[(i, j)] *= e[i] * d[j];
            }
        }
        for i in 0..m {
            b[i] *= e[i];
        }
        d_total.component_mul_assign(&d);
        e_total.component_mul_assign(&e);

        // Cost scaling toward unit-norm objective data.
        let mut col_mean = 0.0;
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(h[(i, j)].abs());
            }
            col_mean += norm;
        }
        col_mean /= n.max(1) as f64;
        let g_norm = g.abs().max();
        let denom = col_mean.max(g_norm);
        if denom > 0.0 {
            let c = (1.0 / denom).clamp(1e-6, 1e6);
            *h *= c;
            *g *= c;
            c_total *= c;
        }
    }
    (d_total, e_total, c_total)
}

struct ReducedProblem {
    h: DMatrix<f64>,
    g: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

/// ADMM working state on the scaled reduced problem.
struct AdmmState {
    y: DVector<f64>,
    z: DVector<f64>,
    lam: DVector<f64>,
    rho: f64,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn admm_factor(
    red: &ReducedProblem,
    sigma: f64,
    rho: f64,
) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = red.g.len();
    let mut kkt = red.h.clone_owned();
    for i in 0..n {
        kkt[(i, i)] += sigma;
    }
    kkt += red.a.transpose() * rho * &red.a;
    nalgebra::Cholesky::new(kkt)
}

/// One polished candidate: equality KKT solve on the guessed active set with
/// iterative refinement against the unregularized system.
fn polish(
    red: &ReducedProblem,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = red.g.len();
    let na = active.len();
    let dim = n + na;
    let delta = 1e-9;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&red.h);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for (r, &row) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + r, c)] = red.a[(row, c)];
            kkt[(c, n + r)] = red.a[(row, c)];
        }
        kkt[(n + r, n + r)] = -delta;
    }
    let lu = kkt.lu();
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = -red.g[i];
    }
    for (r, &row) in active.iter().enumerate() {
        rhs[n + r] = red.b[row];
    }
    let mut sol = lu.solve(&rhs)?;
    // Refinement against the unregularized KKT system.
    for _ in 0..3 {
        let mut resid = DVector::zeros(dim);
        let y = sol.rows(0, n).clone_owned();
        let nu = sol.rows(n, na).clone_owned();
        let top = &red.h * &y + &red.g
            + if na > 0 {
                let mut at_nu = DVector::zeros(n);
                for (r, &row) in active.iter().enumerate() {
                    for c in 0..n {
                        at_nu[c] += red.a[(row, c)] * nu[r];
                    }
                }
                at_nu
            } else {
                DVector::zeros(n)
            };
        for i in 0..n {
            resid[i] = -top[i];
        }
        for (r, &row) in active.iter().enumerate() {
            let mut ay = 0.0;
            for c in 0..n {
                ay += red.a[(row, c)] * y[c];
            }
            resid[n + r] = red.b[row] - ay;
        }
        let corr = lu.solve(&resid)?;
        sol += corr;
    }
    let y = sol.rows(0, n).clone_owned();
    let nu = sol.rows(n, na).clone_owned();
    Some((y, nu))
}

fn reduced_residuals(
    red: &ReducedProblem,
    y: &DVector<f64>,
    lam: &DVector<f64>,
) -> (f64, f64) {
    let slack = &red.b - &red.a * y;
    let primal = slack.iter().fold(0.0_f64, |acc, &s| acc.max(-s));
    let dual = (&red.h * y + &red.g + red.a.transpose() * lam).abs().max();
    (primal, dual)
}

/// Try to polish from the current ADMM iterate. Grows/shrinks the active set
/// a few times if duals come out negative or inactive rows get violated.
fn try_polish(
    red: &ReducedProblem,
    y_admm: &DVector<f64>,
    lam_admm: &DVector<f64>,
    tol: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = red.b.len();
    let slack = &red.b - &red.a * y_admm;
    let scale = 1.0 + red.b.abs().max();
    let mut active: Vec<usize> = (0..m)
        .filter(|&i| lam_admm[i] > 1e-10 || slack[i] < 1e-6 * scale)
        .collect();
    for _round in 0..6 {
        let (y, nu) = polish(red, &active)?;
        // Drop rows with clearly negative duals, add violated rows.
        let mut lam = DVector::zeros(m);
        for (r, &row) in active.iter().enumerate() {
            lam[row] = nu[r];
        }
        let slack = &red.b - &red.a * &y;
        let violated: Vec<usize> = (0..m)
            .filter(|&i| slack[i] < -tol * scale && !active.contains(&i))
            .collect();
        let negative: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| lam[i] < -1e-9)
            .collect();
        if violated.is_empty() && negative.is_empty() {
            lam.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v = 0.0;
                }
            });
            return Some((y, lam));
        }
        active.retain(|i| !negative.contains(i));
        active.extend(violated);
        active.sort_unstable();
        active.dedup();
    }
    None
}

/// Full-problem KKT residuals for a candidate (x, ν, λ).
fn full_residuals(
    p: &QpProblem,
    x: &DVector<f64>,
    nu: &DVector<f64>,
    lam: &DVector<f64>,
) -> (f64, f64, f64) {
    let mut primal = 0.0_f64;
    if p.eq_mat.nrows() > 0 {
        primal = (&p.eq_mat * x - &p.eq_rhs).abs().max();
    }
    if p.ineq_mat.nrows() > 0 {
        let viol = (&p.ineq_mat * x - &p.ineq_rhs)
            .iter()
            .fold(0.0_f64, |acc, &v| acc.max(v));
        primal = primal.max(viol);
    }
    let mut stat = &p.hessian * x + &p.linear;
    if p.eq_mat.nrows() > 0 {
        stat += p.eq_mat.transpose() * nu;
    }
    if p.ineq_mat.nrows() > 0 {
        stat += p.ineq_mat.transpose() * lam;
    }
    let dual = stat.abs().max();
    let mut comp = 0.0_f64;
    for i in 0..p.ineq_mat.nrows() {
        let slack = p.ineq_rhs[i] - (p.ineq_mat.row(i) * x)[(0, 0)];
        comp = comp.max((lam[i] * slack).abs());
    }
    (primal, dual, comp)
}

/// Recover equality duals from the stationarity residual using the recorded
/// row operations: with R = M·E in RREF, ν = Mᵀμ where μ reads off the
/// residual at the pivot columns.
fn recover_eq_duals(
    elim: &Elimination,
    stat_residual: &DVector<f64>,
) -> DVector<f64> {
    let m = elim.row_ops.nrows();
    let mut mu = DVector::zeros(m);
    for &(r, col) in &elim.pivots {
        mu[r] = -stat_residual[col];
    }
    elim.row_ops.transpose() * mu
}

/// Solve a dense convex QP. Deterministic: identical inputs give identical
/// outputs. Infeasibility is reported through the status, never a panic.
pub fn qp_solve(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution, QpError> {
    p.validate()?;
    let n = p.n();
    let m_e = p.eq_mat.nrows();
    let m_i = p.ineq_mat.nrows();
    let rhs_scale = 1.0 + p.eq_rhs.abs().max().max(p.ineq_rhs.abs().max());
    let lin_scale = 1.0 + p.linear.abs().max();
    let feas_tol = opts.tol * rhs_scale;

    let failed = |status: QpStatus, iterations: usize| QpSolution {
        x: DVector::zeros(n),
        eq_duals: DVector::zeros(m_e),
        ineq_duals: DVector::zeros(m_i),
        status,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        objective: f64::NAN,
        iterations,
    };

    // One-time equality elimination: x = x_base + Z y.
    let elim = if m_e > 0 {
        let elim = eliminate_equalities(&p.eq_mat, &p.eq_rhs, feas_tol);
        if elim.infeasible {
            return Ok(failed(QpStatus::PrimalInfeasible, 0));
        }
        elim
    } else {
        Elimination {
            x_base: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
            row_ops: DMatrix::zeros(0, 0),
            pivots: Vec::new(),
            infeasible: false,
        }
    };
    let n_red = elim.basis.ncols();

    let assemble = |y: &DVector<f64>,
                    lam: &DVector<f64>,
                    iterations: usize| -> QpSolution {
        let x = &elim.x_base + &elim.basis * y;
        let mut stat = &p.hessian * &x + &p.linear;
        if m_i > 0 {
            stat += p.ineq_mat.transpose() * lam;
        }
        let nu = if m_e > 0 {
            recover_eq_duals(&elim, &stat)
        } else {
            DVector::zeros(0)
        };
        let (primal, dual, comp) = full_residuals(p, &x, &nu, lam);
        let lam_min = lam.iter().cloned().fold(0.0_f64, f64::min);
        let ok = primal <= opts.tol * rhs_scale
            && dual <= opts.tol * lin_scale
            && lam_min >= -1e-10
            && comp <= 1e-8 * rhs_scale.max(lin_scale);
        QpSolution {
            objective: p.objective(&x),
            x,
            eq_duals: nu,
            ineq_duals: lam.clone_owned(),
            status: if ok { QpStatus::Optimal } else { QpStatus::MaxIter },
            primal_residual: primal,
            dual_residual: dual,
            iterations,
        }
    };

    // Fully determined by the equalities.
    if n_red == 0 {
        let lam = DVector::zeros(m_i);
        let y = DVector::zeros(0);
        let sol = assemble(&y, &lam, 0);
        if sol.primal_residual > feas_tol {
            return Ok(failed(QpStatus::PrimalInfeasible, 0));
        }
        return Ok(sol);
    }

    // Reduced problem data.
    let h_red = {
        let hz = &p.hessian * &elim.basis;
        let mut h = elim.basis.transpose() * hz;
        let t = h.transpose();
        h += t;
        h *= 0.5;
        h
    };
    let g_red = elim.basis.transpose() * (&p.hessian * &elim.x_base + &p.linear);
    let a_red = if m_i > 0 {
        &p.ineq_mat * &elim.basis
    } else {
        DMatrix::zeros(0, n_red)
    };
    let b_red = if m_i > 0 {
        &p.ineq_rhs - &p.ineq_mat * &elim.x_base
    } else {
        DVector::zeros(0)
    };

    // Unconstrained (in the reduced space): factor with escalating
    // regularization floor, verify stationarity on the original data.
    if m_i == 0 {
        let mut reg = 1e-10;
        for _ in 0..6 {
            let mut h = h_red.clone_owned();
            for i in 0..n_red {
                h[(i, i)] += reg;
            }
            if let Some(chol) = nalgebra::Cholesky::new(h) {
                let y = chol.solve(&(-&g_red));
                let lam = DVector::zeros(0);
                let sol = assemble(&y, &lam, 0);
                if sol.status == QpStatus::Optimal {
                    return Ok(sol);
                }
                // Large stationarity residual with a singular Hessian means
                // the objective is unbounded along a nullspace direction.
                return Ok(QpSolution {
                    status: QpStatus::DualInfeasible,
                    ..sol
                });
            }
            reg *= 100.0;
        }
        return Ok(failed(QpStatus::DualInfeasible, 0));
    }

    // Scale the reduced problem.
    let mut red = ReducedProblem {
        h: h_red.clone_owned(),
        g: g_red.clone_owned(),
        a: a_red.clone_owned(),
        b: b_red.clone_owned(),
    };
    let unscaled = ReducedProblem {
        h: h_red,
        g: g_red,
        a: a_red,
        b: b_red,
    };
    let (d_scale, e_scale, c_scale) = ruiz_scale(&mut red.h, &mut red.g, &mut red.a, &mut red.b);

    let factor = match admm_factor(&red, opts.sigma, opts.rho) {
        Some(f) => f,
        None => return Ok(failed(QpStatus::MaxIter, 0)),
    };
    let mut st = AdmmState {
        y: DVector::zeros(n_red),
        z: DVector::zeros(m_i),
        lam: DVector::zeros(m_i),
        rho: opts.rho,
        factor,
    };

    let unscale_y = |y: &DVector<f64>| y.component_mul(&d_scale);
    let unscale_lam =
        |lam: &DVector<f64>| lam.component_mul(&e_scale) / c_scale;

    let mut iterations = 0usize;
    let mut best: Option<QpSolution> = None;
    let mut target_tol = 1e-6_f64; // polish promotes moderate-accuracy iterates
    let mut status = QpStatus::MaxIter;
    let mut primal_cert_streak = 0usize;
    let mut dual_cert_streak = 0usize;

    while iterations < opts.max_iter {
        // x-update.
        let rhs = opts.sigma * &st.y - &red.g + red.a.transpose() * (st.rho * &st.z - &st.lam);
        let y_tilde = st.factor.solve(&rhs);
        let z_tilde = &red.a * &y_tilde;
        // Over-relaxation and projection.
        let y_next = opts.alpha * &y_tilde + (1.0 - opts.alpha) * &st.y;
        let v = opts.alpha * &z_tilde + (1.0 - opts.alpha) * &st.z + &st.lam / st.rho;
        let mut z_next = v.clone_owned();
        for i in 0..m_i {
            if z_next[i] > red.b[i] {
                z_next[i] = red.b[i];
            }
        }
        let lam_next = st.rho * (&v - &z_next);

        let dy = &y_next - &st.y;
        let dlam = &lam_next - &st.lam;
        st.y = y_next;
        st.z = z_next;
        st.lam = lam_next;
        iterations += 1;

        if iterations % opts.check_interval != 0 {
            continue;
        }

        // Residuals in the unscaled reduced space.
        let y_u = unscale_y(&st.y);
        let lam_u = unscale_lam(&st.lam);
        let (r_prim, r_dual) = reduced_residuals(&unscaled, &y_u, &lam_u);
        let prim_scale = 1.0 + unscaled.b.abs().max();
        let dual_scale = 1.0 + unscaled.g.abs().max();

        if r_prim <= target_tol * prim_scale && r_dual <= target_tol * dual_scale {
            if let Some((y_p, lam_p)) = try_polish(&unscaled, &y_u, &lam_u, opts.tol) {
                let sol = assemble(&y_p, &lam_p, iterations);
                if sol.status == QpStatus::Optimal {
                    return Ok(sol);
                }
                best = Some(sol);
            }
            // Polish missed the contract; tighten the ADMM target and retry.
            target_tol *= 1e-2;
            if target_tol < 1e-13 {
                break;
            }
        }

        // Infeasibility certificates on the normalized deltas; a certificate
        // must hold on consecutive checks before it is trusted.
        let dlam_u = unscale_lam(&dlam);
        let dlam_norm = dlam_u.abs().max();
        let mut primal_cert = false;
        if dlam_norm > 1e-12 {
            let prop = unscaled.a.transpose() * &dlam_u;
            let support = unscaled.b.dot(&dlam_u);
            let nonneg = dlam_u.iter().all(|&v| v >= -1e-10 * dlam_norm);
            primal_cert = nonneg
                && prop.abs().max() <= 1e-8 * dlam_norm * (1.0 + unscaled.a.abs().max())
                && support < -1e-8 * dlam_norm * (1.0 + unscaled.b.abs().max());
        }
        primal_cert_streak = if primal_cert { primal_cert_streak + 1 } else { 0 };
        if primal_cert_streak >= 3 {
            status = QpStatus::PrimalInfeasible;
            break;
        }
        let dy_u = unscale_y(&dy);
        let dy_norm = dy_u.abs().max();
        let mut dual_cert = false;
        if dy_norm > 1e-12 {
            let curve = (&unscaled.h * &dy_u).abs().max();
            let descent = unscaled.g.dot(&dy_u);
            let cone = (&unscaled.a * &dy_u)
                .iter()
                .fold(0.0_f64, |acc, &v| acc.max(v));
            dual_cert = curve <= 1e-8 * dy_norm * (1.0 + unscaled.h.abs().max())
                && descent < -1e-8 * dy_norm * (1.0 + unscaled.g.abs().max())
                && cone <= 1e-8 * dy_norm * (1.0 + unscaled.a.abs().max());
        }
        dual_cert_streak = if dual_cert { dual_cert_streak + 1 } else { 0 };
        if dual_cert_streak >= 3 {
            status = QpStatus::DualInfeasible;
            break;
        }

        // Residual-based penalty rebalancing (refactors the small system).
        if iterations % (opts.check_interval * 8) == 0 {
            let ratio = ((r_prim / prim_scale) / (r_dual / dual_scale).max(1e-16)).sqrt();
            if ratio > 5.0 || ratio < 0.2 {
                let new_rho = (st.rho * ratio).clamp(1e-6, 1e6);
                if let Some(f) = admm_factor(&red, opts.sigma, new_rho) {
                    st.rho = new_rho;
                    st.factor = f;
                }
            }
        }
    }

    if status != QpStatus::MaxIter {
        return Ok(failed(status, iterations));
    }
    if let Some(sol) = best {
        return Ok(sol);
    }
    // Last resort: report the raw ADMM iterate with honest residuals.
    let y_u = unscale_y(&st.y);
    let lam_u = unscale_lam(&st.lam);
    Ok(assemble(&y_u, &lam_u, iterations))
}
