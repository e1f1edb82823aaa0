//! Dense convex quadratic programming with KKT certification.
//!
//! Solves
//! ```text
//!     minimize    1/2 z' H z + f' z
//!     subject to  G z <= h
//! ```
//! for strictly convex H by a dual active-set method: start from the
//! unconstrained minimizer, repeatedly add the most violated constraint and
//! step in the primal/dual direction obtained from the working-set KKT
//! system, dropping working constraints whose multiplier would turn negative.
//! Every `Optimal` result is re-certified against the KKT conditions before
//! it is returned.
//!
//! The method is deterministic: identical inputs produce bitwise-identical
//! outputs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not symmetric (max asymmetry {0:.3e})")]
    Asymmetric(f64),
}

/// Condensed quadratic program `min 1/2 z'Hz + f'z  s.t.  Gz <= h`.
#[derive(Debug, Clone)]
pub struct DenseQp {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    ineq: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl DenseQp {
    /// Symmetry of `hessian` is required to 1e-12 relative to its magnitude.
    /// Positive definiteness is the caller's contract (MPC construction adds
    /// a small regularization before submission); `solve` reports it via a
    /// failed factorization panic rather than silently regularizing.
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        ineq: DMatrix<f64>,
        rhs: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = hessian.nrows();
        if hessian.ncols() != n {
            return Err(QpError::Dimension(format!(
                "Hessian must be square, got {}x{}",
                hessian.nrows(),
                hessian.ncols()
            )));
        }
        if linear.len() != n {
            return Err(QpError::Dimension(format!(
                "linear term has length {}, expected {n}",
                linear.len()
            )));
        }
        if ineq.nrows() != rhs.len() || (ineq.nrows() > 0 && ineq.ncols() != n) {
            return Err(QpError::Dimension(format!(
                "constraints are {}x{} with rhs length {}, expected m x {n}",
                ineq.nrows(),
                ineq.ncols(),
                rhs.len()
            )));
        }
        let scale = hessian.amax().max(1.0);
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((hessian[(i, j)] - hessian[(j, i)]).abs());
            }
        }
        if asym > 1e-12 * scale {
            return Err(QpError::Asymmetric(asym));
        }
        Ok(Self {
            hessian,
            linear,
            ineq,
            rhs,
        })
    }

    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self, QpError> {
        let n = hessian.nrows();
        Self::new(hessian, linear, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn num_vars(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.ineq.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn ineq(&self) -> &DMatrix<f64> {
        &self.ineq
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIterations => "max_iterations",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QpSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 500,
        }
    }
}

/// Infinity-norm KKT residual of a candidate solution, computed from scratch:
/// max of stationarity `|Hz + f + G'lambda|`, primal violation
/// `max(0, Gz - h)`, dual negativity `max(0, -lambda)`, and complementarity
/// `|lambda_i (Gz - h)_i|`.
pub fn kkt_residual(qp: &DenseQp, sol: &QpSolution) -> f64 {
    let stat = (&qp.hessian * &sol.z + &qp.linear + qp.ineq.transpose() * &sol.lambda).amax();
    let mut prim = 0.0f64;
    let mut dual = 0.0f64;
    let mut comp = 0.0f64;
    if qp.num_constraints() > 0 {
        let slack = &qp.ineq * &sol.z - &qp.rhs;
        for i in 0..slack.len() {
            prim = prim.max(slack[i]);
            dual = dual.max(-sol.lambda[i]);
            comp = comp.max((sol.lambda[i] * slack[i]).abs());
        }
    }
    stat.max(prim.max(0.0)).max(dual.max(0.0)).max(comp)
}

/// Solve with an empty initial working set.
pub fn solve_qp(qp: &DenseQp, settings: &QpSettings) -> QpSolution {
    solve_inner(qp, settings, None)
}

/// Solve with a warm-start guess. Constraints tight at the guess seed the
/// initial working set; the result satisfies the same contract as a cold
/// solve.
pub fn solve_qp_warm(qp: &DenseQp, settings: &QpSettings, guess: &DVector<f64>) -> QpSolution {
    solve_inner(qp, settings, Some(guess))
}

struct WorkingSet<'a> {
    qp: &'a DenseQp,
    chol: Cholesky<f64, Dyn>,
    active: Vec<usize>,
    lambda: Vec<f64>,
    z: DVector<f64>,
}

impl<'a> WorkingSet<'a> {
    /// Re-solve the equality-constrained subproblem for the current working
    /// set, refreshing `z` and `lambda`. Returns false if the working-set
    /// normals have become numerically dependent.
    fn refresh(&mut self) -> bool {
        let z_unc = self.chol.solve(&(-&self.qp.linear));
        if self.active.is_empty() {
            self.z = z_unc;
            return true;
        }
        let (x, s) = match self.schur() {
            Some(v) => v,
            None => return false,
        };
        // S lam = G_W z_unc - h_W
        let mut b = DVector::zeros(self.active.len());
        for (k, &i) in self.active.iter().enumerate() {
            b[k] = self.qp.ineq.row(i).transpose().dot(&z_unc) - self.qp.rhs[i];
        }
        let lam = s.solve(&b);
        self.z = z_unc - &x * &lam;
        for (k, v) in self.lambda.iter_mut().enumerate() {
            *v = lam[k];
        }
        true
    }

    /// X = H^-1 G_W' and the Cholesky factor of S = G_W H^-1 G_W'.
    fn schur(&self) -> Option<(DMatrix<f64>, Cholesky<f64, Dyn>)> {
        let n = self.qp.num_vars();
        let w = self.active.len();
        let mut gt = DMatrix::zeros(n, w);
        for (k, &i) in self.active.iter().enumerate() {
            gt.column_mut(k).copy_from(&self.qp.ineq.row(i).transpose());
        }
        let x = self.chol.solve(&gt);
        let s = gt.transpose() * &x;
        let s_chol = Cholesky::new(s)?;
        Some((x, s_chol))
    }

    /// Primal/dual step directions for adding constraint `p`:
    /// `H dz + G_W' dlam = -g_p`, `G_W dz = 0`.
    fn directions(&self, p: usize) -> Option<(DVector<f64>, Vec<f64>)> {
        let g_p = self.qp.ineq.row(p).transpose();
        let y = self.chol.solve(&g_p);
        if self.active.is_empty() {
            return Some((-y, Vec::new()));
        }
        let (x, s) = self.schur()?;
        // S dlam = -G_W y
        let mut b = DVector::zeros(self.active.len());
        for (k, &i) in self.active.iter().enumerate() {
            b[k] = -self.qp.ineq.row(i).transpose().dot(&y);
        }
        let dlam = s.solve(&b);
        let dz = -y - &x * &dlam;
        Some((dz, dlam.iter().copied().collect()))
    }
}

fn solve_inner(qp: &DenseQp, settings: &QpSettings, guess: Option<&DVector<f64>>) -> QpSolution {
    let n = qp.num_vars();
    let m = qp.num_constraints();
    let tol = settings.tolerance;

    let chol = Cholesky::new(qp.hessian.clone())
        .expect("QP Hessian must be positive definite (callers regularize before submission)");

    let mut ws = WorkingSet {
        qp,
        chol,
        active: Vec::new(),
        lambda: Vec::new(),
        z: DVector::zeros(n),
    };
    let mut iterations = 0usize;

    // Seed the working set from a warm-start guess, then drop negative
    // multipliers until the working-set solution is dual feasible.
    if let Some(z0) = guess {
        if z0.len() == n {
            for i in 0..m {
                let slack = qp.ineq.row(i).transpose().dot(z0) - qp.rhs[i];
                if slack.abs() <= tol && ws.active.len() < n {
                    ws.active.push(i);
                    ws.lambda.push(0.0);
                }
            }
        }
    }
    loop {
        iterations += 1;
        if !ws.refresh() {
            // Dependent seed set; restart cold.
            ws.active.clear();
            ws.lambda.clear();
            ws.refresh();
            break;
        }
        if let Some(k) = most_negative(&ws.lambda) {
            ws.active.remove(k);
            ws.lambda.remove(k);
        } else {
            break;
        }
        if iterations >= settings.max_iterations {
            break;
        }
    }

    let status = 'outer: loop {
        // Most violated constraint at the current iterate.
        let mut p = usize::MAX;
        let mut vmax = tol;
        for i in 0..m {
            let v = qp.ineq.row(i).transpose().dot(&ws.z) - qp.rhs[i];
            if v > vmax {
                vmax = v;
                p = i;
            }
        }
        if p == usize::MAX {
            break QpStatus::Optimal;
        }

        let mut lambda_p = 0.0f64;
        loop {
            if iterations >= settings.max_iterations {
                break 'outer QpStatus::MaxIterations;
            }
            iterations += 1;

            let (dz, dlam) = match ws.directions(p) {
                Some(v) => v,
                None => break 'outer QpStatus::MaxIterations,
            };
            let g_p = qp.ineq.row(p).transpose();
            let violation = g_p.dot(&ws.z) - qp.rhs[p];
            let slope = g_p.dot(&dz);
            let dir_eps = 1e-13 * (1.0 + g_p.norm_squared());

            let t_full = if slope < -dir_eps {
                Some(-violation / slope)
            } else {
                None
            };
            let mut t_block: Option<(f64, usize)> = None;
            for (k, &d) in dlam.iter().enumerate() {
                if d < -1e-13 {
                    let t = -ws.lambda[k] / d;
                    if t_block.is_none_or(|(tb, _)| t < tb) {
                        t_block = Some((t, k));
                    }
                }
            }

            let step = match (t_full, t_block) {
                (None, None) => {
                    // Constraint normal lies in the span of the working set
                    // and no multiplier blocks: the dual is unbounded, the
                    // primal problem has no feasible point.
                    break 'outer QpStatus::Infeasible;
                }
                (Some(tf), None) => (tf, None),
                (None, Some((tb, k))) => (tb, Some(k)),
                (Some(tf), Some((tb, k))) => {
                    if tb < tf {
                        (tb, Some(k))
                    } else {
                        (tf, None)
                    }
                }
            };

            let (t, drop_k) = step;
            ws.z += &dz * t;
            for (k, v) in ws.lambda.iter_mut().enumerate() {
                *v += t * dlam[k];
            }
            lambda_p += t;

            match drop_k {
                Some(k) => {
                    ws.active.remove(k);
                    ws.lambda.remove(k);
                    // keep accumulating lambda_p with the reduced set
                }
                None => {
                    ws.active.push(p);
                    ws.lambda.push(lambda_p);
                    break;
                }
            }
        }
    };

    let mut lambda = DVector::zeros(m);
    for (k, &i) in ws.active.iter().enumerate() {
        lambda[i] = ws.lambda[k].max(0.0);
    }
    let mut sol = QpSolution {
        z: ws.z,
        lambda,
        status,
        kkt_residual: 0.0,
        iterations,
    };
    sol.kkt_residual = kkt_residual(qp, &sol);
    if sol.status == QpStatus::Optimal && sol.kkt_residual > tol {
        sol.status = QpStatus::MaxIterations;
    }
    sol
}

fn most_negative(lambda: &[f64]) -> Option<usize> {
    let mut idx = None;
    let mut worst = -1e-13;
    for (k, &v) in lambda.iter().enumerate() {
        if v < worst {
            worst = v;
            idx = Some(k);
        }
    }
    idx
}
