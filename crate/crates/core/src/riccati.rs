//! Discrete algebraic Riccati equation and the feedback-MPC terminal penalty.
//!
//! The terminal penalty weighs the (delta_x, e) sub-state of the rate-based
//! prediction. It is obtained by solving the DARE for the 4x4 pair
//! `[[A, 0], [A, I]]`, `[[B], [B]]` with state weight `blkdiag(0, Q_e)` and
//! input weight `R_ext`, then embedding the result into the full 8-state
//! extended space. Penalties can be precomputed on the scheduling mesh and
//! interpolated element by element, or re-solved online.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lpv::{LocalModel, OperatingPoint};
use crate::mesh::{MeshError, ScheduleMesh};
use crate::{Mat2, Mat4, Mat8};

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("input weight R + B'PB became singular during iteration")]
    SingularInput,
    #[error(
        "DARE iteration did not converge within {iterations} iterations (residual {residual:.3e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("penalty grid has {nodes} nodes for a {expected}-node mesh")]
    NodeCount { nodes: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DareSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for DareSettings {
    fn default() -> Self {
        Self {
            // the substitution residual of a |P| ~ 1e6 penalty cannot be
            // evaluated much below eps * |P| ~ 2e-10 in double precision,
            // so the default sits at the certified bound instead
            tolerance: 1e-9,
            max_iterations: 100_000,
        }
    }
}

/// Frobenius norm of `A'PA - P - A'PB (R + B'PB)^-1 B'PA + Q`, evaluated by
/// direct substitution.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let atp = a.transpose() * p;
    let btp = b.transpose() * p;
    let gain_denominator = r + &btp * b;
    match gain_denominator.try_inverse() {
        Some(inv) => {
            let next = &atp * a - &atp * b * inv * &btp * a + q;
            (next - p).norm()
        }
        None => f64::INFINITY,
    }
}

/// Solve the DARE `P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q` by the structured
/// doubling iteration starting from `(A, B R^-1 B', Q)`.
///
/// Doubling converges quadratically, so the returned iterate sits within its
/// own substitution residual of the fixed point (a plain Riccati recursion
/// stalls a large multiple of its update norm away, which is what the
/// terminal-penalty eigenvalue floor cannot afford). Convergence is declared
/// directly on the substitution residual.
///
/// Requires `R` positive definite, `Q` positive semidefinite, and `(A, B)`
/// stabilizable; the caller guarantees these (identified local models are
/// stable by construction).
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    settings: &DareSettings,
) -> Result<DMatrix<f64>, RiccatiError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(RiccatiError::Dimension(format!(
            "A {}x{}, B {}x{}, Q {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(RiccatiError::Dimension(format!(
            "R {}x{} for {} inputs",
            r.nrows(),
            r.ncols(),
            m
        )));
    }

    let r_inv = r.clone().try_inverse().ok_or(RiccatiError::SingularInput)?;
    let mut a_k = a.clone();
    let mut g_k = b * r_inv * b.transpose();
    let mut h_k = (q + q.transpose()) * 0.5;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut residual = f64::INFINITY;
    for _ in 0..settings.max_iterations {
        residual = dare_residual(a, b, q, r, &h_k);
        if residual <= settings.tolerance {
            return Ok(h_k);
        }
        let w_inv = (&eye + &g_k * &h_k)
            .try_inverse()
            .ok_or(RiccatiError::SingularInput)?;
        let wa = &w_inv * &a_k;
        let a_next = &a_k * &wa;
        let g_next = &g_k + &a_k * &w_inv * &g_k * a_k.transpose();
        let h_next = &h_k + a_k.transpose() * &h_k * &wa;
        a_k = a_next;
        g_k = (&g_next + g_next.transpose()) * 0.5;
        h_k = (&h_next + h_next.transpose()) * 0.5;
    }
    Err(RiccatiError::NoConvergence {
        iterations: settings.max_iterations,
        residual,
    })
}

/// Infinite-horizon LQR gain `K = (R + B'PB)^-1 B'PA` for the converged `P`.
pub fn dlqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let bt = b.transpose();
    let denom = r + &bt * p * b;
    let inv = denom.try_inverse().ok_or(RiccatiError::SingularInput)?;
    Ok(inv * &bt * p * a)
}

/// Terminal penalty over the extended state.
///
/// `p_tilde` weighs (delta_x, e); the embedded form places it in the leading
/// 4x4 block of the 8x8 extended space with zeros elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalPenalty {
    p_tilde: Mat4,
}

impl TerminalPenalty {
    /// Symmetrizes and clips negative eigenvalues at zero, so interpolated
    /// penalties stay positive semidefinite.
    pub fn new(p: Mat4) -> Self {
        let sym = (p + p.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(sym);
        if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
            return Self { p_tilde: sym };
        }
        let clipped = nalgebra::Matrix4::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
        let repaired = eig.eigenvectors * clipped * eig.eigenvectors.transpose();
        Self {
            p_tilde: (repaired.transpose() + repaired) * 0.5,
        }
    }

    pub fn p_tilde(&self) -> &Mat4 {
        &self.p_tilde
    }

    /// 8x8 penalty on the full extended state; trailing (x_prev, u_prev)
    /// block is exactly zero.
    pub fn embedded(&self) -> Mat8 {
        let mut out = Mat8::zeros();
        out.fixed_view_mut::<4, 4>(0, 0).copy_from(&self.p_tilde);
        out
    }
}

/// 4x4 dynamics and input matrices of the (delta_x, e) subsystem.
pub fn rate_subsystem(model: &LocalModel) -> (Mat4, nalgebra::SMatrix<f64, 4, 2>) {
    let mut a4 = Mat4::zeros();
    a4.fixed_view_mut::<2, 2>(0, 0).copy_from(&model.a);
    a4.fixed_view_mut::<2, 2>(2, 0).copy_from(&model.a);
    a4.fixed_view_mut::<2, 2>(2, 2).copy_from(&Mat2::identity());
    let mut b4 = nalgebra::SMatrix::<f64, 4, 2>::zeros();
    b4.fixed_view_mut::<2, 2>(0, 0).copy_from(&model.b);
    b4.fixed_view_mut::<2, 2>(2, 0).copy_from(&model.b);
    (a4, b4)
}

/// Terminal penalty for one local model and one weight pair: solves the DARE
/// of the (delta_x, e) subsystem with state weight `blkdiag(0, Q_e)` and
/// input weight `R_ext`.
pub fn fb_terminal_penalty(
    model: &LocalModel,
    q_e: &Mat2,
    r_ext: &Mat2,
    settings: &DareSettings,
) -> Result<TerminalPenalty, RiccatiError> {
    let (a4, b4) = rate_subsystem(model);
    let a = DMatrix::from_fn(4, 4, |i, j| a4[(i, j)]);
    let b = DMatrix::from_fn(4, 2, |i, j| b4[(i, j)]);
    let mut q = DMatrix::zeros(4, 4);
    q.view_mut((2, 2), (2, 2))
        .copy_from(&DMatrix::from_fn(2, 2, |i, j| q_e[(i, j)]));
    let r = DMatrix::from_fn(2, 2, |i, j| r_ext[(i, j)]);
    let p = solve_dare(&a, &b, &q, &r, settings)?;
    Ok(TerminalPenalty::new(Mat4::from_fn(|i, j| p[(i, j)])))
}

/// LQR gain over the (delta_x, e) subsystem for a converged terminal penalty;
/// the unconstrained feedback-MPC first move equals `-K [delta_x; e]`.
pub fn rate_lqr_gain(
    model: &LocalModel,
    r_ext: &Mat2,
    penalty: &TerminalPenalty,
) -> Result<nalgebra::SMatrix<f64, 2, 4>, RiccatiError> {
    let (a4, b4) = rate_subsystem(model);
    let a = DMatrix::from_fn(4, 4, |i, j| a4[(i, j)]);
    let b = DMatrix::from_fn(4, 2, |i, j| b4[(i, j)]);
    let r = DMatrix::from_fn(2, 2, |i, j| r_ext[(i, j)]);
    let p = DMatrix::from_fn(4, 4, |i, j| penalty.p_tilde()[(i, j)]);
    let k = dlqr_gain(&a, &b, &r, &p)?;
    Ok(nalgebra::SMatrix::<f64, 2, 4>::from_fn(|i, j| k[(i, j)]))
}

/// Terminal penalties precomputed on the scheduling mesh.
#[derive(Debug, Clone)]
pub struct PenaltyGrid {
    mesh: ScheduleMesh,
    nodes: Vec<Mat4>,
}

impl PenaltyGrid {
    pub fn new(mesh: ScheduleMesh, nodes: Vec<Mat4>) -> Result<Self, RiccatiError> {
        if nodes.len() != mesh.node_count() {
            return Err(RiccatiError::NodeCount {
                nodes: nodes.len(),
                expected: mesh.node_count(),
            });
        }
        Ok(Self { mesh, nodes })
    }

    pub fn mesh(&self) -> &ScheduleMesh {
        &self.mesh
    }

    pub fn node(&self, i: usize, j: usize) -> &Mat4 {
        &self.nodes[self.mesh.node_index(i, j)]
    }

    pub fn nodes(&self) -> &[Mat4] {
        &self.nodes
    }

    /// Element-wise bilinear interpolation, clamped to the mesh hull.
    pub fn interpolate(&self, rho: &OperatingPoint) -> TerminalPenalty {
        let w = self.mesh.locate(rho);
        let p = Mat4::from_fn(|r, c| {
            self.mesh
                .bilerp(&w, |i, j| self.nodes[self.mesh.node_index(i, j)][(r, c)])
        });
        TerminalPenalty::new(p)
    }
}

/// Scalar DARE closed form for tests and cross-checks: the positive root of
/// `p^2 + p (r - a^2 r - q) - q r = 0` (b = 1).
pub fn scalar_dare_closed_form(a: f64, q: f64, r: f64) -> f64 {
    let c1 = r - a * a * r - q;
    (-c1 + (c1 * c1 + 4.0 * q * r).sqrt()) / 2.0
}
