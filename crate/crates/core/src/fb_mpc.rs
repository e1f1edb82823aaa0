//! Rate-based feedback MPC.
//!
//! The controller works on increments: with the extended state
//! `[delta_x; e; x_prev; u_prev]` the prediction model becomes
//! ```text
//!   | A 0 0 0 |       | B |
//!   | A I 0 0 |  and  | B |
//!   | I 0 I 0 |       | 0 |
//!   | 0 0 0 I |       | I |
//! ```
//! driven by `delta_u`. Penalizing the tracking error `e` and the input
//! increments yields integral action and offset-free tracking. The optimal
//! control problem over an N-step horizon is condensed into a dense QP in
//! `z = (delta_u_0, .., delta_u_{N-1}, eps)` with soft state bounds (one
//! slack per state, shared across the horizon, applied to both bounds),
//! hard input bounds, and a DARE terminal penalty on `(delta_x_N, e_N)`.
//! Tracking weights are scheduled over operating regions.

use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lpv::{LocalModel, ModelGrid, OperatingPoint};
use crate::qp::{self, DenseQp, QpError, QpSettings, QpStatus};
use crate::riccati::{
    fb_terminal_penalty, DareSettings, PenaltyGrid, RiccatiError, TerminalPenalty,
};
use crate::{Mat2, Mat8, Vec2, Vec8};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

/// Half-open scalar band `[lo, hi)`; `None` means unbounded on that side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band(pub Option<f64>, pub Option<f64>);

impl Band {
    pub const ALL: Band = Band(None, None);

    pub fn contains(&self, v: f64) -> bool {
        self.0.is_none_or(|lo| v >= lo) && self.1.is_none_or(|hi| v < hi)
    }

    fn unbounded(&self) -> bool {
        self.0.is_none() && self.1.is_none()
    }
}

/// One tuning region over (engine speed, fuel rate, EGR rate) with its
/// tracking and move weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub label: String,
    pub speed: Band,
    pub fuel: Band,
    pub egr: Band,
    #[serde(with = "crate::config::mat2_rm")]
    pub q_e: Mat2,
    #[serde(with = "crate::config::mat2_rm")]
    pub r_ext: Mat2,
}

impl Region {
    pub fn matches(&self, speed: f64, fuel: f64, chi_egr: f64) -> bool {
        self.speed.contains(speed) && self.fuel.contains(fuel) && self.egr.contains(chi_egr)
    }

    fn is_catch_all(&self) -> bool {
        self.speed.unbounded() && self.fuel.unbounded() && self.egr.unbounded()
    }
}

/// Ordered region list resolved by first match; the final region is a
/// catch-all so every operating condition resolves.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<Region>", into = "Vec<Region>")]
pub struct RegionTable {
    regions: Vec<Region>,
}

impl TryFrom<Vec<Region>> for RegionTable {
    type Error = MpcError;
    fn try_from(regions: Vec<Region>) -> Result<Self, MpcError> {
        RegionTable::new(regions)
    }
}

impl From<RegionTable> for Vec<Region> {
    fn from(t: RegionTable) -> Vec<Region> {
        t.regions
    }
}

fn check_weights(label: &str, q_e: &Mat2, r_ext: &Mat2) -> Result<(), MpcError> {
    let sym = |m: &Mat2| (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * m.amax().max(1.0);
    if !sym(q_e) || !sym(r_ext) {
        return Err(MpcError::Config(format!(
            "region '{label}': weights must be symmetric"
        )));
    }
    let eig_min = |m: &Mat2| nalgebra::SymmetricEigen::new(*m).eigenvalues.min();
    if eig_min(q_e) < -1e-12 {
        return Err(MpcError::Config(format!(
            "region '{label}': Q_e must be positive semidefinite"
        )));
    }
    if eig_min(r_ext) <= 0.0 {
        return Err(MpcError::Config(format!(
            "region '{label}': R_ext must be positive definite"
        )));
    }
    Ok(())
}

impl RegionTable {
    pub fn new(regions: Vec<Region>) -> Result<Self, MpcError> {
        let Some(last) = regions.last() else {
            return Err(MpcError::Config("region table is empty".into()));
        };
        if !last.is_catch_all() {
            return Err(MpcError::Config(
                "last region must be a catch-all (all bands unbounded)".into(),
            ));
        }
        for r in &regions {
            check_weights(&r.label, &r.q_e, &r.r_ext)?;
        }
        Ok(Self { regions })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// First-match lookup; the catch-all guarantees a result. Boundary ties
    /// resolve to the lower-inclusive side of each half-open band.
    pub fn select(&self, speed: f64, fuel: f64, chi_egr: f64) -> (&Region, usize) {
        for (idx, r) in self.regions.iter().enumerate() {
            if r.matches(speed, fuel, chi_egr) {
                return (r, idx);
            }
        }
        unreachable!("catch-all region always matches")
    }

    /// Lattice check that regions before the catch-all are pairwise disjoint
    /// and that every sampled admissible point resolves to exactly one of
    /// them (or falls through to the catch-all).
    pub fn validate_partition(
        &self,
        speed_range: [f64; 2],
        fuel_range: [f64; 2],
        samples_per_axis: usize,
    ) -> Result<(), MpcError> {
        let n = samples_per_axis.max(2);
        let axis = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (n - 1) as f64;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let (s, f) = (
                        axis(speed_range[0], speed_range[1], a),
                        axis(fuel_range[0], fuel_range[1], b),
                    );
                    let chi = axis(0.0, 0.999, c);
                    let hits = self.regions[..self.regions.len() - 1]
                        .iter()
                        .filter(|r| r.matches(s, f, chi))
                        .count();
                    if hits > 1 {
                        return Err(MpcError::Config(format!(
                            "regions overlap at ({s:.1} rpm, {f:.1} mg/stroke, chi {chi:.3})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Default seven-region structure: qualitative low/high splits of speed,
    /// fuel, and EGR rate (high-fuel cells share one region), all carrying
    /// the default weights. Threshold values and per-region tuning are
    /// configuration overrides.
    pub fn default_seven() -> Self {
        let q_e = default_q_e();
        let r_ext = default_r_ext();
        let region = |label: &str, speed: Band, fuel: Band, egr: Band| Region {
            label: label.into(),
            speed,
            fuel,
            egr,
            q_e,
            r_ext,
        };
        const SPEED_MID: f64 = 1500.0;
        const FUEL_MID: f64 = 55.0;
        const EGR_MID: f64 = 0.25;
        let lo = |mid: f64| Band(None, Some(mid));
        let hi = |mid: f64| Band(Some(mid), None);
        RegionTable::new(vec![
            region(
                "low-speed low-fuel low-egr",
                lo(SPEED_MID),
                lo(FUEL_MID),
                lo(EGR_MID),
            ),
            region(
                "low-speed low-fuel high-egr",
                lo(SPEED_MID),
                lo(FUEL_MID),
                hi(EGR_MID),
            ),
            region(
                "low-speed high-fuel",
                lo(SPEED_MID),
                hi(FUEL_MID),
                Band::ALL,
            ),
            region(
                "high-speed low-fuel low-egr",
                hi(SPEED_MID),
                lo(FUEL_MID),
                lo(EGR_MID),
            ),
            region(
                "high-speed low-fuel high-egr",
                hi(SPEED_MID),
                lo(FUEL_MID),
                hi(EGR_MID),
            ),
            region(
                "high-speed high-fuel low-egr",
                hi(SPEED_MID),
                hi(FUEL_MID),
                lo(EGR_MID),
            ),
            region(
                "high-speed high-fuel high-egr",
                Band::ALL,
                Band::ALL,
                Band::ALL,
            ),
        ])
        .expect("default table is valid")
    }
}

/// Default tracking weight: pressure in bar, EGR rate in fraction, scaled to
/// equalize the two channels. The overall (Q, R) scale is chosen so terminal
/// penalties stay below ~1e6 in norm, where substitution residuals can still
/// be evaluated to 1e-9 in double precision; the feedback law only depends
/// on the Q/R ratio.
pub fn default_q_e() -> Mat2 {
    Mat2::new(10.0, 0.0, 0.0, 250.0)
}

/// Default move penalty: damped enough that the integral action does not
/// oscillate, which is also what leaves feedforward a transient role.
pub fn default_r_ext() -> Mat2 {
    Mat2::new(0.005, 0.0, 0.0, 0.005)
}

/// Where the terminal penalty comes from at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltySource {
    /// Bilinear interpolation of penalties precomputed on the model mesh.
    InterpolatedGrid,
    /// Re-solve the DARE at the scheduled model every step.
    OnlineDare,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbMpcConfig {
    /// Prediction horizon in steps (1 s at the 20 ms sample period).
    pub horizon: usize,
    /// Controller sample period, s.
    pub sample_period: f64,
    pub region_table: RegionTable,
    /// Slack penalty weight.
    pub mu: f64,
    #[serde(with = "crate::config::vec2_arr")]
    pub x_min: Vec2,
    #[serde(with = "crate::config::vec2_arr")]
    pub x_max: Vec2,
    #[serde(with = "crate::config::vec2_arr")]
    pub u_min: Vec2,
    #[serde(with = "crate::config::vec2_arr")]
    pub u_max: Vec2,
    pub penalty_source: PenaltySource,
    /// Tighten state constraints for the current feedforward increment.
    /// Off by default: it trades performance for conservatism.
    pub ff_constraint_tightening: bool,
    pub qp: QpSettings,
    pub dare: DareSettings,
}

impl Default for FbMpcConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            sample_period: 0.020,
            region_table: RegionTable::default_seven(),
            mu: 1e6,
            x_min: Vec2::new(0.5, 0.0),
            x_max: Vec2::new(3.0, 0.9),
            u_min: Vec2::new(0.0, 0.0),
            u_max: Vec2::new(100.0, 100.0),
            penalty_source: PenaltySource::InterpolatedGrid,
            ff_constraint_tightening: false,
            qp: QpSettings::default(),
            dare: DareSettings::default(),
        }
    }
}

impl FbMpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon < 2 {
            return Err(MpcError::Config("horizon must be at least 2".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.sample_period) {
            return Err(MpcError::Config("sample period must be positive".into()));
        }
        if !positive(self.mu) {
            return Err(MpcError::Config("slack weight mu must be positive".into()));
        }
        let ordered = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo < hi;
        for s in 0..2 {
            if !ordered(self.x_min[s], self.x_max[s]) || !ordered(self.u_min[s], self.u_max[s]) {
                return Err(MpcError::Config("bounds must be ordered min < max".into()));
            }
        }
        Ok(())
    }
}

/// Augmented state [delta_x; e; x_prev; u_prev] that seeds the prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendedState {
    pub delta_x: Vec2,
    pub e: Vec2,
    pub x_prev: Vec2,
    pub u_prev: Vec2,
}

impl ExtendedState {
    /// `u_bar_prev` is the feedforward-adjusted previous input; it equals
    /// the raw previous input when no feedforward is active.
    pub fn init(x_k: &Vec2, x_prev: &Vec2, u_bar_prev: &Vec2, r_k: &Vec2) -> Self {
        Self {
            delta_x: x_k - x_prev,
            e: x_k - r_k,
            x_prev: *x_prev,
            u_prev: *u_bar_prev,
        }
    }

    pub fn as_vec8(&self) -> Vec8 {
        Vec8::from_column_slice(&[
            self.delta_x[0],
            self.delta_x[1],
            self.e[0],
            self.e[1],
            self.x_prev[0],
            self.x_prev[1],
            self.u_prev[0],
            self.u_prev[1],
        ])
    }
}

/// Extended-system matrices for one local model.
pub fn extended_system(model: &LocalModel) -> (Mat8, SMatrix<f64, 8, 2>) {
    let mut a = Mat8::zeros();
    a.fixed_view_mut::<2, 2>(0, 0).copy_from(&model.a);
    a.fixed_view_mut::<2, 2>(2, 0).copy_from(&model.a);
    a.fixed_view_mut::<2, 2>(2, 2).copy_from(&Mat2::identity());
    a.fixed_view_mut::<2, 2>(4, 0).copy_from(&Mat2::identity());
    a.fixed_view_mut::<2, 2>(4, 4).copy_from(&Mat2::identity());
    a.fixed_view_mut::<2, 2>(6, 6).copy_from(&Mat2::identity());
    let mut b = SMatrix::<f64, 8, 2>::zeros();
    b.fixed_view_mut::<2, 2>(0, 0).copy_from(&model.b);
    b.fixed_view_mut::<2, 2>(2, 0).copy_from(&model.b);
    b.fixed_view_mut::<2, 2>(6, 0).copy_from(&Mat2::identity());
    (a, b)
}

/// Condensed QP plus the data needed to decode predicted trajectories.
pub struct CondensedFbQp {
    pub qp: DenseQp,
    horizon: usize,
    a_ext: Mat8,
    b_ext: SMatrix<f64, 8, 2>,
    x0: Vec8,
}

/// Predicted trajectories recovered from a decision vector.
#[derive(Debug, Clone)]
pub struct FbPrediction {
    /// Predicted states x_{j|k}, j = 1..=N.
    pub x: Vec<Vec2>,
    /// Predicted inputs u_{j|k}, j = 0..N-1.
    pub u: Vec<Vec2>,
    /// Input increments delta_u_{j|k}, j = 0..N-1.
    pub delta_u: Vec<Vec2>,
    /// Slack, one entry per state.
    pub eps: Vec2,
}

impl CondensedFbQp {
    pub fn decode(&self, z: &DVector<f64>) -> FbPrediction {
        let n = self.horizon;
        let mut delta_u = Vec::with_capacity(n);
        for i in 0..n {
            delta_u.push(Vec2::new(z[2 * i], z[2 * i + 1]));
        }
        let eps = Vec2::new(z[2 * n], z[2 * n + 1]);
        let mut x = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        let mut ext = self.x0;
        for du in &delta_u {
            u.push(Vec2::new(ext[6] + du[0], ext[7] + du[1]));
            ext = self.a_ext * ext + self.b_ext * du;
            x.push(Vec2::new(ext[0] + ext[4], ext[1] + ext[5]));
        }
        FbPrediction { x, u, delta_u, eps }
    }
}

/// Condense the N-step optimal control problem into a dense QP over
/// `z = (delta_u_0, .., delta_u_{N-1}, eps)`.
///
/// `delta_ff` is the feedforward increment applied this step; it only
/// affects the problem when constraint tightening is enabled.
pub fn build_qp(
    config: &FbMpcConfig,
    model: &LocalModel,
    penalty: &TerminalPenalty,
    q_e: &Mat2,
    r_ext: &Mat2,
    ext0: &ExtendedState,
    delta_ff: &Vec2,
) -> Result<CondensedFbQp, MpcError> {
    config.validate()?;
    let n = config.horizon;
    let nz = 2 * n + 2;
    let (a_ext, b_ext) = extended_system(model);
    let x0 = ext0.as_vec8();

    // Impulse responses M_d = A_ext^d B_ext and the free response.
    let mut impulse: Vec<SMatrix<f64, 8, 2>> = Vec::with_capacity(n);
    impulse.push(b_ext);
    for d in 1..n {
        let prev = impulse[d - 1];
        impulse.push(a_ext * prev);
    }
    let mut free: Vec<Vec8> = Vec::with_capacity(n + 1);
    free.push(x0);
    for j in 1..=n {
        let prev = free[j - 1];
        free.push(a_ext * prev);
    }

    // Extractions: error rows, leading (delta_x, e) rows, and the predicted
    // state x_j = delta_x_j + x_{j-1}.
    let e_rows: Vec<Mat2> = impulse
        .iter()
        .map(|m| m.fixed_view::<2, 2>(2, 0).into_owned())
        .collect();
    let lead_rows: Vec<SMatrix<f64, 4, 2>> = impulse
        .iter()
        .map(|m| m.fixed_view::<4, 2>(0, 0).into_owned())
        .collect();
    let x_rows: Vec<Mat2> = impulse
        .iter()
        .map(|m| (m.fixed_view::<2, 2>(0, 0) + m.fixed_view::<2, 2>(4, 0)).into_owned())
        .collect();
    let qe_rows: Vec<Mat2> = e_rows.iter().map(|e| q_e * e).collect();
    let p_tilde = penalty.p_tilde();
    let p_lead: Vec<SMatrix<f64, 4, 2>> = lead_rows.iter().map(|f| p_tilde * f).collect();

    // Quadratic term: per-diagonal accumulation of the stage sums plus the
    // terminal cross terms. hess_hat is the half-form (cost = z' hess_hat z).
    let mut hess = DMatrix::<f64>::zeros(nz, nz);
    for offset in 0..n {
        let mut acc = Mat2::zeros();
        let mut col = n - 1; // i' walking down from N-1 to offset
        loop {
            let i = col - offset;
            // terminal term F_{N-1-i}' P F_{N-1-i'}
            let block = lead_rows[n - 1 - i].transpose() * p_lead[n - 1 - col] + acc;
            let block = if offset == 0 { block + r_ext } else { block };
            for r in 0..2 {
                for c in 0..2 {
                    hess[(2 * i + r, 2 * col + c)] = 2.0 * block[(r, c)];
                    if offset > 0 {
                        hess[(2 * col + c, 2 * i + r)] = 2.0 * block[(r, c)];
                    }
                }
            }
            if col == offset {
                break;
            }
            // extend the stage sum for the next (smaller) i'
            acc += e_rows[n - 1 - col + offset].transpose() * qe_rows[n - 1 - col];
            col -= 1;
        }
    }
    hess[(2 * n, 2 * n)] = 2.0 * config.mu;
    hess[(2 * n + 1, 2 * n + 1)] = 2.0 * config.mu;
    // caller-side regularization before submission to the solver
    for d in 0..nz {
        hess[(d, d)] += 1e-9;
    }

    // Linear term from the free response.
    let mut linear = DVector::<f64>::zeros(nz);
    let qef: Vec<Vec2> = (0..=n)
        .map(|j| q_e * Vec2::new(free[j][2], free[j][3]))
        .collect();
    let p_lead_free =
        p_tilde * nalgebra::Vector4::new(free[n][0], free[n][1], free[n][2], free[n][3]);
    for i in 0..n {
        let mut g = lead_rows[n - 1 - i].transpose() * p_lead_free;
        for j in (i + 1)..n {
            g += e_rows[j - 1 - i].transpose() * qef[j];
        }
        linear[2 * i] = 2.0 * g[0];
        linear[2 * i + 1] = 2.0 * g[1];
    }

    // Constraints: soft state bounds (j = 1..N), hard input bounds
    // (j = 0..N-1), slack nonnegativity.
    let m_rows = 8 * n + 2;
    let mut g_mat = DMatrix::<f64>::zeros(m_rows, nz);
    let mut rhs = DVector::<f64>::zeros(m_rows);

    // cumulative feedforward effect on the true state when tightening is on
    let tighten = config.ff_constraint_tightening;
    let mut ff_effect = Vec2::zeros();
    let mut ff_cum = Mat2::zeros(); // sum_{m=0}^{j-1} A^{j-1-m} B

    let mut row = 0;
    for j in 1..=n {
        if tighten {
            ff_cum = model.a * ff_cum + model.b;
            ff_effect = ff_cum * delta_ff;
        }
        let xf = Vec2::new(free[j][0] + free[j][4], free[j][1] + free[j][5]);
        for s in 0..2 {
            // upper: x_j[s] - eps_s <= x_max[s] - ff_effect[s]
            for i in 0..j {
                let blk = &x_rows[j - 1 - i];
                g_mat[(row, 2 * i)] = blk[(s, 0)];
                g_mat[(row, 2 * i + 1)] = blk[(s, 1)];
            }
            g_mat[(row, 2 * n + s)] = -1.0;
            rhs[row] = config.x_max[s] - xf[s] - ff_effect[s];
            row += 1;
        }
        for s in 0..2 {
            // lower: -x_j[s] - eps_s <= -x_min[s] + ff_effect[s]
            for i in 0..j {
                let blk = &x_rows[j - 1 - i];
                g_mat[(row, 2 * i)] = -blk[(s, 0)];
                g_mat[(row, 2 * i + 1)] = -blk[(s, 1)];
            }
            g_mat[(row, 2 * n + s)] = -1.0;
            rhs[row] = xf[s] - config.x_min[s] + ff_effect[s];
            row += 1;
        }
    }
    for j in 0..n {
        for s in 0..2 {
            for i in 0..=j {
                g_mat[(row, 2 * i + s)] = 1.0;
            }
            rhs[row] = config.u_max[s] - ext0.u_prev[s];
            row += 1;
        }
        for s in 0..2 {
            for i in 0..=j {
                g_mat[(row, 2 * i + s)] = -1.0;
            }
            rhs[row] = ext0.u_prev[s] - config.u_min[s];
            row += 1;
        }
    }
    for s in 0..2 {
        g_mat[(row, 2 * n + s)] = -1.0;
        rhs[row] = 0.0;
        row += 1;
    }
    debug_assert_eq!(row, m_rows);

    let qp = DenseQp::new(hess, linear, g_mat, rhs)?;
    Ok(CondensedFbQp {
        qp,
        horizon: n,
        a_ext,
        b_ext,
        x0,
    })
}

/// Per-step solver diagnostics surfaced into the simulation trace.
#[derive(Debug, Clone)]
pub struct FbDiagnostics {
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub eps: Vec2,
    pub region: usize,
    /// Predicted one-step-ahead state x_{1|k}.
    pub predicted_x1: Vec2,
}

#[derive(Debug, Clone)]
pub struct FbStepResult {
    /// First optimal increment delta_u*_{0|k}.
    pub delta_u: Vec2,
    /// Applied input u_k = u_bar_{k-1} + delta_u*_{0|k}, saturated.
    pub u: Vec2,
    pub diagnostics: FbDiagnostics,
}

/// One feedback MPC update: schedule the model and terminal penalty at
/// `rho`, select region weights with the current EGR rate, build and solve
/// the condensed QP, and return the saturated control move. A solver that
/// runs out of iterations still returns its best iterate (flagged in the
/// diagnostics) so the control loop keeps running.
#[allow(clippy::too_many_arguments)]
pub fn fb_control_step(
    config: &FbMpcConfig,
    grid: &ModelGrid,
    penalties: &PenaltyGrid,
    x_k: &Vec2,
    x_prev: &Vec2,
    u_bar_prev: &Vec2,
    r_k: &Vec2,
    rho: &OperatingPoint,
    delta_ff: &Vec2,
) -> Result<FbStepResult, MpcError> {
    let model = grid.interpolate(rho);
    let (region, region_idx) = config.region_table.select(rho.speed, rho.fuel, x_k[1]);
    let penalty = match config.penalty_source {
        PenaltySource::InterpolatedGrid => penalties.interpolate(rho),
        PenaltySource::OnlineDare => {
            fb_terminal_penalty(&model, &region.q_e, &region.r_ext, &config.dare)?
        }
    };
    let ext0 = ExtendedState::init(x_k, x_prev, u_bar_prev, r_k);
    let built = build_qp(
        config,
        &model,
        &penalty,
        &region.q_e,
        &region.r_ext,
        &ext0,
        delta_ff,
    )?;
    let sol = qp::solve_qp(&built.qp, &config.qp);
    let pred = built.decode(&sol.z);
    let delta_u = pred.delta_u[0];
    let u = Vec2::new(
        (u_bar_prev[0] + delta_u[0]).clamp(config.u_min[0], config.u_max[0]),
        (u_bar_prev[1] + delta_u[1]).clamp(config.u_min[1], config.u_max[1]),
    );
    Ok(FbStepResult {
        delta_u,
        u,
        diagnostics: FbDiagnostics {
            status: sol.status,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            eps: pred.eps,
            region: region_idx,
            predicted_x1: pred.x[0],
        },
    })
}

/// Stateful wrapper holding the (x_{k-1}, u_{k-1}) controller memory.
/// One instance per control loop; not shared across threads.
#[derive(Debug, Clone)]
pub struct FbMpc {
    pub config: FbMpcConfig,
    x_prev: Vec2,
    u_prev: Vec2,
    started: bool,
}

impl FbMpc {
    /// `u0` is the actuator position held before the first sample.
    pub fn new(config: FbMpcConfig, u0: Vec2) -> Result<Self, MpcError> {
        config.validate()?;
        Ok(Self {
            config,
            x_prev: Vec2::zeros(),
            u_prev: u0,
            started: false,
        })
    }

    pub fn u_prev(&self) -> Vec2 {
        self.u_prev
    }

    /// Advance one sample: compose the feedforward increment into the
    /// previous input, solve, and update the memory with the applied input.
    pub fn step(
        &mut self,
        grid: &ModelGrid,
        penalties: &PenaltyGrid,
        x_k: &Vec2,
        r_k: &Vec2,
        rho: &OperatingPoint,
        delta_ff: &Vec2,
    ) -> Result<FbStepResult, MpcError> {
        if !self.started {
            self.x_prev = *x_k;
            self.started = true;
        }
        let u_bar_prev = self.u_prev + delta_ff;
        let result = fb_control_step(
            &self.config,
            grid,
            penalties,
            x_k,
            &self.x_prev,
            &u_bar_prev,
            r_k,
            rho,
            delta_ff,
        )?;
        self.x_prev = *x_k;
        self.u_prev = result.u;
        Ok(result)
    }
}

/// Precompute terminal penalties on the model mesh. Each node uses the
/// region weights evaluated at its own equilibrium EGR rate.
pub fn build_penalty_grid(
    grid: &ModelGrid,
    table: &RegionTable,
    settings: &DareSettings,
) -> Result<PenaltyGrid, RiccatiError> {
    let mesh = grid.mesh().clone();
    let mut nodes = Vec::with_capacity(mesh.node_count());
    for i in 0..mesh.speed_breakpoints().len() {
        for j in 0..mesh.fuel_breakpoints().len() {
            let model = grid.node(i, j);
            let rho = mesh.node_point(i, j);
            let (region, _) = table.select(rho.speed, rho.fuel, model.x_ss[1]);
            let penalty = fb_terminal_penalty(model, &region.q_e, &region.r_ext, settings)?;
            nodes.push(*penalty.p_tilde());
        }
    }
    PenaltyGrid::new(mesh, nodes)
}
