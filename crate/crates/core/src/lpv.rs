//! Gridded LPV prediction model.
//!
//! The prediction model is a family of local linear models
//! ```text
//!   x_{k+1} = x_ss + A (x_k - x_ss) + B (u_k - u_ss) + B_f (w_inj - w_inj_ss)
//! ```
//! identified at the nodes of a speed x fuel mesh and scheduled by bilinear
//! interpolation of every matrix and equilibrium entry. Scheduling points
//! outside the mesh hull are clamped; extrapolated models are untrusted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mesh::{MeshError, ScheduleMesh};
use crate::plant::{PlantError, PlantParams};
use crate::{Mat2, Vec2};

/// Spectral radius at or above this rejects an identified model.
pub const STABILITY_LIMIT: f64 = 0.999;

/// Ridge term added to the normal equations for conditioning.
const RIDGE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LpvError {
    #[error("operating point must be finite and non-negative, got ({speed}, {fuel})")]
    BadOperatingPoint { speed: f64, fuel: f64 },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("grid has {nodes} nodes for a {expected}-node mesh")]
    NodeCount { nodes: usize, expected: usize },
    #[error("record sequences must have equal length of at least 10 samples")]
    BadRecord,
    #[error("regressor matrix is rank deficient along the {direction} direction; inputs are not exciting")]
    RankDeficient { direction: &'static str },
    #[error("fitted model is unstable (spectral radius {spectral_radius:.4})")]
    Unstable { spectral_radius: f64 },
    #[error("identification failed at node ({speed_idx}, {fuel_idx}), rho = ({speed:.1} rpm, {fuel:.1} mg/stroke): {source}")]
    Node {
        speed_idx: usize,
        fuel_idx: usize,
        speed: f64,
        fuel: f64,
        #[source]
        source: Box<LpvError>,
    },
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Engine operating point: speed (rpm) and fuel injection rate (mg/stroke).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub speed: f64,
    pub fuel: f64,
}

impl OperatingPoint {
    pub fn new(speed: f64, fuel: f64) -> Result<Self, LpvError> {
        if !(speed.is_finite() && fuel.is_finite() && speed >= 0.0 && fuel >= 0.0) {
            return Err(LpvError::BadOperatingPoint { speed, fuel });
        }
        Ok(Self { speed, fuel })
    }
}

/// One identified local model with its equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub a: Mat2,
    pub b: Mat2,
    pub b_fuel: Vec2,
    /// Equilibrium state (intake pressure bar, EGR rate fraction).
    pub x_ss: Vec2,
    /// Equilibrium actuators (EGR percent open, VGT percent closed).
    pub u_ss: Vec2,
    /// Equilibrium fuel rate; equals the fuel coordinate of the node.
    pub w_inj_ss: f64,
}

impl LocalModel {
    /// One-step prediction in absolute coordinates.
    pub fn step(&self, x: &Vec2, u: &Vec2, w_inj: f64) -> Vec2 {
        self.x_ss
            + self.a * (x - self.x_ss)
            + self.b * (u - self.u_ss)
            + self.b_fuel * (w_inj - self.w_inj_ss)
    }

    /// Spectral radius of the 2x2 dynamics, in closed form.
    pub fn spectral_radius(&self) -> f64 {
        spectral_radius_2x2(&self.a)
    }
}

pub fn spectral_radius_2x2(a: &Mat2) -> f64 {
    let tr = a[(0, 0)] + a[(1, 1)];
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        ((tr + s) * 0.5).abs().max(((tr - s) * 0.5).abs())
    } else {
        det.abs().sqrt()
    }
}

/// Local models on a speed x fuel mesh; immutable after construction.
#[derive(Debug, Clone)]
pub struct ModelGrid {
    mesh: ScheduleMesh,
    nodes: Vec<LocalModel>,
}

impl ModelGrid {
    pub fn new(mesh: ScheduleMesh, nodes: Vec<LocalModel>) -> Result<Self, LpvError> {
        if nodes.len() != mesh.node_count() {
            return Err(LpvError::NodeCount {
                nodes: nodes.len(),
                expected: mesh.node_count(),
            });
        }
        Ok(Self { mesh, nodes })
    }

    pub fn mesh(&self) -> &ScheduleMesh {
        &self.mesh
    }

    pub fn node(&self, i: usize, j: usize) -> &LocalModel {
        &self.nodes[self.mesh.node_index(i, j)]
    }

    pub fn nodes(&self) -> &[LocalModel] {
        &self.nodes
    }

    /// Bilinear interpolation of every entry over the four surrounding
    /// nodes; `rho` is clamped into the mesh hull first. At a node the
    /// stored model is reproduced exactly.
    pub fn interpolate(&self, rho: &OperatingPoint) -> LocalModel {
        let w = self.mesh.locate(rho);
        let at = |f: &dyn Fn(&LocalModel) -> f64| {
            self.mesh
                .bilerp(&w, |i, j| f(&self.nodes[self.mesh.node_index(i, j)]))
        };
        LocalModel {
            a: Mat2::from_fn(|r, c| at(&|m| m.a[(r, c)])),
            b: Mat2::from_fn(|r, c| at(&|m| m.b[(r, c)])),
            b_fuel: Vec2::from_fn(|r, _| at(&|m| m.b_fuel[r])),
            x_ss: Vec2::from_fn(|r, _| at(&|m| m.x_ss[r])),
            u_ss: Vec2::from_fn(|r, _| at(&|m| m.u_ss[r])),
            w_inj_ss: at(&|m| m.w_inj_ss),
        }
    }
}

/// Input-output record sampled at the controller period.
#[derive(Debug, Clone)]
pub struct IoRecord {
    pub x: Vec<Vec2>,
    pub u: Vec<Vec2>,
    pub w_inj: Vec<f64>,
}

impl IoRecord {
    pub fn validate(&self) -> Result<(), LpvError> {
        let n = self.x.len();
        if n < 10 || self.u.len() != n || self.w_inj.len() != n {
            return Err(LpvError::BadRecord);
        }
        Ok(())
    }
}

const REGRESSOR_NAMES: [&str; 5] = ["p_im", "chi_egr", "u_egr", "u_vgt", "w_inj"];

/// Ordinary least squares fit of (A, B, B_f) from one-step deviations around
/// a known equilibrium. The 5x5 normal equations carry a 1e-10 ridge for
/// conditioning; rank deficiency and unstable fits are rejected.
pub fn fit_local_model(
    data: &IoRecord,
    x_ss: &Vec2,
    u_ss: &Vec2,
    w_inj_ss: f64,
) -> Result<LocalModel, LpvError> {
    data.validate()?;
    let samples = data.x.len() - 1;

    // Gram matrix and cross products of the stacked regressors
    // phi_k = [x_k - x_ss; u_k - u_ss; w_k - w_ss].
    let mut gram = nalgebra::SMatrix::<f64, 5, 5>::zeros();
    let mut cross = nalgebra::SMatrix::<f64, 2, 5>::zeros();
    for k in 0..samples {
        let phi = nalgebra::SVector::<f64, 5>::new(
            data.x[k][0] - x_ss[0],
            data.x[k][1] - x_ss[1],
            data.u[k][0] - u_ss[0],
            data.u[k][1] - u_ss[1],
            data.w_inj[k] - w_inj_ss,
        );
        let y = data.x[k + 1] - x_ss;
        gram += phi * phi.transpose();
        cross += y * phi.transpose();
    }

    // Relative rank check on the un-ridged Gram matrix. Scale-normalize the
    // directions first so percent-scale inputs do not mask unexcited
    // fraction-scale states.
    let scales = nalgebra::SVector::<f64, 5>::from_fn(|i, _| gram[(i, i)].sqrt().max(1e-12));
    let normalized =
        nalgebra::SMatrix::<f64, 5, 5>::from_fn(|i, j| gram[(i, j)] / (scales[i] * scales[j]));
    let eig = nalgebra::SymmetricEigen::new(normalized);
    let max_eig = eig.eigenvalues.amax();
    let (min_idx, &min_eig) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty eigenvalues");
    if min_eig <= 1e-10 * max_eig {
        let dir = eig.eigenvectors.column(min_idx);
        let dominant = dir
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        return Err(LpvError::RankDeficient {
            direction: REGRESSOR_NAMES[dominant],
        });
    }

    let ridged = gram + nalgebra::SMatrix::<f64, 5, 5>::identity() * RIDGE;
    let inv = ridged
        .try_inverse()
        .ok_or(LpvError::RankDeficient { direction: "p_im" })?;
    let theta = cross * inv;

    let model = LocalModel {
        a: theta.fixed_view::<2, 2>(0, 0).into(),
        b: theta.fixed_view::<2, 2>(0, 2).into(),
        b_fuel: theta.fixed_view::<2, 1>(0, 4).into(),
        x_ss: *x_ss,
        u_ss: *u_ss,
        w_inj_ss,
    };
    let radius = model.spectral_radius();
    if radius >= STABILITY_LIMIT {
        return Err(LpvError::Unstable {
            spectral_radius: radius,
        });
    }
    Ok(model)
}

/// Perturbation experiment design for local identification.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    /// Actuator perturbation amplitude, percentage points.
    pub actuator_amplitude: f64,
    /// Fuel-rate perturbation amplitude, mg/stroke.
    pub fuel_amplitude: f64,
    /// Experiment duration, s.
    pub duration: f64,
    /// Sample period, s.
    pub sample_period: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            // small enough that linearization error stays well under 1% of
            // the signal range even at the high-fuel nodes
            actuator_amplitude: 1.5,
            fuel_amplitude: 1.5,
            duration: 20.0,
            sample_period: 0.020,
            seed: 0x51d,
        }
    }
}

/// Run the perturbation experiment against the surrogate at one equilibrium:
/// random-sign excitation of both actuators and the fuel rate around the
/// nominal values, integrated at the controller period.
pub fn perturbation_experiment(
    plant: &PlantParams,
    rho: &OperatingPoint,
    u_nominal: &Vec2,
    spec: &PerturbationSpec,
    seed_offset: u64,
) -> Result<IoRecord, LpvError> {
    let samples = (spec.duration / spec.sample_period).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(seed_offset));
    let ss = plant.steady_state(rho, u_nominal)?;

    // shift the fuel excitation window down at the envelope ceiling so the
    // plant never saturates its fuel normalization during the experiment
    let fuel_base = rho
        .fuel
        .min(plant.fuel_range[1] - spec.fuel_amplitude)
        .max(0.0);

    let mut x = Vec::with_capacity(samples + 1);
    let mut u = Vec::with_capacity(samples + 1);
    let mut w = Vec::with_capacity(samples + 1);
    let mut state = ss;
    let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    for _ in 0..=samples {
        let du = Vec2::new(
            spec.actuator_amplitude * sign(&mut rng),
            spec.actuator_amplitude * sign(&mut rng),
        );
        let u_k = Vec2::new(
            (u_nominal[0] + du[0]).clamp(0.0, 100.0),
            (u_nominal[1] + du[1]).clamp(0.0, 100.0),
        );
        let w_k = (fuel_base + spec.fuel_amplitude * sign(&mut rng)).max(0.0);
        x.push(Vec2::new(state.p_im, state.chi_egr));
        u.push(u_k);
        w.push(w_k);
        let rho_k = OperatingPoint {
            speed: rho.speed,
            fuel: w_k,
        };
        state = plant.step(&state, &rho_k, &u_k, spec.sample_period);
    }
    Ok(IoRecord { x, u, w_inj: w })
}

/// Fit quality of one identified node.
#[derive(Debug, Clone)]
pub struct NodeFitReport {
    pub speed_idx: usize,
    pub fuel_idx: usize,
    pub rho: OperatingPoint,
    /// One-step prediction residual RMS per state on the experiment data.
    pub residual_rms: Vec2,
    /// Peak-to-peak range of each state over the experiment.
    pub signal_range: Vec2,
    pub spectral_radius: f64,
}

/// Identify a complete model grid against the surrogate plant: settle each
/// node to its nominal equilibrium, run the perturbation experiment, and fit
/// the local model. Node coordinates are attached to any failure.
pub fn build_grid(
    plant: &PlantParams,
    speed_breakpoints: &[f64],
    fuel_breakpoints: &[f64],
    spec: &PerturbationSpec,
) -> Result<ModelGrid, LpvError> {
    build_grid_with_report(plant, speed_breakpoints, fuel_breakpoints, spec).map(|(g, _)| g)
}

/// `build_grid` plus a per-node fit report.
pub fn build_grid_with_report(
    plant: &PlantParams,
    speed_breakpoints: &[f64],
    fuel_breakpoints: &[f64],
    spec: &PerturbationSpec,
) -> Result<(ModelGrid, Vec<NodeFitReport>), LpvError> {
    let mesh = ScheduleMesh::new(speed_breakpoints.to_vec(), fuel_breakpoints.to_vec())?;
    let mut nodes = Vec::with_capacity(mesh.node_count());
    let mut reports = Vec::with_capacity(mesh.node_count());
    for i in 0..speed_breakpoints.len() {
        for j in 0..fuel_breakpoints.len() {
            let rho = mesh.node_point(i, j);
            let wrap = |source: LpvError| LpvError::Node {
                speed_idx: i,
                fuel_idx: j,
                speed: rho.speed,
                fuel: rho.fuel,
                source: Box::new(source),
            };
            let (node, data) =
                identify_node(plant, &rho, spec, (i * fuel_breakpoints.len() + j) as u64)
                    .map_err(wrap)?;
            let range = Vec2::from_fn(|s, _| {
                let lo = data.x.iter().map(|x| x[s]).fold(f64::INFINITY, f64::min);
                let hi = data
                    .x
                    .iter()
                    .map(|x| x[s])
                    .fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            });
            reports.push(NodeFitReport {
                speed_idx: i,
                fuel_idx: j,
                rho,
                residual_rms: one_step_residual_rms(&node, &data),
                signal_range: range,
                spectral_radius: node.spectral_radius(),
            });
            nodes.push(node);
        }
    }
    Ok((ModelGrid::new(mesh, nodes)?, reports))
}

fn identify_node(
    plant: &PlantParams,
    rho: &OperatingPoint,
    spec: &PerturbationSpec,
    seed_offset: u64,
) -> Result<(LocalModel, IoRecord), LpvError> {
    let u_nominal = plant.nominal_actuators(rho);
    let ss = plant.steady_state(rho, &u_nominal)?;
    let data = perturbation_experiment(plant, rho, &u_nominal, spec, seed_offset)?;
    let model = fit_local_model(&data, &Vec2::new(ss.p_im, ss.chi_egr), &u_nominal, rho.fuel)?;
    Ok((model, data))
}

/// Root-mean-square one-step prediction residual of a model on a record,
/// per state component.
pub fn one_step_residual_rms(model: &LocalModel, data: &IoRecord) -> Vec2 {
    let n = data.x.len() - 1;
    let mut acc = Vec2::zeros();
    for k in 0..n {
        let pred = model.step(&data.x[k], &data.u[k], data.w_inj[k]);
        let err = data.x[k + 1] - pred;
        acc += err.component_mul(&err);
    }
    (acc / n as f64).map(f64::sqrt)
}

/// Default mesh used throughout: 9 uniform speed breakpoints over
/// 600..2400 rpm and 11 uniform fuel breakpoints over 5..105 mg/stroke.
pub fn default_breakpoints() -> (Vec<f64>, Vec<f64>) {
    let speed = (0..9).map(|i| 600.0 + 225.0 * i as f64).collect();
    let fuel = (0..11).map(|j| 5.0 + 10.0 * j as f64).collect();
    (speed, fuel)
}
