//! Closed-loop simulation harness.
//!
//! Wires the surrogate plant, the feedback MPC, and the selected feedforward
//! into one sampled loop: read the operating point and targets, evaluate the
//! feedforward, fold its increment into the previous input, run the feedback
//! update, apply the saturated command to the plant, and log everything.
//! Runs are deterministic for a given scenario and seed.

pub mod metrics;
pub mod scenario;
pub mod setpoints;
pub mod trace;

pub use metrics::{compute_metrics, Metrics};
pub use scenario::{make_scenario, Scenario, ScenarioSpec, TargetSource};
pub use setpoints::SetpointMap;
pub use trace::{SimTrace, StepRecord};

use thiserror::Error;

use crate::fb_mpc::{FbMpc, FbMpcConfig, MpcError};
use crate::feedforward::{lut_ff, FfMode, FfMpc, FfMpcConfig, FfStatus};
use crate::lpv::{ModelGrid, OperatingPoint};
use crate::plant::{PlantError, PlantParams};
use crate::riccati::PenaltyGrid;
use crate::Vec2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("trace is empty")]
    EmptyTrace,
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// Everything one closed-loop run needs.
pub struct RunInputs<'a> {
    pub plant: &'a PlantParams,
    pub grid: &'a ModelGrid,
    pub penalties: &'a PenaltyGrid,
    pub fb: &'a FbMpcConfig,
    pub ff: &'a FfMpcConfig,
    pub ff_mode: FfMode,
    pub setpoints: &'a SetpointMap,
    pub scenario: &'a Scenario,
    pub seed: u64,
    /// Optional first-order lag (s) on the EGR-rate measurement.
    pub egr_measurement_lag: Option<f64>,
}

/// Run the closed loop over a scenario. Solver trouble is recorded in the
/// per-step diagnostics; the loop never aborts mid-run once started.
pub fn run_closed_loop(inputs: &RunInputs) -> Result<SimTrace, SimError> {
    let scenario = inputs.scenario;
    if scenario.is_empty() {
        return Err(SimError::Scenario("scenario has no samples".into()));
    }
    if (scenario.sample_period - inputs.fb.sample_period).abs() > 1e-9 {
        return Err(SimError::Scenario(format!(
            "scenario sampled at {} s but the controller runs at {} s",
            scenario.sample_period, inputs.fb.sample_period
        )));
    }
    inputs.fb.validate()?;
    inputs.ff.validate()?;
    let dt = scenario.sample_period;

    let rho0 = scenario.rho[0];
    let model0 = inputs.grid.interpolate(&rho0);
    let u0 = model0.u_ss;
    let mut plant_state = inputs.plant.steady_state(&rho0, &u0)?;
    let mut fb = FbMpc::new(inputs.fb.clone(), u0)?;

    let mut ff_mpc = FfMpc::new(inputs.ff.clone())?;
    // initialize the previous feedforward to the startup value so the first
    // composition step carries no artificial jump
    let mut ff_prev = match inputs.ff_mode {
        FfMode::None => Vec2::zeros(),
        FfMode::LookupTable => lut_ff(inputs.grid, &rho0),
        FfMode::Mpc => {
            ff_mpc.reset_to(model0.x_ss);
            model0.u_ss
        }
    };

    let hold_target = match &scenario.targets {
        TargetSource::HoldInitial => Some(inputs.setpoints.target(&rho0)),
        _ => None,
    };

    let mut chi_measured = plant_state.chi_egr;
    let mut records = Vec::with_capacity(scenario.len());
    for (k, rho_k) in scenario.rho.iter().enumerate() {
        let r_k = match &scenario.targets {
            TargetSource::Map => inputs.setpoints.target(rho_k),
            TargetSource::HoldInitial => hold_target.unwrap(),
            TargetSource::Explicit(r) => r[k],
        };
        // measured state; the EGR rate optionally passes a first-order lag
        chi_measured = match inputs.egr_measurement_lag {
            Some(tau) if tau > 0.0 => {
                let alpha = 1.0 - (-dt / tau).exp();
                chi_measured + alpha * (plant_state.chi_egr - chi_measured)
            }
            _ => plant_state.chi_egr,
        };
        let x_k = Vec2::new(plant_state.p_im, chi_measured);

        let (ff_now, ff_status) = match inputs.ff_mode {
            FfMode::None => (ff_prev, FfStatus::Inactive),
            FfMode::LookupTable => (lut_ff(inputs.grid, rho_k), FfStatus::Lut),
            FfMode::Mpc => ff_mpc.step(inputs.grid, rho_k, &r_k)?,
        };
        let delta_ff = ff_now - ff_prev;

        let step = fb.step(inputs.grid, inputs.penalties, &x_k, &r_k, rho_k, &delta_ff)?;

        records.push(StepRecord {
            t: k as f64 * dt,
            x: x_k,
            r: r_k,
            u: step.u,
            u_ff: ff_now,
            du_fb: step.delta_u,
            rho: *rho_k,
            eps: step.diagnostics.eps,
            fb_status: step.diagnostics.status.as_str(),
            fb_iterations: step.diagnostics.iterations,
            fb_kkt: step.diagnostics.kkt_residual,
            ff_status: ff_status.as_str(),
        });

        plant_state = inputs.plant.step(&plant_state, rho_k, &step.u, dt);
        if inputs.ff_mode == FfMode::Mpc {
            ff_mpc.advance(inputs.grid, rho_k, &step.u, rho_k.fuel);
        }
        ff_prev = ff_now;
    }

    Ok(SimTrace {
        sample_period: dt,
        label: scenario.label.clone(),
        seed: inputs.seed,
        records,
    })
}

/// Options for the linear verification loop, where the plant is the
/// scheduled prediction model itself.
pub struct LinearRunOptions {
    pub rho: OperatingPoint,
    pub target: Vec2,
    /// Constant additive state disturbance applied every step.
    pub disturbance: Vec2,
    /// Per-step feedforward values; `None` runs pure feedback.
    pub ff_sequence: Option<Vec<Vec2>>,
    pub steps: usize,
}

/// Result of a linear verification run.
pub struct LinearRunResult {
    /// Tracking error at every step.
    pub errors: Vec<Vec2>,
    /// Max residual of the one-step feedforward-effect identity
    /// `x_{k+1} = x_{1|k} + B (u_ff_k - u_ff_{k-1})` (meaningful for
    /// disturbance-free runs).
    pub identity_residual_max: f64,
    /// Applied inputs.
    pub inputs: Vec<Vec2>,
}

/// Closed loop against the *linear* prediction model at fixed `rho`:
/// verifies offset-free tracking under constant disturbances and the exact
/// feedforward-effect identity at every step.
pub fn run_linear_loop(
    grid: &ModelGrid,
    penalties: &PenaltyGrid,
    fb_config: &FbMpcConfig,
    opts: &LinearRunOptions,
) -> Result<LinearRunResult, SimError> {
    let model = grid.interpolate(&opts.rho);
    let mut fb = FbMpc::new(fb_config.clone(), model.u_ss)?;
    let mut x = model.x_ss;
    let mut ff_prev = opts
        .ff_sequence
        .as_ref()
        .map(|seq| seq[0])
        .unwrap_or_else(Vec2::zeros);

    let mut errors = Vec::with_capacity(opts.steps);
    let mut inputs = Vec::with_capacity(opts.steps);
    let mut identity_residual_max = 0.0f64;
    for k in 0..opts.steps {
        let ff_now = opts
            .ff_sequence
            .as_ref()
            .map(|seq| seq[k.min(seq.len() - 1)])
            .unwrap_or_else(Vec2::zeros);
        let delta_ff = ff_now - ff_prev;
        let step = fb.step(grid, penalties, &x, &opts.target, &opts.rho, &delta_ff)?;
        let x_next = model.step(&x, &step.u, opts.rho.fuel) + opts.disturbance;
        let predicted = step.diagnostics.predicted_x1 + model.b * delta_ff;
        identity_residual_max = identity_residual_max.max((x_next - predicted).amax());
        errors.push(x - opts.target);
        inputs.push(step.u);
        x = x_next;
        ff_prev = ff_now;
    }
    Ok(LinearRunResult {
        errors,
        identity_residual_max,
        inputs,
    })
}
