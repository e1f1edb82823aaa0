//! Synthetic nonlinear two-state engine surrogate.
//!
//! Stands in for a high-fidelity engine model: intake manifold pressure and
//! EGR rate respond to EGR valve position (percent open), VGT position
//! (percent closed), engine speed, and fuel injection rate through coupled
//! first-order dynamics whose gains and time constants vary with the
//! operating point. Outputs are cycle-averaged; there is no crank-angle
//! resolution and no actuator dynamics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lpv::OperatingPoint;
use crate::Vec2;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("both compressor and EGR flows are zero; EGR rate undefined")]
    DegenerateFlow,
    #[error("outside admissible envelope: {0}")]
    Domain(String),
    #[error("invalid plant parameters: {0}")]
    BadParams(String),
}

/// Surrogate parameters. `scale_*` are dimensionless multipliers used for
/// plant/model mismatch studies; 1.0 means nominal.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// Ambient pressure, bar.
    pub p_amb: f64,
    /// Boost gain at full speed/fuel, bar.
    pub k_b: f64,
    /// Compressor flow coefficient, kg/s.
    pub c_c: f64,
    /// EGR flow coefficient, kg/s.
    pub c_e: f64,
    /// Admissible engine speed range, rpm. Speed is normalized by the upper
    /// limit so the boost term stays excitable down to the low-speed edge.
    pub speed_range: [f64; 2],
    /// Admissible fuel injection rate range, mg/stroke; normalized like speed.
    pub fuel_range: [f64; 2],
    pub scale_k_b: f64,
    pub scale_c_c: f64,
    pub scale_c_e: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            p_amb: 1.0,
            k_b: 1.5,
            c_c: 0.05,
            c_e: 0.08,
            speed_range: [600.0, 2400.0],
            fuel_range: [5.0, 105.0],
            scale_k_b: 1.0,
            scale_c_c: 1.0,
            scale_c_e: 1.0,
        }
    }
}

/// Plant state: intake manifold pressure (bar) and EGR rate (fraction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub p_im: f64,
    pub chi_egr: f64,
}

/// EGR rate as the recirculated share of total intake flow.
pub fn egr_rate(w_egr: f64, w_c: f64) -> Result<f64, PlantError> {
    if w_egr <= 0.0 && w_c <= 0.0 {
        return Err(PlantError::DegenerateFlow);
    }
    Ok(w_egr / (w_egr + w_c))
}

impl PlantParams {
    /// Validates parameter ranges and checks the steady-state maps are
    /// monotone (boost non-decreasing in VGT-closed fraction, EGR rate
    /// non-decreasing in EGR-valve fraction) on a sample lattice.
    pub fn validate(&self) -> Result<(), PlantError> {
        let pos = [
            ("p_amb", self.p_amb),
            ("k_b", self.k_b),
            ("c_c", self.c_c),
            ("c_e", self.c_e),
            ("scale_k_b", self.scale_k_b),
            ("scale_c_c", self.scale_c_c),
            ("scale_c_e", self.scale_c_e),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::BadParams(format!("{name} must be positive")));
            }
        }
        for (name, r) in [
            ("speed_range", self.speed_range),
            ("fuel_range", self.fuel_range),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1] && r[0] >= 0.0) {
                return Err(PlantError::BadParams(format!(
                    "{name} must be ordered and non-negative"
                )));
            }
        }
        // monotone steady gains on a lattice
        let fractions = [0.0, 0.25, 0.5, 0.75, 1.0];
        for &n in &fractions[1..] {
            for &f in &fractions[1..] {
                for &g in &fractions {
                    let mut prev = f64::NEG_INFINITY;
                    for &v in &fractions {
                        let (p, _) = self.steady_maps_normalized(n, f, g, v);
                        if p < prev - 1e-12 {
                            return Err(PlantError::BadParams(
                                "boost map not monotone in VGT position".into(),
                            ));
                        }
                        prev = p;
                    }
                }
                for &v in &fractions {
                    let mut prev = f64::NEG_INFINITY;
                    for &g in &fractions {
                        let (_, chi) = self.steady_maps_normalized(n, f, g, v);
                        if chi < prev - 1e-12 {
                            return Err(PlantError::BadParams(
                                "EGR map not monotone in valve position".into(),
                            ));
                        }
                        prev = chi;
                    }
                }
            }
        }
        Ok(())
    }

    /// Speed and fuel normalized to [0, 1] by the upper envelope limits;
    /// strictly positive everywhere inside the admissible envelope.
    pub fn normalized(&self, rho: &OperatingPoint) -> (f64, f64) {
        let n = rho.speed / self.speed_range[1];
        let f = rho.fuel / self.fuel_range[1];
        (n.clamp(0.0, 1.0), f.clamp(0.0, 1.0))
    }

    pub fn in_envelope(&self, rho: &OperatingPoint) -> bool {
        rho.speed >= self.speed_range[0]
            && rho.speed <= self.speed_range[1]
            && rho.fuel >= self.fuel_range[0]
            && rho.fuel <= self.fuel_range[1]
    }

    /// Steady-state maps in normalized coordinates: n, f in [0, 1] and
    /// g = EGR fraction open, v = VGT fraction closed.
    fn steady_maps_normalized(&self, n: f64, f: f64, g: f64, v: f64) -> (f64, f64) {
        let k_b = self.k_b * self.scale_k_b;
        let c_c = self.c_c * self.scale_c_c;
        let c_e = self.c_e * self.scale_c_e;
        let p_ss = self.p_amb * (1.0 + k_b * n * f * (0.2 + 0.8 * v.powf(1.3)) * (1.0 - 0.25 * g));
        let w_c = c_c * (0.3 + 0.7 * n) * (p_ss / self.p_amb);
        let w_egr = c_e * g * (0.3 + 0.7 * n) * (1.5 - p_ss / (2.0 * self.p_amb)).max(0.1);
        // w_c > 0 always, so the ratio is well defined
        let chi_ss = w_egr / (w_egr + w_c);
        (p_ss, chi_ss)
    }

    /// Steady state reached under constant operating point and actuators.
    pub fn steady_state(&self, rho: &OperatingPoint, u: &Vec2) -> Result<PlantState, PlantError> {
        if !self.in_envelope(rho) {
            return Err(PlantError::Domain(format!(
                "operating point ({:.1} rpm, {:.1} mg/stroke)",
                rho.speed, rho.fuel
            )));
        }
        if u.iter().any(|&ui| !(0.0..=100.0).contains(&ui)) {
            return Err(PlantError::Domain(format!(
                "actuators ({:.1}, {:.1}) outside [0, 100]",
                u[0], u[1]
            )));
        }
        let (n, f) = self.normalized(rho);
        let (p_ss, chi_ss) = self.steady_maps_normalized(n, f, u[0] / 100.0, u[1] / 100.0);
        Ok(PlantState {
            p_im: p_ss,
            chi_egr: chi_ss,
        })
    }

    /// Pressure and EGR time constants (s) at normalized speed `n`; the
    /// plant is slower at low engine speed.
    pub fn time_constants(&self, n: f64) -> (f64, f64) {
        (0.12 + 0.5 * (1.0 - n), 0.06 + 0.2 * (1.0 - n))
    }

    /// Advance the plant one controller sample with classical fourth-order
    /// Runge-Kutta and a fixed substep of at most 5 ms. Actuators are held
    /// over the sample; the result is clamped to the state invariants.
    pub fn step(&self, state: &PlantState, rho: &OperatingPoint, u: &Vec2, dt: f64) -> PlantState {
        assert!(dt > 0.0, "sample period must be positive");
        let (n, f) = self.normalized(rho);
        let g = (u[0] / 100.0).clamp(0.0, 1.0);
        let v = (u[1] / 100.0).clamp(0.0, 1.0);
        let (p_ss, chi_ss) = self.steady_maps_normalized(n, f, g, v);
        let (tau_p, tau_chi) = self.time_constants(n);
        const KAPPA: f64 = 0.1; // bar^-1 s^-1 pressure-to-EGR coupling

        let deriv = |p: f64, chi: f64| -> (f64, f64) {
            (
                (p_ss - p) / tau_p,
                (chi_ss - chi) / tau_chi + KAPPA * (p_ss - p),
            )
        };

        let substeps = (dt / 0.005).ceil().max(1.0) as usize;
        let h = dt / substeps as f64;
        let (mut p, mut chi) = (state.p_im, state.chi_egr);
        for _ in 0..substeps {
            let (k1p, k1c) = deriv(p, chi);
            let (k2p, k2c) = deriv(p + 0.5 * h * k1p, chi + 0.5 * h * k1c);
            let (k3p, k3c) = deriv(p + 0.5 * h * k2p, chi + 0.5 * h * k2c);
            let (k4p, k4c) = deriv(p + h * k3p, chi + h * k3c);
            p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
            chi += h / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c);
        }
        PlantState {
            p_im: p.max(0.5 * self.p_amb),
            chi_egr: chi.clamp(0.0, 1.0 - 1e-9),
        }
    }

    /// Nominal actuator calibration: smooth schedule of EGR valve and VGT
    /// positions over the operating envelope, used as the equilibrium for
    /// identification and as the steady-state feedforward table.
    pub fn nominal_actuators(&self, rho: &OperatingPoint) -> Vec2 {
        let (n, f) = self.normalized(rho);
        Vec2::new(55.0 - 25.0 * f - 10.0 * n, 45.0 + 25.0 * f + 10.0 * n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rho(speed: f64, fuel: f64) -> OperatingPoint {
        OperatingPoint { speed, fuel }
    }

    #[test]
    fn egr_rate_basic_cases() {
        assert_abs_diff_eq!(egr_rate(0.0, 0.1).unwrap(), 0.0);
        assert_abs_diff_eq!(egr_rate(0.05, 0.05).unwrap(), 0.5);
        assert_abs_diff_eq!(egr_rate(0.03, 0.07).unwrap(), 0.3, epsilon = 1e-15);
        assert!(matches!(
            egr_rate(0.0, 0.0),
            Err(PlantError::DegenerateFlow)
        ));
    }

    #[test]
    fn closed_egr_valve_gives_zero_rate() {
        let p = PlantParams::default();
        let ss = p
            .steady_state(&rho(1800.0, 60.0), &Vec2::new(0.0, 70.0))
            .unwrap();
        assert_eq!(ss.chi_egr, 0.0);
    }

    #[test]
    fn zero_fuel_gives_ambient_pressure() {
        // fuel normalization reaches zero only below the envelope floor; the
        // boost term then vanishes entirely
        let p = PlantParams::default();
        let (_, f) = p.normalized(&rho(1800.0, 0.0));
        assert_eq!(f, 0.0);
        let (p_ss, _) = p.steady_maps_normalized(0.75, 0.0, 0.3, 0.7);
        assert_abs_diff_eq!(p_ss, p.p_amb, epsilon = 1e-12);
    }

    #[test]
    fn steady_state_matches_hand_evaluation() {
        // n = f = g = v = 0.5 with default parameters, evaluated by hand:
        // p_ss  = 1 + 1.5*0.25*(0.2 + 0.8*0.5^1.3)*(1 - 0.125)
        // w_c   = 0.05*0.65*p_ss
        // w_egr = 0.08*0.5*0.65*max(0.1, 1.5 - p_ss/2)
        let p = PlantParams::default();
        let point = rho(1200.0, 52.5);
        let u = Vec2::new(50.0, 50.0);
        let (n, f) = p.normalized(&point);
        assert_abs_diff_eq!(n, 0.5);
        assert_abs_diff_eq!(f, 0.5);
        let p_ss = 1.0 + 1.5 * 0.5 * 0.5 * (0.2 + 0.8 * 0.5f64.powf(1.3)) * (1.0 - 0.25 * 0.5);
        let w_c = 0.05 * (0.3 + 0.7 * 0.5) * p_ss;
        let w_egr = 0.08 * 0.5 * (0.3 + 0.7 * 0.5) * (1.5_f64 - p_ss / 2.0).max(0.1);
        let chi_ss = w_egr / (w_egr + w_c);
        let ss = p.steady_state(&point, &u).unwrap();
        assert_abs_diff_eq!(ss.p_im, p_ss, epsilon = 1e-14);
        assert_abs_diff_eq!(ss.chi_egr, chi_ss, epsilon = 1e-14);
    }

    #[test]
    fn envelope_violation_is_domain_error() {
        let p = PlantParams::default();
        assert!(p
            .steady_state(&rho(100.0, 60.0), &Vec2::new(50.0, 50.0))
            .is_err());
        assert!(p
            .steady_state(&rho(1800.0, 60.0), &Vec2::new(120.0, 50.0))
            .is_err());
    }

    #[test]
    fn equilibrium_is_fixed_point_of_step() {
        let p = PlantParams::default();
        let point = rho(1200.0, 40.0);
        let u = Vec2::new(35.0, 60.0);
        let ss = p.steady_state(&point, &u).unwrap();
        let mut s = ss;
        for _ in 0..100 {
            s = p.step(&s, &point, &u, 0.02);
        }
        assert_abs_diff_eq!(s.p_im, ss.p_im, epsilon = 1e-9);
        assert_abs_diff_eq!(s.chi_egr, ss.chi_egr, epsilon = 1e-9);
    }

    #[test]
    fn small_steps_move_the_state_proportionally() {
        let p = PlantParams::default();
        let point = rho(1200.0, 40.0);
        let u = Vec2::new(35.0, 60.0);
        let s0 = PlantState {
            p_im: 1.4,
            chi_egr: 0.3,
        };
        let mut prev_norm = f64::INFINITY;
        for &dt in &[4e-3, 2e-3, 1e-3, 5e-4] {
            let s1 = p.step(&s0, &point, &u, dt);
            let norm = ((s1.p_im - s0.p_im).powi(2) + (s1.chi_egr - s0.chi_egr).powi(2)).sqrt();
            assert!(norm <= 10.0 * dt, "dt {dt}: moved {norm}");
            assert!(norm < prev_norm);
            prev_norm = norm;
        }
    }

    #[test]
    fn vgt_step_response_matches_fine_integration() {
        let p = PlantParams::default();
        let point = rho(1500.0, 55.0);
        let u0 = Vec2::new(40.0, 55.0);
        let u1 = Vec2::new(40.0, 65.0);
        let ss0 = p.steady_state(&point, &u0).unwrap();
        let ss1 = p.steady_state(&point, &u1).unwrap();

        // fine-substep oracle: direct RK4 at 0.1 ms
        let fine = |state: &PlantState, dt: f64| -> PlantState {
            let steps = (dt / 1e-4).round() as usize;
            let mut s = *state;
            for _ in 0..steps {
                s = p.step(&s, &point, &u1, 1e-4);
            }
            s
        };

        let mut coarse = ss0;
        let mut oracle = ss0;
        let mut monotone = true;
        let mut prev_p = ss0.p_im;
        for _ in 0..100 {
            coarse = p.step(&coarse, &point, &u1, 0.02);
            oracle = fine(&oracle, 0.02);
            assert_abs_diff_eq!(coarse.p_im, oracle.p_im, epsilon = 1e-6);
            assert_abs_diff_eq!(coarse.chi_egr, oracle.chi_egr, epsilon = 1e-6);
            if (ss1.p_im - coarse.p_im) * (ss1.p_im - prev_p) < 0.0 {
                monotone = false;
            }
            prev_p = coarse.p_im;
        }
        assert!(monotone, "pressure approach should be monotone");
        assert!((coarse.p_im - ss1.p_im).abs() < 1e-3);
    }

    #[test]
    fn integrator_is_fourth_order() {
        let p = PlantParams::default();
        let point = rho(900.0, 30.0);
        let u = Vec2::new(45.0, 55.0);
        let s0 = PlantState {
            p_im: 1.8,
            chi_egr: 0.05,
        };
        // one-step error against a very fine reference, halving the substep
        let reference = {
            let mut s = s0;
            for _ in 0..1000 {
                s = p.step(&s, &point, &u, 1e-4);
            }
            s
        };
        let err = |substep: f64| -> f64 {
            let steps = (0.1 / substep).round() as usize;
            let mut s = s0;
            for _ in 0..steps {
                s = p.step(&s, &point, &u, substep);
            }
            ((s.p_im - reference.p_im).powi(2) + (s.chi_egr - reference.chi_egr).powi(2)).sqrt()
        };
        let e1 = err(0.005);
        let e2 = err(0.0025);
        assert!(e2 > 0.0);
        assert!(e1 / e2 >= 8.0, "order ratio {}", e1 / e2);
    }

    #[test]
    fn perturbed_parameters_stay_valid() {
        for (kb, cc, ce) in [
            (1.1, 0.9, 1.1),
            (0.9, 1.1, 0.9),
            (1.1, 1.1, 1.1),
            (0.9, 0.9, 0.9),
        ] {
            let p = PlantParams {
                scale_k_b: kb,
                scale_c_c: cc,
                scale_c_e: ce,
                ..PlantParams::default()
            };
            p.validate().unwrap();
        }
    }

    #[test]
    fn monotone_gains_on_lattice() {
        PlantParams::default().validate().unwrap();
    }

    #[test]
    fn chi_stays_in_unit_interval() {
        let p = PlantParams::default();
        let point = rho(700.0, 20.0);
        let mut s = PlantState {
            p_im: 0.9,
            chi_egr: 0.97,
        };
        for k in 0..500 {
            let u = Vec2::new(if k % 40 < 20 { 100.0 } else { 0.0 }, 80.0);
            s = p.step(&s, &point, &u, 0.02);
            assert!((0.0..1.0).contains(&s.chi_egr));
        }
    }
}
