//! Scenario generation: fuel steps, speed ramps, target-override mismatch
//! cases, and a seeded synthetic drive cycle.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lpv::OperatingPoint;
use crate::plant::PlantParams;
use crate::sim::SimError;
use crate::Vec2;

/// Where the per-step targets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSource {
    /// Interpolate the set-point map at the current operating point.
    Map,
    /// Hold the map targets of the initial operating point for the whole
    /// run (the feedforward table then disagrees with the targets after any
    /// operating-point change).
    HoldInitial,
    /// Explicit per-sample targets.
    Explicit(Vec<Vec2>),
}

/// Sampled operating-point profile with a target source.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub sample_period: f64,
    pub rho: Vec<OperatingPoint>,
    pub targets: TargetSource,
    pub label: String,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.sample_period * self.rho.len() as f64
    }
}

/// Declarative scenario description for configuration files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSpec {
    /// Constant speed with a fuel step up at `step_time` (and optionally
    /// back down at `step_down_time`).
    FuelStep {
        speed: f64,
        fuel_low: f64,
        fuel_high: f64,
        step_time: f64,
        #[serde(default)]
        step_down_time: Option<f64>,
        duration: f64,
    },
    /// Constant fuel with a linear speed ramp.
    SpeedRamp {
        fuel: f64,
        speed_start: f64,
        speed_end: f64,
        ramp_start: f64,
        ramp_duration: f64,
        duration: f64,
    },
    /// Fuel step with targets frozen at their pre-step values, so the
    /// steady-state feedforward table no longer matches the targets.
    TargetOverride {
        speed: f64,
        fuel_low: f64,
        fuel_high: f64,
        step_time: f64,
        duration: f64,
    },
    /// Seeded pseudo drive cycle: piecewise speed/fuel ramps through the
    /// envelope with dwell segments, including forced low-speed dwells.
    SyntheticCycle { duration: f64 },
    /// Replay a recorded profile from a scenario CSV file.
    CsvFile { path: String },
}

impl ScenarioSpec {
    pub fn validate(&self, plant: &PlantParams) -> Result<(), SimError> {
        let check_speed = |s: f64| -> Result<(), SimError> {
            if s < plant.speed_range[0] || s > plant.speed_range[1] {
                return Err(SimError::Scenario(format!(
                    "speed {s:.1} rpm outside envelope [{:.1}, {:.1}]",
                    plant.speed_range[0], plant.speed_range[1]
                )));
            }
            Ok(())
        };
        let check_fuel = |f: f64| -> Result<(), SimError> {
            if f < plant.fuel_range[0] || f > plant.fuel_range[1] {
                return Err(SimError::Scenario(format!(
                    "fuel {f:.1} mg/stroke outside envelope [{:.1}, {:.1}]",
                    plant.fuel_range[0], plant.fuel_range[1]
                )));
            }
            Ok(())
        };
        match self {
            ScenarioSpec::FuelStep {
                speed,
                fuel_low,
                fuel_high,
                duration,
                ..
            }
            | ScenarioSpec::TargetOverride {
                speed,
                fuel_low,
                fuel_high,
                duration,
                ..
            } => {
                check_speed(*speed)?;
                check_fuel(*fuel_low)?;
                check_fuel(*fuel_high)?;
                positive_duration(*duration)
            }
            ScenarioSpec::SpeedRamp {
                fuel,
                speed_start,
                speed_end,
                duration,
                ..
            } => {
                check_fuel(*fuel)?;
                check_speed(*speed_start)?;
                check_speed(*speed_end)?;
                positive_duration(*duration)
            }
            ScenarioSpec::SyntheticCycle { duration } => positive_duration(*duration),
            ScenarioSpec::CsvFile { path } => {
                if Path::new(path).is_file() {
                    Ok(())
                } else {
                    Err(SimError::Scenario(format!(
                        "scenario file {path} not found"
                    )))
                }
            }
        }
    }

    /// Per-sample envelope check for replayed profiles.
    fn check_profile(scenario: &Scenario, plant: &PlantParams) -> Result<(), SimError> {
        for (k, rho) in scenario.rho.iter().enumerate() {
            if !plant.in_envelope(rho) {
                return Err(SimError::Scenario(format!(
                    "sample {k}: ({:.1} rpm, {:.1} mg/stroke) outside envelope",
                    rho.speed, rho.fuel
                )));
            }
        }
        Ok(())
    }
}

fn positive_duration(d: f64) -> Result<(), SimError> {
    if d > 0.0 {
        Ok(())
    } else {
        Err(SimError::Scenario("duration must be positive".into()))
    }
}

/// Materialize a scenario at the controller sample period. `seed` only
/// affects the synthetic cycle.
pub fn make_scenario(
    spec: &ScenarioSpec,
    plant: &PlantParams,
    sample_period: f64,
    seed: u64,
) -> Result<Scenario, SimError> {
    spec.validate(plant)?;
    let samples = |duration: f64| (duration / sample_period).round().max(1.0) as usize;
    match *spec {
        ScenarioSpec::FuelStep {
            speed,
            fuel_low,
            fuel_high,
            step_time,
            step_down_time,
            duration,
        } => {
            let n = samples(duration);
            let rho = (0..n)
                .map(|k| {
                    let t = k as f64 * sample_period;
                    let up = t >= step_time && step_down_time.is_none_or(|down| t < down);
                    OperatingPoint {
                        speed,
                        fuel: if up { fuel_high } else { fuel_low },
                    }
                })
                .collect();
            Ok(Scenario {
                sample_period,
                rho,
                targets: TargetSource::Map,
                label: "fuel-step".into(),
            })
        }
        ScenarioSpec::SpeedRamp {
            fuel,
            speed_start,
            speed_end,
            ramp_start,
            ramp_duration,
            duration,
        } => {
            let n = samples(duration);
            let rho = (0..n)
                .map(|k| {
                    let t = k as f64 * sample_period;
                    let frac = ((t - ramp_start) / ramp_duration).clamp(0.0, 1.0);
                    OperatingPoint {
                        speed: speed_start + frac * (speed_end - speed_start),
                        fuel,
                    }
                })
                .collect();
            Ok(Scenario {
                sample_period,
                rho,
                targets: TargetSource::Map,
                label: "speed-ramp".into(),
            })
        }
        ScenarioSpec::TargetOverride {
            speed,
            fuel_low,
            fuel_high,
            step_time,
            duration,
        } => {
            let n = samples(duration);
            let rho = (0..n)
                .map(|k| {
                    let t = k as f64 * sample_period;
                    OperatingPoint {
                        speed,
                        fuel: if t >= step_time { fuel_high } else { fuel_low },
                    }
                })
                .collect();
            Ok(Scenario {
                sample_period,
                rho,
                targets: TargetSource::HoldInitial,
                label: "target-override".into(),
            })
        }
        ScenarioSpec::SyntheticCycle { duration } => {
            Ok(synthetic_cycle(plant, sample_period, duration, seed))
        }
        ScenarioSpec::CsvFile { ref path } => {
            let scenario = load_scenario(Path::new(path))?;
            if (scenario.sample_period - sample_period).abs() > 1e-9 {
                return Err(SimError::Scenario(format!(
                    "scenario file is sampled at {} s, controller runs at {} s",
                    scenario.sample_period, sample_period
                )));
            }
            ScenarioSpec::check_profile(&scenario, plant)?;
            Ok(scenario)
        }
    }
}

/// Pseudo drive cycle: alternating ramp/dwell segments between random
/// way-points, with every third segment forced into a low-speed dwell to
/// probe the sluggish end of the envelope.
fn synthetic_cycle(plant: &PlantParams, sample_period: f64, duration: f64, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration / sample_period).round().max(1.0) as usize;
    let [s_lo, s_hi] = plant.speed_range;
    let [f_lo, f_hi] = plant.fuel_range;
    // keep a small margin so interpolation stays strictly inside the hull
    let s_span = s_hi - s_lo;
    let f_span = f_hi - f_lo;

    let mut rho = Vec::with_capacity(n);
    let mut current = OperatingPoint {
        speed: s_lo + 0.35 * s_span,
        fuel: f_lo + 0.25 * f_span,
    };
    let mut segment = 0usize;
    while rho.len() < n {
        let low_speed_dwell = segment % 3 == 2;
        let target = if low_speed_dwell {
            OperatingPoint {
                speed: s_lo + rng.random_range(0.0..0.12) * s_span,
                fuel: f_lo + rng.random_range(0.02..0.25) * f_span,
            }
        } else {
            OperatingPoint {
                speed: s_lo + rng.random_range(0.05..1.0) * s_span,
                fuel: f_lo + rng.random_range(0.05..0.95) * f_span,
            }
        };
        let ramp_s = rng.random_range(0.8..3.5);
        let dwell_s = if low_speed_dwell {
            rng.random_range(3.0..7.0)
        } else {
            rng.random_range(1.0..5.0)
        };
        let ramp_steps = (ramp_s / sample_period).round().max(1.0) as usize;
        let dwell_steps = (dwell_s / sample_period).round() as usize;
        let from = current;
        for k in 1..=ramp_steps {
            if rho.len() >= n {
                break;
            }
            let frac = k as f64 / ramp_steps as f64;
            rho.push(OperatingPoint {
                speed: from.speed + frac * (target.speed - from.speed),
                fuel: from.fuel + frac * (target.fuel - from.fuel),
            });
        }
        for _ in 0..dwell_steps {
            if rho.len() >= n {
                break;
            }
            rho.push(target);
        }
        current = target;
        segment += 1;
    }
    Scenario {
        sample_period,
        rho,
        targets: TargetSource::Map,
        label: "synthetic-cycle".into(),
    }
}

/// Write a scenario as CSV with the header `t,Ne,winj,r_pim,r_egr`; the
/// target cells stay empty unless the scenario carries explicit targets.
pub fn save_scenario(path: &Path, scenario: &Scenario) -> Result<(), SimError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,Ne,winj,r_pim,r_egr")?;
    for (k, rho) in scenario.rho.iter().enumerate() {
        let t = k as f64 * scenario.sample_period;
        match &scenario.targets {
            TargetSource::Explicit(r) => writeln!(
                out,
                "{},{},{},{},{}",
                t, rho.speed, rho.fuel, r[k][0], r[k][1]
            )?,
            _ => writeln!(out, "{},{},{},,", t, rho.speed, rho.fuel)?,
        }
    }
    Ok(())
}

/// Load a scenario CSV. Rows with empty target cells yield map-derived
/// targets; fully populated target columns yield explicit overrides.
pub fn load_scenario(path: &Path) -> Result<Scenario, SimError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, message: String| SimError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))??;
    if header.trim() != "t,Ne,winj,r_pim,r_egr" {
        return Err(parse_err(1, format!("unexpected header '{header}'")));
    }
    let mut times = Vec::new();
    let mut rho = Vec::new();
    let mut targets: Vec<Option<Vec2>> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(parse_err(
                lineno,
                format!("expected 5 columns, got {}", cells.len()),
            ));
        }
        let num = |s: &str, name: &str| -> Result<f64, SimError> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(lineno, format!("bad {name} value '{s}'")))
        };
        times.push(num(cells[0], "t")?);
        rho.push(OperatingPoint {
            speed: num(cells[1], "Ne")?,
            fuel: num(cells[2], "winj")?,
        });
        let r_cells = (cells[3].trim(), cells[4].trim());
        targets.push(match r_cells {
            ("", "") => None,
            (a, b) => Some(Vec2::new(num(a, "r_pim")?, num(b, "r_egr")?)),
        });
    }
    if times.len() < 2 {
        return Err(parse_err(2, "need at least two samples".into()));
    }
    let dt = times[1] - times[0];
    for (k, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 {
            return Err(parse_err(k + 3, "sample spacing must be uniform".into()));
        }
    }
    let targets = if targets.iter().all(Option::is_none) {
        TargetSource::Map
    } else if targets.iter().all(Option::is_some) {
        TargetSource::Explicit(targets.into_iter().map(Option::unwrap).collect())
    } else {
        return Err(parse_err(
            2,
            "target columns must be all empty or all present".into(),
        ));
    };
    Ok(Scenario {
        sample_period: dt,
        rho,
        targets,
        label: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into()),
    })
}
