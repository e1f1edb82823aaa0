//! Shared breakpoint mesh over (engine speed, fuel injection rate).
//!
//! The model grid, the terminal-penalty grid, and the set-point map all
//! interpolate bilinearly over the same kind of mesh. Scheduling points
//! outside the breakpoint hull are clamped to it; no extrapolation.

use thiserror::Error;

use crate::lpv::OperatingPoint;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{axis} breakpoints must be strictly increasing with at least two entries")]
    BadBreakpoints { axis: &'static str },
}

/// Rectilinear breakpoint mesh with clamped bilinear cell lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleMesh {
    speed_breakpoints: Vec<f64>,
    fuel_breakpoints: Vec<f64>,
}

/// Cell index and normalized coordinates for one scheduling point.
///
/// `ts`/`tf` are exactly 0.0 or 1.0 when the point sits on a breakpoint, so
/// interpolation reproduces node values bit-for-bit.
#[derive(Debug, Clone, Copy)]
pub struct CellWeights {
    pub i: usize,
    pub j: usize,
    pub ts: f64,
    pub tf: f64,
}

fn check_axis(bps: &[f64], axis: &'static str) -> Result<(), MeshError> {
    if bps.len() < 2 || bps.iter().any(|b| !b.is_finite()) || bps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MeshError::BadBreakpoints { axis });
    }
    Ok(())
}

fn locate_axis(bps: &[f64], value: f64) -> (usize, f64) {
    let last = bps.len() - 1;
    if value <= bps[0] {
        return (0, 0.0);
    }
    if value >= bps[last] {
        return (last - 1, 1.0);
    }
    // partition_point returns the first breakpoint > value, so the cell
    // lower edge is that index minus one.
    let hi = bps.partition_point(|b| *b <= value);
    let i = hi - 1;
    let t = (value - bps[i]) / (bps[i + 1] - bps[i]);
    (i, t)
}

impl ScheduleMesh {
    pub fn new(speed_breakpoints: Vec<f64>, fuel_breakpoints: Vec<f64>) -> Result<Self, MeshError> {
        check_axis(&speed_breakpoints, "speed")?;
        check_axis(&fuel_breakpoints, "fuel")?;
        Ok(Self {
            speed_breakpoints,
            fuel_breakpoints,
        })
    }

    pub fn speed_breakpoints(&self) -> &[f64] {
        &self.speed_breakpoints
    }

    pub fn fuel_breakpoints(&self) -> &[f64] {
        &self.fuel_breakpoints
    }

    pub fn node_count(&self) -> usize {
        self.speed_breakpoints.len() * self.fuel_breakpoints.len()
    }

    /// Row-major node index (speed-major, fuel-minor).
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        i * self.fuel_breakpoints.len() + j
    }

    pub fn node_point(&self, i: usize, j: usize) -> OperatingPoint {
        OperatingPoint {
            speed: self.speed_breakpoints[i],
            fuel: self.fuel_breakpoints[j],
        }
    }

    /// Clamp `rho` into the hull and locate the enclosing cell.
    pub fn locate(&self, rho: &OperatingPoint) -> CellWeights {
        let (i, ts) = locate_axis(&self.speed_breakpoints, rho.speed);
        let (j, tf) = locate_axis(&self.fuel_breakpoints, rho.fuel);
        CellWeights { i, j, ts, tf }
    }

    /// Bilinear interpolation of a per-node scalar accessor.
    pub fn bilerp(&self, w: &CellWeights, f: impl Fn(usize, usize) -> f64) -> f64 {
        let lo = lerp(f(w.i, w.j), f(w.i, w.j + 1), w.tf);
        let hi = lerp(f(w.i + 1, w.j), f(w.i + 1, w.j + 1), w.tf);
        lerp(lo, hi, w.ts)
    }
}

/// Linear interpolation that returns endpoints exactly at t = 0 and t = 1.
pub fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh() -> ScheduleMesh {
        ScheduleMesh::new(vec![600.0, 1500.0, 2400.0], vec![5.0, 55.0, 105.0]).unwrap()
    }

    #[test]
    fn rejects_non_monotone_breakpoints() {
        assert!(ScheduleMesh::new(vec![600.0, 600.0], vec![5.0, 10.0]).is_err());
        assert!(ScheduleMesh::new(vec![600.0, 500.0], vec![5.0, 10.0]).is_err());
        assert!(ScheduleMesh::new(vec![600.0], vec![5.0, 10.0]).is_err());
    }

    #[test]
    fn locate_is_exact_at_nodes() {
        let m = mesh();
        let w = m.locate(&OperatingPoint {
            speed: 1500.0,
            fuel: 55.0,
        });
        assert_eq!((w.i, w.j), (1, 1));
        assert_eq!((w.ts, w.tf), (0.0, 0.0));
        let w = m.locate(&OperatingPoint {
            speed: 2400.0,
            fuel: 105.0,
        });
        assert_eq!((w.i, w.j), (1, 1));
        assert_eq!((w.ts, w.tf), (1.0, 1.0));
    }

    #[test]
    fn locate_clamps_outside_hull() {
        let m = mesh();
        let w = m.locate(&OperatingPoint {
            speed: 100.0,
            fuel: 500.0,
        });
        assert_eq!((w.i, w.ts), (0, 0.0));
        assert_eq!((w.j, w.tf), (1, 1.0));
    }

    #[test]
    fn bilerp_midpoint_averages() {
        let m = mesh();
        let w = m.locate(&OperatingPoint {
            speed: 1050.0,
            fuel: 5.0,
        });
        let v = m.bilerp(&w, |i, j| (i * 10 + j) as f64);
        // midpoint along speed at the first fuel breakpoint: (0 + 10) / 2
        assert_eq!(v, 5.0);
    }
}
