//! Time-indexed closed-loop record and its CSV serialization.

use std::io::Write;
use std::path::Path;

use crate::lpv::OperatingPoint;
use crate::sim::SimError;
use crate::Vec2;

/// One controller sample of the closed loop.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    /// Plant state at the sample instant.
    pub x: Vec2,
    pub r: Vec2,
    /// Input applied over the sample.
    pub u: Vec2,
    pub u_ff: Vec2,
    pub du_fb: Vec2,
    pub rho: OperatingPoint,
    pub eps: Vec2,
    pub fb_status: &'static str,
    pub fb_iterations: usize,
    pub fb_kkt: f64,
    pub ff_status: &'static str,
}

/// Complete closed-loop record; one row per controller sample, no gaps.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub sample_period: f64,
    pub label: String,
    pub seed: u64,
    pub records: Vec<StepRecord>,
}

pub const TRACE_HEADER: &str =
    "t,pim,egr,r_pim,r_egr,u_egr,u_vgt,uff_egr,uff_vgt,dufb_egr,dufb_vgt,eps1,eps2,fb_status,fb_iters,fb_kkt,ff_status";

impl SimTrace {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for rec in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                rec.t,
                rec.x[0],
                rec.x[1],
                rec.r[0],
                rec.r[1],
                rec.u[0],
                rec.u[1],
                rec.u_ff[0],
                rec.u_ff[1],
                rec.du_fb[0],
                rec.du_fb[1],
                rec.eps[0],
                rec.eps[1],
                rec.fb_status,
                rec.fb_iterations,
                rec.fb_kkt,
                rec.ff_status,
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), SimError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))?;
        Ok(())
    }
}
