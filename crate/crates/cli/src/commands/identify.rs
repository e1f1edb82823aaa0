use std::path::Path;

use airpath_core::fb_mpc::{build_penalty_grid, FbMpcConfig};
use airpath_core::lpv::{self, PerturbationSpec};
use airpath_core::plant::PlantParams;

use crate::{config_err, runtime_err, CliError};

fn parse_mesh(mesh: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = mesh.split('x').collect();
    let bad = || config_err(format!("mesh must look like 9x11, got '{mesh}'"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let ns: usize = parts[0].parse().map_err(|_| bad())?;
    let nf: usize = parts[1].parse().map_err(|_| bad())?;
    if ns < 2 || nf < 2 {
        return Err(config_err("mesh needs at least 2 breakpoints per axis"));
    }
    Ok((ns, nf))
}

fn uniform(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect()
}

pub fn run(plant_path: &Path, out: &Path, mesh: &str, seed: u64) -> Result<(), CliError> {
    let (ns, nf) = parse_mesh(mesh)?;
    let text = std::fs::read_to_string(plant_path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", plant_path.display())))?;
    let plant: PlantParams = serde_json::from_str(&text).map_err(|e| {
        config_err(format!(
            "invalid plant config {}: {e}",
            plant_path.display()
        ))
    })?;
    plant.validate().map_err(config_err)?;

    let speed_bps = uniform(plant.speed_range[0], plant.speed_range[1], ns);
    let fuel_bps = uniform(plant.fuel_range[0], plant.fuel_range[1], nf);
    let spec = PerturbationSpec {
        seed,
        ..PerturbationSpec::default()
    };
    let (grid, reports) = lpv::build_grid_with_report(&plant, &speed_bps, &fuel_bps, &spec)
        .map_err(|e| runtime_err(format!("identification failed: {e}")))?;

    let fb = FbMpcConfig::default();
    let penalties = build_penalty_grid(&grid, &fb.region_table, &fb.dare).map_err(runtime_err)?;
    airpath_core::grid_io::save_grid(out, &grid, Some(&penalties)).map_err(runtime_err)?;

    println!("identified {} nodes ({}x{} mesh)", reports.len(), ns, nf);
    println!("node (speed rpm, fuel mg/str)   rms_pim      rms_egr      spectral radius");
    let mut worst = (0.0f64, 0.0f64);
    for r in &reports {
        println!(
            "({:2},{:2}) ({:7.1}, {:5.1})      {:.3e}    {:.3e}    {:.4}",
            r.speed_idx,
            r.fuel_idx,
            r.rho.speed,
            r.rho.fuel,
            r.residual_rms[0],
            r.residual_rms[1],
            r.spectral_radius
        );
        worst.0 = worst.0.max(r.residual_rms[0]);
        worst.1 = worst.1.max(r.residual_rms[1]);
    }
    println!(
        "worst residual rms: p_im {:.3e} bar, chi_egr {:.3e}; grid written to {}",
        worst.0,
        worst.1,
        out.display()
    );
    Ok(())
}
