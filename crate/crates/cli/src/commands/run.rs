use std::path::Path;

use airpath_core::config::RunConfig;
use airpath_core::sim::{compute_metrics, make_scenario, run_closed_loop, RunInputs, SetpointMap};

use crate::manifest::{file_sha256, write_atomic, write_json_atomic, RunManifest};
use crate::{config_err, runtime_err, CliError};

pub fn run(config_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path).map_err(config_err)?;
    let label = config.label.clone().unwrap_or_else(|| "run".to_string());
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| crate::output_root().join(&label));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime_err(format!("cannot create {}: {e}", out_dir.display())))?;

    let (grid_path, grid, penalties) = super::load_grid_for(&config, config_path)?;
    let scenario = make_scenario(
        &config.scenario,
        &config.plant,
        config.fb.sample_period,
        config.seed,
    )
    .map_err(config_err)?;
    let setpoints = SetpointMap::from_grid(&grid);

    let inputs = RunInputs {
        plant: &config.plant,
        grid: &grid,
        penalties: &penalties,
        fb: &config.fb,
        ff: &config.ff,
        ff_mode: config.ff_mode,
        setpoints: &setpoints,
        scenario: &scenario,
        seed: config.seed,
        egr_measurement_lag: None,
    };
    let trace = run_closed_loop(&inputs).map_err(runtime_err)?;
    let metrics = compute_metrics(&trace).map_err(runtime_err)?;

    write_atomic(&out_dir.join("trace.csv"), trace.to_csv_string().as_bytes())
        .map_err(runtime_err)?;
    write_json_atomic(&out_dir.join("metrics.json"), &metrics).map_err(runtime_err)?;

    let manifest = RunManifest {
        tool: "airpath".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "run".into(),
        config_path: config_path.display().to_string(),
        config_sha256: file_sha256(config_path).map_err(runtime_err)?,
        grid_path: grid_path.display().to_string(),
        grid_sha256: file_sha256(&grid_path).map_err(runtime_err)?,
        seeds: vec![config.seed],
        modes: vec![config.ff_mode.as_str().to_string()],
        label,
        resolved_config: serde_json::to_value(&config).map_err(runtime_err)?,
    };
    write_json_atomic(&out_dir.join("manifest.json"), &manifest).map_err(runtime_err)?;

    println!(
        "{} samples -> {}; mae_pim {:.6} bar, mae_egr {:.6}",
        trace.records.len(),
        out_dir.display(),
        metrics.mae_pim,
        metrics.mae_egr
    );
    Ok(())
}
