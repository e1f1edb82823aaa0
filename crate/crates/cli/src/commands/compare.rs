use std::fmt::Write as _;
use std::path::Path;

use airpath_core::config::RunConfig;
use airpath_core::feedforward::FfMode;
use airpath_core::sim::{
    compute_metrics, make_scenario, run_closed_loop, Metrics, RunInputs, SetpointMap,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::{file_sha256, write_atomic, write_json_atomic, RunManifest};
use crate::{config_err, runtime_err, CliError};

fn parse_modes(modes: &str) -> Result<Vec<FfMode>, CliError> {
    modes
        .split(',')
        .map(|tok| match tok.trim() {
            "none" => Ok(FfMode::None),
            "lut" => Ok(FfMode::LookupTable),
            "mpc" => Ok(FfMode::Mpc),
            other => Err(config_err(format!(
                "unknown feedforward mode '{other}' (expected none, lut, mpc)"
            ))),
        })
        .collect()
}

fn parse_seeds(seeds: &str) -> Result<Vec<u64>, CliError> {
    let bad = || config_err(format!("seeds must be a..b or a comma list, got '{seeds}'"));
    if let Some((a, b)) = seeds.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| bad()))
        .collect()
}

fn mode_name(mode: FfMode) -> &'static str {
    match mode {
        FfMode::None => "fb-only",
        FfMode::LookupTable => "lut-ff+fb",
        FfMode::Mpc => "ff-mpc+fb",
    }
}

#[derive(Debug, Serialize)]
struct CellResult {
    mode: String,
    seed: u64,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<Metrics>,
}

#[derive(Debug, Serialize)]
struct AggregateRow {
    mode: String,
    cells: usize,
    mean_mae_pim: f64,
    mean_mae_egr: f64,
    /// Percent change vs the fb-only baseline (negative is better).
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_pim_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_egr_pct: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Comparison {
    cells: Vec<CellResult>,
    aggregate: Vec<AggregateRow>,
}

pub fn run(
    config_path: &Path,
    modes: &str,
    seeds: &str,
    out: Option<&Path>,
    jobs: Option<usize>,
) -> Result<(), CliError> {
    let modes = parse_modes(modes)?;
    let seeds = parse_seeds(seeds)?;
    let config = RunConfig::load(config_path).map_err(config_err)?;
    let label = config
        .label
        .clone()
        .unwrap_or_else(|| "compare".to_string());
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| crate::output_root().join(&label));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime_err(format!("cannot create {}: {e}", out_dir.display())))?;

    let (grid_path, grid, penalties) = super::load_grid_for(&config, config_path)?;
    let setpoints = SetpointMap::from_grid(&grid);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| runtime_err(format!("cannot build thread pool: {e}")))?;

    let cell_ids: Vec<(FfMode, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();

    let cells: Vec<CellResult> = pool.install(|| {
        cell_ids
            .par_iter()
            .map(|&(mode, seed)| {
                run_cell(&config, &grid, &penalties, &setpoints, mode, seed, &out_dir)
            })
            .collect()
    });

    if cells.iter().all(|c| !c.ok) {
        return Err(runtime_err("all comparison cells failed"));
    }

    let aggregate = aggregate_rows(&modes, &cells);
    let comparison = Comparison { cells, aggregate };
    write_json_atomic(&out_dir.join("comparison.json"), &comparison).map_err(runtime_err)?;
    let table = format_table(&comparison.aggregate);
    write_atomic(&out_dir.join("comparison.txt"), table.as_bytes()).map_err(runtime_err)?;
    print!("{table}");

    let manifest = RunManifest {
        tool: "airpath".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "compare".into(),
        config_path: config_path.display().to_string(),
        config_sha256: file_sha256(config_path).map_err(runtime_err)?,
        grid_path: grid_path.display().to_string(),
        grid_sha256: file_sha256(&grid_path).map_err(runtime_err)?,
        seeds,
        modes: modes.iter().map(|m| m.as_str().to_string()).collect(),
        label,
        resolved_config: serde_json::to_value(&config).map_err(runtime_err)?,
    };
    write_json_atomic(&out_dir.join("manifest.json"), &manifest).map_err(runtime_err)?;
    Ok(())
}

fn run_cell(
    config: &RunConfig,
    grid: &airpath_core::lpv::ModelGrid,
    penalties: &airpath_core::riccati::PenaltyGrid,
    setpoints: &SetpointMap,
    mode: FfMode,
    seed: u64,
    out_dir: &Path,
) -> CellResult {
    let cell_dir = out_dir.join(format!("{}-seed{}", mode_name(mode), seed));
    let outcome = (|| -> Result<Metrics, String> {
        std::fs::create_dir_all(&cell_dir).map_err(|e| e.to_string())?;
        let scenario = make_scenario(
            &config.scenario,
            &config.plant,
            config.fb.sample_period,
            seed,
        )
        .map_err(|e| e.to_string())?;
        let inputs = RunInputs {
            plant: &config.plant,
            grid,
            penalties,
            fb: &config.fb,
            ff: &config.ff,
            ff_mode: mode,
            setpoints,
            scenario: &scenario,
            seed,
            egr_measurement_lag: None,
        };
        let trace = run_closed_loop(&inputs).map_err(|e| e.to_string())?;
        let metrics = compute_metrics(&trace).map_err(|e| e.to_string())?;
        write_atomic(
            &cell_dir.join("trace.csv"),
            trace.to_csv_string().as_bytes(),
        )
        .map_err(|e| e.to_string())?;
        write_json_atomic(&cell_dir.join("metrics.json"), &metrics).map_err(|e| e.to_string())?;
        Ok(metrics)
    })();
    match outcome {
        Ok(metrics) => CellResult {
            mode: mode_name(mode).into(),
            seed,
            ok: true,
            error: None,
            metrics: Some(metrics),
        },
        Err(error) => CellResult {
            mode: mode_name(mode).into(),
            seed,
            ok: false,
            error: Some(error),
            metrics: None,
        },
    }
}

fn aggregate_rows(modes: &[FfMode], cells: &[CellResult]) -> Vec<AggregateRow> {
    let mean_for = |mode: FfMode| -> Option<(usize, f64, f64)> {
        let ok: Vec<&CellResult> = cells
            .iter()
            .filter(|c| c.ok && c.mode == mode_name(mode))
            .collect();
        if ok.is_empty() {
            return None;
        }
        let n = ok.len() as f64;
        let pim = ok
            .iter()
            .map(|c| c.metrics.as_ref().unwrap().mae_pim)
            .sum::<f64>()
            / n;
        let egr = ok
            .iter()
            .map(|c| c.metrics.as_ref().unwrap().mae_egr)
            .sum::<f64>()
            / n;
        Some((ok.len(), pim, egr))
    };
    let baseline = mean_for(FfMode::None);
    modes
        .iter()
        .filter_map(|&mode| {
            let (cells, pim, egr) = mean_for(mode)?;
            let (dp, de) = match (&baseline, mode) {
                (Some((_, bp, be)), m) if m != FfMode::None => {
                    (Some(100.0 * (pim - bp) / bp), Some(100.0 * (egr - be) / be))
                }
                _ => (None, None),
            };
            Some(AggregateRow {
                mode: mode_name(mode).into(),
                cells,
                mean_mae_pim: pim,
                mean_mae_egr: egr,
                delta_pim_pct: dp,
                delta_egr_pct: de,
            })
        })
        .collect()
}

/// Aligned text table with baseline-relative percentage deltas.
fn format_table(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<22} {:<22} {:>5}",
        "controller", "mae_pim [bar]", "mae_egr [-]", "cells"
    );
    for row in rows {
        let fmt_delta = |d: Option<f64>| match d {
            Some(d) if d <= 0.0 => format!(" (\u{2193} {:.1}%)", -d),
            Some(d) => format!(" (\u{2191} {:.1}%)", d),
            None => String::new(),
        };
        let pim = format!("{:.6}{}", row.mean_mae_pim, fmt_delta(row.delta_pim_pct));
        let egr = format!("{:.6}{}", row.mean_mae_egr, fmt_delta(row.delta_egr_pct));
        let _ = writeln!(
            out,
            "{:<12} {:<22} {:<22} {:>5}",
            row.mode, pim, egr, row.cells
        );
    }
    out
}
