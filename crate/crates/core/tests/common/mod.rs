//! Shared setup for the integration and acceptance suites.

use airpath_core::fb_mpc::{build_penalty_grid, FbMpcConfig};
use airpath_core::lpv::{self, ModelGrid};
use airpath_core::plant::PlantParams;
use airpath_core::riccati::PenaltyGrid;
use airpath_core::sim::SetpointMap;

pub struct Setup {
    pub plant: PlantParams,
    pub grid: ModelGrid,
    pub penalties: PenaltyGrid,
    pub setpoints: SetpointMap,
    pub fb: FbMpcConfig,
}

/// Identify the full default 9x11 grid against the default surrogate and
/// precompute terminal penalties. Takes a couple of seconds; tests share one
/// instance where it matters.
pub fn identify_default(plant: PlantParams) -> Setup {
    let (speed_bps, fuel_bps) = lpv::default_breakpoints();
    let grid = lpv::build_grid(
        &plant,
        &speed_bps,
        &fuel_bps,
        &lpv::PerturbationSpec::default(),
    )
    .expect("default grid identifies");
    let fb = FbMpcConfig::default();
    let penalties = build_penalty_grid(&grid, &fb.region_table, &fb.dare).expect("penalties solve");
    let setpoints = SetpointMap::from_grid(&grid);
    Setup {
        plant,
        grid,
        penalties,
        setpoints,
        fb,
    }
}

/// Smaller 3x3 grid for cheap tests.
#[allow(dead_code)]
pub fn identify_coarse(plant: PlantParams) -> Setup {
    let speed_bps = vec![600.0, 1500.0, 2400.0];
    let fuel_bps = vec![5.0, 55.0, 105.0];
    let grid = lpv::build_grid(
        &plant,
        &speed_bps,
        &fuel_bps,
        &lpv::PerturbationSpec::default(),
    )
    .expect("coarse grid identifies");
    let fb = FbMpcConfig::default();
    let penalties = build_penalty_grid(&grid, &fb.region_table, &fb.dare).expect("penalties solve");
    let setpoints = SetpointMap::from_grid(&grid);
    Setup {
        plant,
        grid,
        penalties,
        setpoints,
        fb,
    }
}
