pub mod compare;
pub mod identify;
pub mod run;

use std::path::{Path, PathBuf};

use airpath_core::config::RunConfig;
use airpath_core::fb_mpc::build_penalty_grid;
use airpath_core::grid_io;
use airpath_core::lpv::ModelGrid;
use airpath_core::riccati::PenaltyGrid;

use crate::{config_err, runtime_err, CliError};

/// Load the grid referenced by a run configuration, recomputing terminal
/// penalties when the file does not carry them.
pub fn load_grid_for(
    config: &RunConfig,
    config_path: &Path,
) -> Result<(PathBuf, ModelGrid, PenaltyGrid), CliError> {
    let grid_path = config.grid_path(config_path);
    let (grid, penalties) = grid_io::load_grid(&grid_path).map_err(config_err)?;
    let penalties = match penalties {
        Some(p) => p,
        None => build_penalty_grid(&grid, &config.fb.region_table, &config.fb.dare)
            .map_err(runtime_err)?,
    };
    Ok((grid_path, grid, penalties))
}
