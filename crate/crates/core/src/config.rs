//! Run-configuration schema and serde helpers for matrix-valued fields.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fb_mpc::FbMpcConfig;
use crate::feedforward::{FfMode, FfMpcConfig};
use crate::plant::PlantParams;
use crate::sim::scenario::ScenarioSpec;

/// Row-major `[f64; 4]` representation of a 2x2 matrix.
pub mod mat2_rm {
    use crate::Mat2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat2, s: S) -> Result<S::Ok, S::Error> {
        [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat2, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        Ok(Mat2::new(v[0], v[1], v[2], v[3]))
    }
}

/// `[f64; 2]` representation of a 2-vector.
pub mod vec2_arr {
    use crate::Vec2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec2, s: S) -> Result<S::Ok, S::Error> {
        [v[0], v[1]].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec2, D::Error> {
        let v = <[f64; 2]>::deserialize(d)?;
        Ok(Vec2::new(v[0], v[1]))
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration in {path}: {message}")]
    Schema { path: String, message: String },
}

/// Complete description of one closed-loop run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Surrogate plant parameters.
    #[serde(default)]
    pub plant: PlantParams,
    /// Path to the identified model-grid JSON file, resolved relative to the
    /// configuration file's directory.
    pub grid: String,
    #[serde(default)]
    pub fb: FbMpcConfig,
    #[serde(default)]
    pub ff: FfMpcConfig,
    #[serde(default)]
    pub ff_mode: FfMode,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub label: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Schema {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        // replayed scenario files resolve like the grid: relative to the
        // configuration file's directory
        if let ScenarioSpec::CsvFile { path: csv } = &mut config.scenario {
            let p = Path::new(csv.as_str());
            if p.is_relative() {
                *csv = path
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join(p)
                    .display()
                    .to_string();
            }
        }
        config.validate(path)?;
        Ok(config)
    }

    fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        let schema = |message: String| ConfigError::Schema {
            path: path.display().to_string(),
            message,
        };
        self.plant
            .validate()
            .map_err(|e| schema(format!("plant: {e}")))?;
        self.fb.validate().map_err(|e| schema(format!("fb: {e}")))?;
        self.ff.validate().map_err(|e| schema(format!("ff: {e}")))?;
        self.fb
            .region_table
            .validate_partition(self.plant.speed_range, self.plant.fuel_range, 16)
            .map_err(|e| schema(format!("fb.region_table: {e}")))?;
        self.scenario
            .validate(&self.plant)
            .map_err(|e| schema(format!("scenario: {e}")))?;
        Ok(())
    }

    /// Grid path resolved against the directory the config was loaded from.
    pub fn grid_path(&self, config_path: &Path) -> std::path::PathBuf {
        let p = Path::new(&self.grid);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            config_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(p)
        }
    }
}
