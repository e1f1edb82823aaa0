//! Model-grid JSON file format.
//!
//! Top-level keys: `speed_breakpoints`, `fuel_breakpoints`, `nodes`
//! (row-major, speed-major) with per-node row-major `A`, `B`, `Bf` arrays
//! plus `x_ss`, `u_ss`, `w_inj_ss`, and optionally `terminal_penalties`
//! (row-major 4x4 per node, recomputed when absent). Round trips are
//! lossless at full double precision.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lpv::{LocalModel, LpvError, ModelGrid};
use crate::mesh::ScheduleMesh;
use crate::riccati::{PenaltyGrid, RiccatiError};
use crate::{Mat2, Mat4, Vec2};

#[derive(Debug, Error)]
pub enum GridIoError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed grid file {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Lpv(#[from] LpvError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

#[derive(Serialize, Deserialize)]
struct NodeFile {
    #[serde(rename = "A")]
    a: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(rename = "Bf")]
    bf: Vec<f64>,
    x_ss: Vec<f64>,
    u_ss: Vec<f64>,
    w_inj_ss: f64,
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    speed_breakpoints: Vec<f64>,
    fuel_breakpoints: Vec<f64>,
    nodes: Vec<NodeFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    terminal_penalties: Option<Vec<Vec<f64>>>,
}

fn node_to_file(m: &LocalModel) -> NodeFile {
    NodeFile {
        a: vec![m.a[(0, 0)], m.a[(0, 1)], m.a[(1, 0)], m.a[(1, 1)]],
        b: vec![m.b[(0, 0)], m.b[(0, 1)], m.b[(1, 0)], m.b[(1, 1)]],
        bf: vec![m.b_fuel[0], m.b_fuel[1]],
        x_ss: vec![m.x_ss[0], m.x_ss[1]],
        u_ss: vec![m.u_ss[0], m.u_ss[1]],
        w_inj_ss: m.w_inj_ss,
    }
}

fn node_from_file(n: &NodeFile, path: &Path, idx: usize) -> Result<LocalModel, GridIoError> {
    let expect = |v: &Vec<f64>, len: usize, name: &str| -> Result<(), GridIoError> {
        if v.len() != len {
            return Err(GridIoError::Format {
                path: path.display().to_string(),
                message: format!("node {idx}: {name} must have {len} entries"),
            });
        }
        Ok(())
    };
    expect(&n.a, 4, "A")?;
    expect(&n.b, 4, "B")?;
    expect(&n.bf, 2, "Bf")?;
    expect(&n.x_ss, 2, "x_ss")?;
    expect(&n.u_ss, 2, "u_ss")?;
    Ok(LocalModel {
        a: Mat2::new(n.a[0], n.a[1], n.a[2], n.a[3]),
        b: Mat2::new(n.b[0], n.b[1], n.b[2], n.b[3]),
        b_fuel: Vec2::new(n.bf[0], n.bf[1]),
        x_ss: Vec2::new(n.x_ss[0], n.x_ss[1]),
        u_ss: Vec2::new(n.u_ss[0], n.u_ss[1]),
        w_inj_ss: n.w_inj_ss,
    })
}

pub fn save_grid(
    path: &Path,
    grid: &ModelGrid,
    penalties: Option<&PenaltyGrid>,
) -> Result<(), GridIoError> {
    let file = GridFile {
        speed_breakpoints: grid.mesh().speed_breakpoints().to_vec(),
        fuel_breakpoints: grid.mesh().fuel_breakpoints().to_vec(),
        nodes: grid.nodes().iter().map(node_to_file).collect(),
        terminal_penalties: penalties.map(|p| {
            p.nodes()
                .iter()
                .map(|m| {
                    (0..4)
                        .flat_map(|r| (0..4).map(move |c| m[(r, c)]))
                        .collect()
                })
                .collect()
        }),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| GridIoError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|source| GridIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_grid(path: &Path) -> Result<(ModelGrid, Option<PenaltyGrid>), GridIoError> {
    let text = std::fs::read_to_string(path).map_err(|source| GridIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: GridFile = serde_json::from_str(&text).map_err(|e| GridIoError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mesh =
        ScheduleMesh::new(file.speed_breakpoints, file.fuel_breakpoints).map_err(LpvError::from)?;
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for (idx, n) in file.nodes.iter().enumerate() {
        nodes.push(node_from_file(n, path, idx)?);
    }
    let grid = ModelGrid::new(mesh.clone(), nodes)?;
    let penalties = match file.terminal_penalties {
        None => None,
        Some(raw) => {
            let mut mats = Vec::with_capacity(raw.len());
            for (idx, flat) in raw.iter().enumerate() {
                if flat.len() != 16 {
                    return Err(GridIoError::Format {
                        path: path.display().to_string(),
                        message: format!("terminal penalty {idx} must have 16 entries"),
                    });
                }
                mats.push(Mat4::from_fn(|r, c| flat[4 * r + c]));
            }
            Some(PenaltyGrid::new(mesh, mats)?)
        }
    };
    Ok((grid, penalties))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fb_mpc::{build_penalty_grid, RegionTable};
    use crate::riccati::DareSettings;

    fn sample_grid() -> ModelGrid {
        let mesh = ScheduleMesh::new(vec![600.0, 1500.0], vec![10.0, 50.0]).unwrap();
        let nodes = (0..4)
            .map(|k| {
                let k = k as f64;
                LocalModel {
                    a: Mat2::new(
                        0.9 - 0.01 * k,
                        0.001 * k + 1.0 / 3.0 * 1e-3,
                        -0.02,
                        0.8 + 0.017 * k,
                    ),
                    b: Mat2::new(0.004, 0.010, 0.006, -0.003 - 1e-5 * k),
                    b_fuel: Vec2::new(0.002, 0.1 / 7.0 * 0.01),
                    x_ss: Vec2::new(1.4 + 0.1 * k, 0.2 - 0.01 * k),
                    u_ss: Vec2::new(40.0 + k, 60.0 - k),
                    w_inj_ss: 10.0 + 40.0 * (k / 3.0),
                }
            })
            .collect();
        ModelGrid::new(mesh, nodes).unwrap()
    }

    #[test]
    fn save_load_is_lossless() {
        let dir = std::env::temp_dir().join("airpath-gridio-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grid.json");
        let grid = sample_grid();
        let penalties = build_penalty_grid(
            &grid,
            &RegionTable::default_seven(),
            &DareSettings::default(),
        )
        .unwrap();
        save_grid(&path, &grid, Some(&penalties)).unwrap();
        let (loaded, loaded_pen) = load_grid(&path).unwrap();
        let loaded_pen = loaded_pen.expect("penalties present");
        for k in 0..4 {
            let (a, b) = (&grid.nodes()[k], &loaded.nodes()[k]);
            // bit-exact round trip of every entry
            assert_eq!(a.a, b.a);
            assert_eq!(a.b, b.b);
            assert_eq!(a.b_fuel, b.b_fuel);
            assert_eq!(a.x_ss, b.x_ss);
            assert_eq!(a.u_ss, b.u_ss);
            assert_eq!(a.w_inj_ss, b.w_inj_ss);
            assert_eq!(penalties.nodes()[k], loaded_pen.nodes()[k]);
        }
        assert_eq!(
            grid.mesh().speed_breakpoints(),
            loaded.mesh().speed_breakpoints()
        );
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn missing_penalties_load_as_none() {
        let dir = std::env::temp_dir().join("airpath-gridio-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grid_nopen.json");
        save_grid(&path, &sample_grid(), None).unwrap();
        let (_, pen) = load_grid(&path).unwrap();
        assert!(pen.is_none());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn malformed_node_is_reported() {
        let dir = std::env::temp_dir().join("airpath-gridio-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(
            &path,
            r#"{"speed_breakpoints":[1,2],"fuel_breakpoints":[1,2],
               "nodes":[{"A":[1],"B":[0,0,0,0],"Bf":[0,0],"x_ss":[0,0],"u_ss":[0,0],"w_inj_ss":0}]}"#,
        )
        .unwrap();
        let err = load_grid(&path).unwrap_err();
        assert!(err.to_string().contains("A must have 4 entries"));
        std::fs::remove_file(&path).ok();
    }
}
