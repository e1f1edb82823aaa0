//! Interpolating set-point map over the scheduling mesh.

use crate::lpv::{ModelGrid, OperatingPoint};
use crate::mesh::ScheduleMesh;
use crate::sim::SimError;
use crate::Vec2;

/// Per-node target pairs (p_im bar, chi_egr fraction) with bilinear lookup.
#[derive(Debug, Clone)]
pub struct SetpointMap {
    mesh: ScheduleMesh,
    targets: Vec<Vec2>,
}

impl SetpointMap {
    pub fn new(mesh: ScheduleMesh, targets: Vec<Vec2>) -> Result<Self, SimError> {
        if targets.len() != mesh.node_count() {
            return Err(SimError::Scenario(format!(
                "set-point map has {} nodes for a {}-node mesh",
                targets.len(),
                mesh.node_count()
            )));
        }
        Ok(Self { mesh, targets })
    }

    /// Calibration surrogate: targets are the identified equilibrium states,
    /// so the map is consistent with the steady-state feedforward table.
    pub fn from_grid(grid: &ModelGrid) -> Self {
        Self {
            mesh: grid.mesh().clone(),
            targets: grid.nodes().iter().map(|m| m.x_ss).collect(),
        }
    }

    /// Targets must sit inside the state bounds at every node.
    pub fn validate_bounds(&self, x_min: &Vec2, x_max: &Vec2) -> Result<(), SimError> {
        for (idx, t) in self.targets.iter().enumerate() {
            for s in 0..2 {
                if t[s] < x_min[s] || t[s] > x_max[s] {
                    return Err(SimError::Scenario(format!(
                        "set-point node {idx} target {:.4} outside state bounds",
                        t[s]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn target(&self, rho: &OperatingPoint) -> Vec2 {
        let w = self.mesh.locate(rho);
        Vec2::from_fn(|s, _| {
            self.mesh
                .bilerp(&w, |i, j| self.targets[self.mesh.node_index(i, j)][s])
        })
    }
}
