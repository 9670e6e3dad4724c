//! Sub-voxel node refinement by reprojection error minimisation.

use super::AssemblyError;
use crate::geometry::{Camera, Point2, Point3};
use nalgebra::{Matrix3, Vector3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineNodeConfig {
    pub max_iterations: usize,
    /// Converged once a step moves the point less than this (metres).
    pub step_tolerance: f64,
}

impl Default for RefineNodeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinedNode {
    pub position: Point3,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
}

/// `Σ ‖P_c(Z) − s‖₂` over the observations; infinite if `Z` is behind any
/// observing camera.
pub fn reprojection_objective(observations: &[(&Camera, Point2)], z: &Point3) -> f64 {
    observations
        .iter()
        .map(|(cam, s)| match cam.project(z) {
            Ok(px) => (px - s).norm(),
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// Minimises the sum of unsquared reprojection distances starting from
/// `initial`, by iteratively reweighted Gauss-Newton with backtracking.
/// The result never has a larger objective than the seed.
pub fn refine_node(
    observations: &[(&Camera, Point2)],
    initial: &Point3,
    config: &RefineNodeConfig,
) -> Result<RefinedNode, AssemblyError> {
    if observations.len() < 2 {
        return Err(AssemblyError::InsufficientCorrespondences(observations.len()));
    }
    let initial_objective = reprojection_objective(observations, initial);
    let mut z = *initial;
    let mut objective = initial_objective;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let mut normal = Matrix3::<f64>::zeros();
        let mut rhs = Vector3::<f64>::zeros();
        for (cam, s) in observations {
            let (Ok(px), Ok(jac)) = (cam.project(&z), cam.projection_jacobian(&z)) else {
                continue;
            };
            let residual = px - s;
            let weight = 1.0 / residual.norm().max(1e-10);
            normal += weight * jac.transpose() * jac;
            rhs -= weight * jac.transpose() * residual;
        }
        let damping = 1e-12 * normal.trace().max(1e-300);
        normal += Matrix3::identity() * damping;
        let Some(mut step) = normal.cholesky().map(|c| c.solve(&rhs)) else {
            break;
        };
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = z + step;
            let value = reprojection_objective(observations, &candidate);
            if value <= objective {
                z = candidate;
                objective = value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < config.step_tolerance {
            break;
        }
    }
    if !(objective <= initial_objective) {
        return Ok(RefinedNode {
            position: *initial,
            objective: initial_objective,
            initial_objective,
            iterations,
        });
    }
    Ok(RefinedNode {
        position: z,
        objective,
        initial_objective,
        iterations,
    })
}
