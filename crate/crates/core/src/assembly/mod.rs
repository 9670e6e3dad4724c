//! Per-frame skeleton assembly and temporal association.

mod dp;
mod extract;
mod refine;
mod temporal;

pub use dp::{assignment_score, dp_best_skeleton, Assignment};
pub use extract::{extract_skeletons, ExtractConfig};
pub use refine::{reprojection_objective, refine_node, RefineNodeConfig, RefinedNode};
pub use temporal::{associate_time, SkeletonTrajectory, TemporalConfig};

use crate::body::{JointId, NUM_JOINTS};
use crate::geometry::Point3;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssemblyError {
    #[error("node refinement needs at least two correspondences, got {0}")]
    InsufficientCorrespondences(usize),
}

/// A 2D detection joint claimed by a 3D node: camera id and the detection's
/// position in that view's list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Correspondence {
    pub camera: u32,
    pub detection: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonJoint {
    /// Node proposal index this joint was assembled from.
    pub proposal: usize,
    /// Refined location when `refined`, otherwise the voxel centre.
    pub position: Point3,
    pub voxel_position: Point3,
    /// Fused 3D node score.
    pub score: f64,
    pub refined: bool,
    pub correspondences: Vec<Correspondence>,
}

/// One reconstructed person at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<Option<SkeletonJoint>>,
    /// Θ: the sum of the part scores of the assembled bones.
    pub score: f64,
    pub person: Option<u32>,
}

impl Skeleton {
    pub fn empty() -> Self {
        Self {
            joints: vec![None; NUM_JOINTS],
            score: 0.0,
            person: None,
        }
    }

    pub fn joint(&self, joint: JointId) -> Option<&SkeletonJoint> {
        self.joints.get(joint.index()).and_then(|j| j.as_ref())
    }

    pub fn position(&self, joint: JointId) -> Option<Point3> {
        self.joint(joint).map(|j| j.position)
    }

    pub fn head(&self) -> Option<Point3> {
        self.position(JointId::HEAD)
    }

    pub fn positions(&self) -> Vec<Option<Point3>> {
        self.joints.iter().map(|j| j.as_ref().map(|j| j.position)).collect()
    }

    /// A skeleton with fixed positions (used for ground truth and file input).
    pub fn from_positions(positions: &[Option<Point3>], person: Option<u32>) -> Self {
        let joints = positions
            .iter()
            .map(|p| {
                p.map(|position| SkeletonJoint {
                    proposal: 0,
                    position,
                    voxel_position: position,
                    score: 0.0,
                    refined: false,
                    correspondences: Vec::new(),
                })
            })
            .collect();
        Self {
            joints,
            score: 0.0,
            person,
        }
    }
}
