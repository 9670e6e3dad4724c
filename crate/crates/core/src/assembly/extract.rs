//! Greedy multi-person extraction: repeated tree DP with 2D claiming.

use super::dp::dp_best_skeleton;
use super::refine::{refine_node, RefineNodeConfig};
use super::{Correspondence, Skeleton, SkeletonJoint};
use crate::body::{JointId, SkeletonTopology};
use crate::fusion::{NodeProposal, DEFAULT_NODE_THRESHOLD};
use crate::geometry::{Camera, Point2};
use crate::parts::BoneParts;
use crate::scoremap::ScoreMapSet;
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    /// Maximum reprojection distance (pixels) for a 2D correspondence.
    pub correspondence_radius: f64,
    /// Skeletons scoring below this end the loop.
    pub min_skeleton_score: f64,
    /// Minimum number of head correspondences for a skeleton to be kept.
    pub min_head_correspondences: usize,
    /// Consecutive head-filter rejections that end the loop.
    pub max_head_failures: usize,
    pub head_joint: usize,
    /// Run reprojection refinement on nodes with at least two correspondences.
    pub refine: bool,
    pub refine_config: RefineNodeConfig,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            correspondence_radius: 10.0,
            min_skeleton_score: 14.0 * DEFAULT_NODE_THRESHOLD,
            min_head_correspondences: 2,
            max_head_failures: 2,
            head_joint: JointId::HEAD.index(),
            refine: true,
            refine_config: RefineNodeConfig::default(),
        }
    }
}

/// Extracts every skeleton of one frame, best first.
///
/// `parts[b]` must describe `topology.bones()[b]` over `proposals`. Each
/// 2D detection joint is claimed by at most one kept skeleton; claims of a
/// skeleton rejected by the head filter are released.
pub fn extract_skeletons(
    parts: &[BoneParts],
    proposals: &[Vec<NodeProposal>],
    maps: &ScoreMapSet,
    cameras: &[Camera],
    topology: &SkeletonTopology,
    config: &ExtractConfig,
) -> Vec<Skeleton> {
    let mut ordered: Vec<&Camera> = cameras.iter().collect();
    ordered.sort_by_key(|c| c.id());

    let mut available: Vec<Vec<bool>> = proposals.iter().map(|p| vec![true; p.len()]).collect();
    // (camera, detection, joint)
    let mut claimed: BTreeSet<(u32, usize, usize)> = BTreeSet::new();
    let mut skeletons = Vec::new();
    let mut head_failures = 0;

    while let Some(assignment) = dp_best_skeleton(topology, parts, &available) {
        if assignment.score < config.min_skeleton_score {
            break;
        }
        for (joint, node) in assignment.nodes.iter().enumerate() {
            if let Some(k) = node {
                available[joint][*k] = false;
            }
        }

        let mut joints: Vec<Option<SkeletonJoint>> = vec![None; topology.num_joints()];
        let mut new_claims = Vec::new();
        for (joint, node) in assignment.nodes.iter().enumerate() {
            let Some(k) = *node else { continue };
            let proposal = &proposals[joint][k];
            let mut correspondences = Vec::new();
            for cam in &ordered {
                let Some(px) = cam.project_visible(&proposal.position) else {
                    continue;
                };
                let mut best: Option<(f64, usize)> = None;
                for (d, det) in maps.view(cam.id()).iter().enumerate() {
                    if claimed.contains(&(cam.id(), d, joint)) {
                        continue;
                    }
                    let Some(map) = det.joint(joint) else { continue };
                    let dist = (map.peak() - px).norm();
                    if dist < config.correspondence_radius && best.is_none_or(|(b, _)| dist < b) {
                        best = Some((dist, d));
                    }
                }
                if let Some((_, d)) = best {
                    claimed.insert((cam.id(), d, joint));
                    new_claims.push((cam.id(), d, joint));
                    correspondences.push(Correspondence {
                        camera: cam.id(),
                        detection: d,
                    });
                }
            }
            joints[joint] = Some(SkeletonJoint {
                proposal: k,
                position: proposal.position,
                voxel_position: proposal.position,
                score: proposal.score,
                refined: false,
                correspondences,
            });
        }

        let head_support = joints
            .get(config.head_joint)
            .and_then(|j| j.as_ref())
            .map_or(0, |j| j.correspondences.len());
        if head_support < config.min_head_correspondences {
            for c in new_claims {
                claimed.remove(&c);
            }
            head_failures += 1;
            if head_failures >= config.max_head_failures {
                break;
            }
            continue;
        }
        head_failures = 0;

        if config.refine {
            for (joint, slot) in joints.iter_mut().enumerate() {
                let Some(node) = slot else { continue };
                refine_joint(node, joint, maps, &ordered, &config.refine_config);
            }
        }
        skeletons.push(Skeleton {
            joints,
            score: assignment.score,
            person: None,
        });
    }
    skeletons.sort_by(|a, b| b.score.total_cmp(&a.score));
    skeletons
}

fn refine_joint(
    node: &mut SkeletonJoint,
    joint: usize,
    maps: &ScoreMapSet,
    cameras: &[&Camera],
    config: &RefineNodeConfig,
) {
    let observations: Vec<(&Camera, Point2)> = node
        .correspondences
        .iter()
        .filter_map(|c| {
            let cam = cameras.iter().find(|cam| cam.id() == c.camera)?;
            let map = maps.view(c.camera).get(c.detection)?.joint(joint)?;
            Some((*cam, map.peak()))
        })
        .collect();
    if let Ok(result) = refine_node(&observations, &node.voxel_position, config) {
        node.position = result.position;
        node.refined = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{default_topology, NUM_JOINTS};
    use crate::fusion::{extract_all_proposals, fuse, GridSpec};
    use crate::geometry::{Distortion, Point3};
    use crate::parts::{enumerate_parts, LengthPrior};
    use crate::scoremap::{Detection, DetectionBlob, JointMap};
    use nalgebra::Vector3;

    fn cameras(n: usize) -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                let eye = Point3::new(3.0 * a.cos(), 3.0 * a.sin(), 1.5 + 0.5 * (i % 2) as f64);
                Camera::look_at(i as u32, &eye, &Point3::new(0.0, 0.0, 1.0), &Vector3::z(), 400.0, 640, 480, Distortion::default()).unwrap()
            })
            .collect()
    }

    // a rough standing pose in canonical joint order
    fn pose(offset: Vector3<f64>) -> Vec<Point3> {
        let base = [
            (0.0, 0.0, 1.5),
            (0.0, 0.0, 1.75),
            (0.0, 0.0, 1.0),
            (0.18, 0.0, 1.5),
            (-0.18, 0.0, 1.5),
            (0.2, 0.0, 1.22),
            (-0.2, 0.0, 1.22),
            (0.22, 0.0, 0.96),
            (-0.22, 0.0, 0.96),
            (0.1, 0.0, 1.0),
            (-0.1, 0.0, 1.0),
            (0.1, 0.0, 0.58),
            (-0.1, 0.0, 0.58),
            (0.1, 0.0, 0.18),
            (-0.1, 0.0, 0.18),
        ];
        base.iter().map(|&(x, y, z)| Point3::new(x, y, z) + offset).collect()
    }

    fn render(people: &[Vec<Point3>], cams: &[Camera]) -> ScoreMapSet {
        let mut maps = ScoreMapSet::new();
        for cam in cams {
            let mut dets = Vec::new();
            for (i, person) in people.iter().enumerate() {
                let mut det = Detection::new(i as u32);
                for j in 0..NUM_JOINTS {
                    if let Some(px) = cam.project_visible(&person[j]) {
                        det.joints[j] = Some(JointMap::Blob(DetectionBlob::new(px, 1.0, 3.0).unwrap()));
                    }
                }
                dets.push(det);
            }
            maps.insert_view(cam.id(), dets);
        }
        maps
    }

    fn run(people: &[Vec<Point3>], cams: &[Camera], config: &ExtractConfig) -> (Vec<Skeleton>, ScoreMapSet) {
        let maps = render(people, cams);
        let grid = GridSpec::from_bounds([-1.0, -1.0, 0.0], [1.0, 1.0, 2.0], 0.04).unwrap();
        let volume = fuse(&maps, cams, &grid).unwrap();
        let proposals = extract_all_proposals(&volume, 0.05, 2.0);
        let topo = default_topology();
        let parts = enumerate_parts(&proposals, &topo, &maps, cams, 0.05, Some(LengthPrior::default()));
        (extract_skeletons(&parts, &proposals, &maps, cams, &topo, config), maps)
    }

    #[test]
    fn two_people_give_two_disjoint_skeletons() {
        let cams = cameras(12);
        let people = vec![pose(Vector3::new(-0.5, 0.1, 0.0)), pose(Vector3::new(0.5, -0.1, 0.0))];
        let (skeletons, _) = run(&people, &cams, &ExtractConfig::default());
        assert_eq!(skeletons.len(), 2);
        for w in skeletons.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        let mut seen = BTreeSet::new();
        for (s, sk) in skeletons.iter().enumerate() {
            let head = sk.head().unwrap();
            let truth = people.iter().map(|p| (p[1] - head).norm()).fold(f64::INFINITY, f64::min);
            assert!(truth < 0.005, "skeleton {s}: {truth}");
            for (j, joint) in sk.joints.iter().enumerate() {
                for c in &joint.as_ref().unwrap().correspondences {
                    assert!(seen.insert((c.camera, c.detection, j)));
                }
            }
        }
    }

    #[test]
    fn single_view_person_is_filtered_out() {
        let cams = cameras(1);
        let people = vec![pose(Vector3::zeros())];
        let (skeletons, _) = run(&people, &cams, &ExtractConfig::default());
        assert!(skeletons.is_empty());
    }

    #[test]
    fn refinement_can_be_disabled() {
        let cams = cameras(6);
        let people = vec![pose(Vector3::new(0.013, -0.007, 0.011))];
        let config = ExtractConfig {
            refine: false,
            ..ExtractConfig::default()
        };
        let (skeletons, _) = run(&people, &cams, &config);
        assert_eq!(skeletons.len(), 1);
        for joint in skeletons[0].joints.iter().flatten() {
            assert!(!joint.refined);
            assert_eq!(joint.position, joint.voxel_position);
        }
    }
}
