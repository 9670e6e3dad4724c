//! Part proposals: candidate bones between node proposals, scored by how
//! consistently their projections fall on the same 2D person detection.

use crate::body::{is_torso_bone, SkeletonTopology};
use crate::fusion::NodeProposal;
use crate::geometry::{Camera, Point2, Point3};
use crate::scoremap::ScoreMapSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartError {
    #[error("no camera sees both endpoints of the part")]
    NoVisibility,
}

/// Physical length guard applied before assembly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthPrior {
    pub max_limb: f64,
    pub max_torso: f64,
}

impl Default for LengthPrior {
    fn default() -> Self {
        Self {
            max_limb: 1.0,
            max_torso: 1.5,
        }
    }
}

/// A candidate bone `(u, v)` joining proposal `k_u` of `u` and `k_v` of `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartProposal {
    pub bone: (usize, usize),
    pub ku: usize,
    pub kv: usize,
    pub endpoints: (Point3, Point3),
    /// Connectivity score `Φ` in `[0, 1]`; zero when no view sees both ends.
    pub score: f64,
    /// Longer than the configured length prior; never used by assembly.
    pub pruned: bool,
}

/// All part proposals of one bone, stored row-major over `(k_u, k_v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneParts {
    pub bone: (usize, usize),
    pub num_u: usize,
    pub num_v: usize,
    pub parts: Vec<PartProposal>,
}

impl BoneParts {
    /// Score of the `(ku, kv)` part; `None` if pruned.
    pub fn score(&self, ku: usize, kv: usize) -> Option<f64> {
        let p = &self.parts[ku * self.num_v + kv];
        (!p.pruned).then_some(p.score)
    }

    pub fn part(&self, ku: usize, kv: usize) -> &PartProposal {
        &self.parts[ku * self.num_v + kv]
    }

    /// Parts with zero score are kept but flagged.
    pub fn zero_score_count(&self) -> usize {
        self.parts.iter().filter(|p| p.score == 0.0).count()
    }
}

/// `Φ(P_uv) = (1/|V|) Σ_{c∈V} max_i w_iuv^c · δ_iuv^c`, where
/// `w = (h_iu(z_u) + h_iv(z_v)) / 2` and `δ = 1` iff both per-detection
/// scores exceed `threshold`. `V` holds the cameras in which both endpoints
/// are visible.
pub fn part_score(
    maps: &ScoreMapSet,
    cameras: &[Camera],
    joint_u: usize,
    pu: &Point3,
    joint_v: usize,
    pv: &Point3,
    threshold: f64,
) -> Result<f64, PartError> {
    let mut ordered: Vec<&Camera> = cameras.iter().collect();
    ordered.sort_by_key(|c| c.id());
    let mut sum = 0.0;
    let mut count = 0usize;
    for cam in ordered {
        let (Some(zu), Some(zv)) = (cam.project_visible(pu), cam.project_visible(pv)) else {
            continue;
        };
        count += 1;
        sum += view_connectivity(maps, cam.id(), joint_u, &zu, joint_v, &zv, threshold);
    }
    if count == 0 {
        return Err(PartError::NoVisibility);
    }
    Ok(sum / count as f64)
}

#[inline]
fn view_connectivity(
    maps: &ScoreMapSet,
    camera: u32,
    joint_u: usize,
    zu: &Point2,
    joint_v: usize,
    zv: &Point2,
    threshold: f64,
) -> f64 {
    let mut best: f64 = 0.0;
    for det in maps.view(camera) {
        let hu = det.score(joint_u, zu);
        if hu <= threshold {
            continue;
        }
        let hv = det.score(joint_v, zv);
        if hv <= threshold {
            continue;
        }
        best = best.max(0.5 * (hu + hv));
    }
    best
}

/// Scores every `k_u × k_v` pairing for every bone of the topology.
///
/// `proposals` is indexed by joint. Pairs longer than the length prior are
/// returned with `pruned = true` and are not scored.
pub fn enumerate_parts(
    proposals: &[Vec<NodeProposal>],
    topology: &SkeletonTopology,
    maps: &ScoreMapSet,
    cameras: &[Camera],
    threshold: f64,
    length_prior: Option<LengthPrior>,
) -> Vec<BoneParts> {
    let mut ordered: Vec<&Camera> = cameras.iter().collect();
    ordered.sort_by_key(|c| c.id());
    // Projections of every proposal in every camera, computed once.
    let projections: Vec<Vec<Vec<Option<Point2>>>> = proposals
        .iter()
        .map(|props| {
            props
                .iter()
                .map(|p| ordered.iter().map(|c| c.project_visible(&p.position)).collect())
                .collect()
        })
        .collect();

    topology
        .bones()
        .par_iter()
        .map(|&(u, v)| {
            let (pu, pv) = (&proposals[u], &proposals[v]);
            let max_len = length_prior.map(|lp| if is_torso_bone((u, v)) { lp.max_torso } else { lp.max_limb });
            let mut parts = Vec::with_capacity(pu.len() * pv.len());
            for (ku, nu) in pu.iter().enumerate() {
                for (kv, nv) in pv.iter().enumerate() {
                    let pruned = max_len.is_some_and(|m| (nu.position - nv.position).norm() > m);
                    let score = if pruned {
                        0.0
                    } else {
                        let mut sum = 0.0;
                        let mut count = 0usize;
                        for (ci, cam) in ordered.iter().enumerate() {
                            let (Some(zu), Some(zv)) = (&projections[u][ku][ci], &projections[v][kv][ci]) else {
                                continue;
                            };
                            count += 1;
                            sum += view_connectivity(maps, cam.id(), u, zu, v, zv, threshold);
                        }
                        if count == 0 {
                            0.0
                        } else {
                            sum / count as f64
                        }
                    };
                    parts.push(PartProposal {
                        bone: (u, v),
                        ku,
                        kv,
                        endpoints: (nu.position, nv.position),
                        score,
                        pruned,
                    });
                }
            }
            BoneParts {
                bone: (u, v),
                num_u: pu.len(),
                num_v: pv.len(),
                parts,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{default_topology, JointId};
    use crate::geometry::Distortion;
    use crate::scoremap::{Detection, DetectionBlob, JointMap};
    use nalgebra::{Matrix3, Vector3};

    const TAU: f64 = 0.05;

    fn camera(id: u32) -> Camera {
        let k = Matrix3::new(100.0, 0.0, 320.0, 0.0, 100.0, 240.0, 0.0, 0.0, 1.0);
        Camera::new(id, k, Matrix3::identity(), Vector3::zeros(), Distortion::default(), 640, 480).unwrap()
    }

    fn blob(p: Point2, a: f64) -> Option<JointMap> {
        Some(JointMap::Blob(DetectionBlob::new(p, a, 3.0).unwrap()))
    }

    // endpoints projecting to (320, 240) and (330, 240)
    fn endpoints() -> (Point3, Point3) {
        (Point3::new(0.0, 0.0, 1.0), Point3::new(0.1, 0.0, 1.0))
    }

    const U: usize = 5; // ElbowL
    const V: usize = 7; // WristL

    #[test]
    fn single_detection_averages_endpoint_scores() {
        let (pu, pv) = endpoints();
        let mut d = Detection::new(0);
        d.joints[U] = blob(Point2::new(320.0, 240.0), 0.8);
        d.joints[V] = blob(Point2::new(330.0, 240.0), 0.6);
        let mut maps = ScoreMapSet::new();
        maps.insert_view(0, vec![d]);
        let phi = part_score(&maps, &[camera(0)], U, &pu, V, &pv, TAU).unwrap();
        assert!((phi - 0.7).abs() < 1e-15);
    }

    #[test]
    fn delta_requires_the_same_detection() {
        let (pu, pv) = endpoints();
        let mut d1 = Detection::new(0);
        d1.joints[U] = blob(Point2::new(320.0, 240.0), 0.8);
        let mut d2 = Detection::new(1);
        d2.joints[V] = blob(Point2::new(330.0, 240.0), 0.9);
        let mut maps = ScoreMapSet::new();
        maps.insert_view(0, vec![d1, d2]);
        assert_eq!(part_score(&maps, &[camera(0)], U, &pu, V, &pv, TAU).unwrap(), 0.0);
    }

    // Direct enumeration of every (view, detection) pair.
    fn brute_force_phi(maps: &ScoreMapSet, cams: &[Camera], pu: &Point3, pv: &Point3) -> f64 {
        let mut total = 0.0;
        let mut views = 0.0;
        for cam in cams {
            if !(cam.is_visible(pu) && cam.is_visible(pv)) {
                continue;
            }
            views += 1.0;
            let zu = cam.project(pu).unwrap();
            let zv = cam.project(pv).unwrap();
            let mut best = 0.0f64;
            for det in maps.view(cam.id()) {
                let hu = det.score(U, &zu);
                let hv = det.score(V, &zv);
                let delta = if hu > TAU && hv > TAU { 1.0 } else { 0.0 };
                best = best.max(0.5 * (hu + hv) * delta);
            }
            total += best;
        }
        total / views
    }

    #[test]
    fn two_views_one_failing_delta() {
        let (pu, pv) = endpoints();
        let mut good = Detection::new(0);
        good.joints[U] = blob(Point2::new(320.0, 240.0), 0.8);
        good.joints[V] = blob(Point2::new(330.0, 240.0), 0.6);
        let mut bad = Detection::new(0);
        bad.joints[U] = blob(Point2::new(320.0, 240.0), 0.9);
        let mut maps = ScoreMapSet::new();
        maps.insert_view(0, vec![good]);
        maps.insert_view(1, vec![bad]);
        let cams = [camera(0), camera(1)];
        let phi = part_score(&maps, &cams, U, &pu, V, &pv, TAU).unwrap();
        assert!((phi - 0.35).abs() < 1e-15);
        assert_eq!(phi, brute_force_phi(&maps, &cams, &pu, &pv));
    }

    #[test]
    fn no_visibility_is_an_error() {
        let maps = ScoreMapSet::new();
        let behind = Point3::new(0.0, 0.0, -1.0);
        assert_eq!(
            part_score(&maps, &[camera(0)], U, &behind, V, &Point3::new(0.0, 0.0, 1.0), TAU),
            Err(PartError::NoVisibility)
        );
    }

    #[test]
    fn score_is_symmetric() {
        let (pu, pv) = endpoints();
        let mut d = Detection::new(0);
        d.joints[U] = blob(Point2::new(321.0, 240.0), 0.8);
        d.joints[V] = blob(Point2::new(331.0, 241.0), 0.6);
        let mut maps = ScoreMapSet::new();
        maps.insert_view(0, vec![d]);
        let a = part_score(&maps, &[camera(0)], U, &pu, V, &pv, TAU).unwrap();
        let b = part_score(&maps, &[camera(0)], V, &pv, U, &pu, TAU).unwrap();
        assert_eq!(a, b);
    }

    fn proposal(joint: JointId, index: usize, p: Point3) -> NodeProposal {
        NodeProposal {
            joint,
            position: p,
            score: 0.5,
            index,
            voxel: [0, 0, 0],
        }
    }

    #[test]
    fn enumeration_is_a_cross_product() {
        let topo = default_topology();
        let mut props = vec![Vec::new(); 15];
        props[JointId::ElbowL.index()] = vec![
            proposal(JointId::ElbowL, 0, Point3::new(0.0, 0.0, 1.0)),
            proposal(JointId::ElbowL, 1, Point3::new(0.1, 0.0, 1.0)),
        ];
        props[JointId::WristL.index()] = (0..3)
            .map(|k| proposal(JointId::WristL, k, Point3::new(0.0, 0.05 * k as f64, 1.0)))
            .collect();
        let parts = enumerate_parts(&props, &topo, &ScoreMapSet::new(), &[camera(0)], TAU, None);
        let bone = topo
            .bones()
            .iter()
            .position(|&b| b == (JointId::ElbowL.index(), JointId::WristL.index()))
            .unwrap();
        assert_eq!(parts[bone].parts.len(), 6);
        assert_eq!(parts[bone].zero_score_count(), 6);
        // zero proposals for the shoulder → no parts for shoulder→elbow
        let upper = topo
            .bones()
            .iter()
            .position(|&b| b == (JointId::ShoulderL.index(), JointId::ElbowL.index()))
            .unwrap();
        assert!(parts[upper].parts.is_empty());
    }

    #[test]
    fn length_prior_prunes_long_parts() {
        let topo = default_topology();
        let mut props = vec![Vec::new(); 15];
        props[JointId::ElbowL.index()] = vec![proposal(JointId::ElbowL, 0, Point3::new(0.0, 0.0, 1.0))];
        props[JointId::WristL.index()] = vec![
            proposal(JointId::WristL, 0, Point3::new(0.0, 0.2, 1.0)),
            proposal(JointId::WristL, 1, Point3::new(0.0, 1.5, 1.0)),
        ];
        let parts = enumerate_parts(&props, &topo, &ScoreMapSet::new(), &[camera(0)], TAU, Some(LengthPrior::default()));
        let bone = parts.iter().find(|b| b.bone == (5, 7)).unwrap();
        assert_eq!(bone.score(0, 0), Some(0.0));
        assert_eq!(bone.score(0, 1), None);
        assert!(bone.part(0, 1).pruned);
    }

    #[test]
    fn enumeration_matches_part_score() {
        let topo = default_topology();
        let (pu, pv) = endpoints();
        let mut d = Detection::new(0);
        d.joints[U] = blob(Point2::new(320.0, 241.0), 0.8);
        d.joints[V] = blob(Point2::new(331.0, 240.0), 0.6);
        let mut maps = ScoreMapSet::new();
        maps.insert_view(0, vec![d]);
        let mut props = vec![Vec::new(); 15];
        props[U] = vec![proposal(JointId::ElbowL, 0, pu)];
        props[V] = vec![proposal(JointId::WristL, 0, pv)];
        let parts = enumerate_parts(&props, &topo, &maps, &[camera(0)], TAU, None);
        let bone = parts.iter().find(|b| b.bone == (U, V)).unwrap();
        assert_eq!(bone.score(0, 0).unwrap(), part_score(&maps, &[camera(0)], U, &pu, V, &pv, TAU).unwrap());
    }
}
