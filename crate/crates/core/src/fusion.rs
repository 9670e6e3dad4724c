//! Multi-view voting of 2D joint score maps into per-joint 3D score volumes,
//! and node proposal extraction by non-maxima suppression.

use crate::body::{JointId, NUM_JOINTS};
use crate::geometry::{Camera, Point2, Point3};
use crate::scoremap::{Detection, JointMap, ScoreMapSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_VOXEL_SIZE: f64 = 0.04;
pub const DEFAULT_NODE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_NMS_RADIUS_VOXELS: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("score fusion needs at least one camera")]
    NoCameras,
    #[error("degenerate voxel grid: {0}")]
    DegenerateGrid(String),
}

/// Axis-aligned voxel grid; `origin` is the centre of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    /// Smallest grid with voxel centres covering `[min, max]`.
    pub fn from_bounds(min: [f64; 3], max: [f64; 3], spacing: f64) -> Result<Self, FusionError> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(FusionError::DegenerateGrid(format!("spacing {spacing}")));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let extent = max[a] - min[a];
            if !(extent >= 0.0 && extent.is_finite()) {
                return Err(FusionError::DegenerateGrid(format!("axis {a} extent {extent}")));
            }
            dims[a] = (extent / spacing).floor() as usize + 1;
        }
        Ok(Self {
            origin: min,
            spacing,
            dims,
        })
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(FusionError::DegenerateGrid(format!("spacing {}", self.spacing)));
        }
        if self.dims.contains(&0) {
            return Err(FusionError::DegenerateGrid("zero-sized axis".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index; lexicographic in `(ix, iy, iz)`.
    #[inline]
    pub fn linear(&self, v: [usize; 3]) -> usize {
        (v[0] * self.dims[1] + v[1]) * self.dims[2] + v[2]
    }

    #[inline]
    pub fn unravel(&self, index: usize) -> [usize; 3] {
        let iz = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], iz]
    }

    #[inline]
    pub fn center(&self, v: [usize; 3]) -> Point3 {
        Point3::new(
            self.origin[0] + self.spacing * v[0] as f64,
            self.origin[1] + self.spacing * v[1] as f64,
            self.origin[2] + self.spacing * v[2] as f64,
        )
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| {
            let lo = self.origin[a] - 0.5 * self.spacing;
            let hi = self.origin[a] + self.spacing * (self.dims[a] as f64 - 0.5);
            p[a] >= lo && p[a] <= hi
        })
    }
}

/// Fused per-joint scores over the voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    grid: GridSpec,
    scores: Vec<Vec<f64>>,
    visible: Vec<u32>,
}

impl ScoreVolume {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn score(&self, joint: JointId, voxel: [usize; 3]) -> f64 {
        self.scores[joint.index()][self.grid.linear(voxel)]
    }

    pub fn joint_scores(&self, joint: JointId) -> &[f64] {
        &self.scores[joint.index()]
    }

    /// `|V(Z)|` at a voxel.
    pub fn visible_count(&self, voxel: [usize; 3]) -> u32 {
        self.visible[self.grid.linear(voxel)]
    }

    pub fn is_visible(&self, voxel: [usize; 3]) -> bool {
        self.visible_count(voxel) > 0
    }

    /// Volume built from explicit per-joint scores (all joints share `grid`).
    pub fn from_scores(grid: GridSpec, scores: Vec<Vec<f64>>, visible: Vec<u32>) -> Result<Self, FusionError> {
        grid.validate()?;
        if scores.len() != NUM_JOINTS
            || scores.iter().any(|s| s.len() != grid.len())
            || visible.len() != grid.len()
        {
            return Err(FusionError::DegenerateGrid("score arrays do not match the grid".into()));
        }
        Ok(Self {
            grid,
            scores,
            visible,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct IndexedBlob {
    joint: u8,
    x: f64,
    y: f64,
    amplitude: f64,
    sigma: f64,
}

/// Bucketed blob lookup for one view; rasters are evaluated exhaustively.
struct ViewIndex<'a> {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<IndexedBlob>>,
    rasters: Vec<(usize, &'a JointMap)>,
}

impl<'a> ViewIndex<'a> {
    fn build(camera: &Camera, detections: &'a [Detection]) -> Self {
        let mut max_radius: f64 = 1.0;
        for det in detections {
            for map in det.joints.iter().flatten() {
                if let JointMap::Blob(b) = map {
                    max_radius = max_radius.max(b.support_radius());
                }
            }
        }
        let cell = max_radius.max(8.0);
        let cols = (camera.width() as f64 / cell).ceil() as usize + 1;
        let rows = (camera.height() as f64 / cell).ceil() as usize + 1;
        let mut buckets = vec![Vec::new(); cols * rows];
        let mut rasters = Vec::new();
        for det in detections {
            for (joint, map) in det.joints.iter().enumerate() {
                match map {
                    Some(JointMap::Blob(b)) => {
                        let r = b.support_radius();
                        let cx0 = ((b.peak.x - r) / cell).floor().max(0.0) as usize;
                        let cy0 = ((b.peak.y - r) / cell).floor().max(0.0) as usize;
                        let cx1 = (((b.peak.x + r) / cell).floor().max(0.0) as usize).min(cols - 1);
                        let cy1 = (((b.peak.y + r) / cell).floor().max(0.0) as usize).min(rows - 1);
                        let entry = IndexedBlob {
                            joint: joint as u8,
                            x: b.peak.x,
                            y: b.peak.y,
                            amplitude: b.amplitude,
                            sigma: b.sigma,
                        };
                        for cy in cy0..=cy1 {
                            for cx in cx0..=cx1 {
                                buckets[cy * cols + cx].push(entry);
                            }
                        }
                    }
                    Some(raster @ JointMap::Raster { .. }) => rasters.push((joint, raster)),
                    None => {}
                }
            }
        }
        Self {
            cell,
            cols,
            rows,
            buckets,
            rasters,
        }
    }

    /// Merged per-joint scores `h_j(z)` for all joints at once.
    #[inline]
    fn merged_scores(&self, z: &Point2, out: &mut [f64; NUM_JOINTS]) {
        *out = [0.0; NUM_JOINTS];
        let cx = (z.x / self.cell) as usize;
        let cy = (z.y / self.cell) as usize;
        if cx < self.cols && cy < self.rows {
            for b in &self.buckets[cy * self.cols + cx] {
                let blob = crate::scoremap::DetectionBlob {
                    peak: Point2::new(b.x, b.y),
                    amplitude: b.amplitude,
                    sigma: b.sigma,
                };
                let v = blob.evaluate(z);
                let slot = &mut out[b.joint as usize];
                if v > *slot {
                    *slot = v;
                }
            }
        }
        for (joint, map) in &self.rasters {
            let v = map.evaluate(z);
            if v > out[*joint] {
                out[*joint] = v;
            }
        }
    }
}

/// Fuses the 2D score maps into one 3D score volume per joint:
/// `H_j(Z) = (1/|V(Z)|) Σ_{c ∈ V(Z)} h_j^c(P_c(Z))`, with `V(Z)` the cameras
/// whose frustum contains `Z`.
///
/// Cameras are accumulated in ascending id order, so the result is
/// independent of the input order and of the thread count.
pub fn fuse(maps: &ScoreMapSet, cameras: &[Camera], grid: &GridSpec) -> Result<ScoreVolume, FusionError> {
    if cameras.is_empty() {
        return Err(FusionError::NoCameras);
    }
    grid.validate()?;
    let mut ordered: Vec<&Camera> = cameras.iter().collect();
    ordered.sort_by_key(|c| c.id());
    let indices: Vec<ViewIndex> = ordered
        .iter()
        .map(|c| ViewIndex::build(c, maps.view(c.id())))
        .collect();

    let n = grid.len();
    let per_voxel: Vec<([f64; NUM_JOINTS], u32)> = (0..n)
        .into_par_iter()
        .with_min_len(256)
        .map(|linear| {
            let center = grid.center(grid.unravel(linear));
            let mut sum = [0.0f64; NUM_JOINTS];
            let mut merged = [0.0f64; NUM_JOINTS];
            let mut count = 0u32;
            for (cam, index) in ordered.iter().zip(&indices) {
                let Some(px) = cam.project_visible(&center) else {
                    continue;
                };
                count += 1;
                index.merged_scores(&px, &mut merged);
                for (s, m) in sum.iter_mut().zip(&merged) {
                    *s += *m;
                }
            }
            if count > 0 {
                let visible_views = count as f64;
                for s in &mut sum {
                    *s /= visible_views;
                }
            }
            (sum, count)
        })
        .collect();

    let mut scores = vec![vec![0.0; n]; NUM_JOINTS];
    let mut visible = vec![0u32; n];
    for (linear, (s, count)) in per_voxel.into_iter().enumerate() {
        visible[linear] = count;
        for j in 0..NUM_JOINTS {
            scores[j][linear] = s[j];
        }
    }
    Ok(ScoreVolume {
        grid: *grid,
        scores,
        visible,
    })
}

/// A candidate 3D location of one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeProposal {
    pub joint: JointId,
    pub position: Point3,
    pub score: f64,
    /// Rank among this joint's proposals (descending score).
    pub index: usize,
    pub voxel: [usize; 3],
}

fn neighbours(grid: &GridSpec, v: [usize; 3]) -> impl Iterator<Item = [usize; 3]> + '_ {
    (-1i64..=1)
        .flat_map(|dx| (-1i64..=1).flat_map(move |dy| (-1i64..=1).map(move |dz| [dx, dy, dz])))
        .filter(|d| *d != [0, 0, 0])
        .filter_map(move |d| {
            let mut n = [0usize; 3];
            for a in 0..3 {
                let c = v[a] as i64 + d[a];
                if c < 0 || c >= grid.dims[a] as i64 {
                    return None;
                }
                n[a] = c as usize;
            }
            Some(n)
        })
}

/// True when `v` beats every 26-neighbour; equal scores are won by the
/// lexicographically smaller voxel.
pub fn is_strict_local_max(grid: &GridSpec, scores: &[f64], v: [usize; 3]) -> bool {
    let lin = grid.linear(v);
    let s = scores[lin];
    neighbours(grid, v).all(|n| {
        let ln = grid.linear(n);
        s > scores[ln] || (s == scores[ln] && lin < ln)
    })
}

/// Node proposals of one joint: strict 26-neighbourhood maxima with score
/// above `threshold`, then greedy suppression of weaker maxima within
/// `radius_voxels`. Sorted by descending score.
pub fn extract_node_proposals(
    volume: &ScoreVolume,
    joint: JointId,
    threshold: f64,
    radius_voxels: f64,
) -> Vec<NodeProposal> {
    let grid = &volume.grid;
    let scores = volume.joint_scores(joint);
    let mut candidates: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .filter(|(lin, _)| is_strict_local_max(grid, scores, grid.unravel(*lin)))
        .map(|(lin, &s)| (lin, s))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let r2 = radius_voxels * radius_voxels;
    let mut kept: Vec<[usize; 3]> = Vec::new();
    let mut out = Vec::new();
    for (lin, score) in candidates {
        let v = grid.unravel(lin);
        let suppressed = kept.iter().any(|k| {
            let d2: f64 = (0..3).map(|a| (k[a] as f64 - v[a] as f64).powi(2)).sum();
            d2 <= r2
        });
        if suppressed {
            continue;
        }
        kept.push(v);
        out.push(NodeProposal {
            joint,
            position: grid.center(v),
            score,
            index: out.len(),
            voxel: v,
        });
    }
    out
}

/// Node proposals for every joint, indexed by joint.
pub fn extract_all_proposals(volume: &ScoreVolume, threshold: f64, radius_voxels: f64) -> Vec<Vec<NodeProposal>> {
    JointId::ALL
        .iter()
        .map(|&j| extract_node_proposals(volume, j, threshold, radius_voxels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Distortion;
    use crate::scoremap::DetectionBlob;
    use nalgebra::Vector3;

    fn small_grid() -> GridSpec {
        GridSpec {
            origin: [-0.2, -0.2, 0.8],
            spacing: 0.04,
            dims: [11, 11, 11],
        }
    }

    fn cam(id: u32, eye: Point3) -> Camera {
        Camera::look_at(id, &eye, &Point3::new(0.0, 0.0, 1.0), &Vector3::z(), 400.0, 640, 480, Distortion::default())
            .unwrap()
    }

    fn view_with_blob(camera: &Camera, p: &Point3, joint: JointId, a: f64) -> Vec<Detection> {
        let mut d = Detection::new(0);
        d.joints[joint.index()] = Some(JointMap::Blob(
            DetectionBlob::new(camera.project(p).unwrap(), a, 3.0).unwrap(),
        ));
        vec![d]
    }

    #[test]
    fn single_camera_reads_blob_peak() {
        let grid = small_grid();
        let c = cam(0, Point3::new(2.5, 0.0, 1.0));
        let voxel = [5, 5, 5];
        let z = grid.center(voxel);
        let mut maps = ScoreMapSet::new();
        maps.insert_view(0, view_with_blob(&c, &z, JointId::Neck, 0.9));
        let vol = fuse(&maps, &[c], &grid).unwrap();
        assert_eq!(vol.score(JointId::Neck, voxel), 0.9);
        assert_eq!(vol.visible_count(voxel), 1);
    }

    #[test]
    fn two_cameras_average() {
        let grid = small_grid();
        let a = cam(0, Point3::new(2.5, 0.0, 1.0));
        let b = cam(1, Point3::new(0.0, 2.5, 1.0));
        let voxel = [5, 5, 5];
        let z = grid.center(voxel);
        let mut maps = ScoreMapSet::new();
        maps.insert_view(0, view_with_blob(&a, &z, JointId::Neck, 0.8));
        maps.insert_view(1, view_with_blob(&b, &z, JointId::Neck, 0.4));
        let vol = fuse(&maps, &[a, b], &grid).unwrap();
        assert!((vol.score(JointId::Neck, voxel) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn invisible_voxels_score_zero() {
        let grid = small_grid();
        // camera looking away from the grid
        let c = Camera::look_at(0, &Point3::new(5.0, 0.0, 1.0), &Point3::new(10.0, 0.0, 1.0), &Vector3::z(), 400.0, 640, 480, Distortion::default()).unwrap();
        let vol = fuse(&ScoreMapSet::new(), &[c], &grid).unwrap();
        assert!(!vol.is_visible([0, 0, 0]));
        assert!(vol.joint_scores(JointId::Neck).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn errors() {
        assert_eq!(fuse(&ScoreMapSet::new(), &[], &small_grid()), Err(FusionError::NoCameras));
        let bad = GridSpec {
            dims: [0, 1, 1],
            ..small_grid()
        };
        let c = cam(0, Point3::new(2.5, 0.0, 1.0));
        assert!(matches!(fuse(&ScoreMapSet::new(), &[c], &bad), Err(FusionError::DegenerateGrid(_))));
        assert!(GridSpec::from_bounds([0.0; 3], [1.0, 1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn grid_indexing_round_trip() {
        let g = GridSpec::from_bounds([-1.0, -1.0, 0.0], [1.0, 1.0, 2.0], 0.04).unwrap();
        assert_eq!(g.dims, [51, 51, 51]);
        for lin in [0, 1, 77, 1000, g.len() - 1] {
            assert_eq!(g.linear(g.unravel(lin)), lin);
        }
        assert!(g.linear([0, 0, 1]) > g.linear([0, 0, 0]));
        assert!(g.linear([1, 0, 0]) > g.linear([0, 50, 50]));
    }

    fn volume_with(grid: GridSpec, joint: JointId, peaks: &[([usize; 3], f64)]) -> ScoreVolume {
        let mut scores = vec![vec![0.0; grid.len()]; NUM_JOINTS];
        for &(v, s) in peaks {
            scores[joint.index()][grid.linear(v)] = s;
        }
        ScoreVolume::from_scores(grid, scores, vec![1; grid.len()]).unwrap()
    }

    // Exhaustive scan: every voxel above threshold that beats all neighbours.
    fn brute_force_maxima(vol: &ScoreVolume, joint: JointId, tau: f64) -> Vec<[usize; 3]> {
        let g = vol.grid();
        let s = vol.joint_scores(joint);
        let mut out = Vec::new();
        for ix in 0..g.dims[0] {
            for iy in 0..g.dims[1] {
                for iz in 0..g.dims[2] {
                    let here = s[g.linear([ix, iy, iz])];
                    if here <= tau {
                        continue;
                    }
                    let mut best = true;
                    for jx in ix.saturating_sub(1)..=(ix + 1).min(g.dims[0] - 1) {
                        for jy in iy.saturating_sub(1)..=(iy + 1).min(g.dims[1] - 1) {
                            for jz in iz.saturating_sub(1)..=(iz + 1).min(g.dims[2] - 1) {
                                if [jx, jy, jz] != [ix, iy, iz] && s[g.linear([jx, jy, jz])] >= here {
                                    best = false;
                                }
                            }
                        }
                    }
                    if best {
                        out.push([ix, iy, iz]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn isolated_peak_gives_one_proposal() {
        let g = small_grid();
        let vol = volume_with(g, JointId::Neck, &[([4, 5, 6], 0.9)]);
        let props = extract_node_proposals(&vol, JointId::Neck, 0.05, 2.0);
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].voxel, [4, 5, 6]);
        assert_eq!(props[0].position, g.center([4, 5, 6]));
        assert_eq!(props[0].score, 0.9);
    }

    #[test]
    fn sub_threshold_peak_is_dropped() {
        let vol = volume_with(small_grid(), JointId::Neck, &[([4, 5, 6], 0.04)]);
        assert!(extract_node_proposals(&vol, JointId::Neck, 0.05, 2.0).is_empty());
    }

    #[test]
    fn two_separated_peaks() {
        let g = GridSpec {
            origin: [0.0, 0.0, 0.0],
            spacing: 0.04,
            dims: [20, 5, 5],
        };
        // 10 voxels apart = 40 cm
        let vol = volume_with(g, JointId::KneeL, &[([3, 2, 2], 0.5), ([13, 2, 2], 0.5)]);
        let props = extract_node_proposals(&vol, JointId::KneeL, 0.05, 2.0);
        let mut found: Vec<_> = props.iter().map(|p| p.voxel).collect();
        found.sort();
        let mut expected = brute_force_maxima(&vol, JointId::KneeL, 0.05);
        expected.sort();
        assert_eq!(found, expected);
        assert_eq!(found.len(), 2);
        // ties broken by voxel order
        assert_eq!(props[0].voxel, [3, 2, 2]);
    }

    #[test]
    fn radius_suppression_merges_close_maxima() {
        let g = small_grid();
        // strict maxima two voxels apart: the weaker one is suppressed
        let vol = volume_with(g, JointId::Neck, &[([2, 2, 2], 0.9), ([4, 2, 2], 0.7), ([8, 2, 2], 0.6)]);
        let props = extract_node_proposals(&vol, JointId::Neck, 0.05, 2.0);
        let voxels: Vec<_> = props.iter().map(|p| p.voxel).collect();
        assert_eq!(voxels, vec![[2, 2, 2], [8, 2, 2]]);
        assert_eq!(props[1].index, 1);
    }

    #[test]
    fn plateau_tie_break() {
        let g = small_grid();
        let vol = volume_with(g, JointId::Neck, &[([2, 2, 2], 0.5), ([2, 2, 3], 0.5)]);
        let props = extract_node_proposals(&vol, JointId::Neck, 0.05, 0.0);
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].voxel, [2, 2, 2]);
    }
}
