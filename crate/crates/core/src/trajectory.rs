//! Second stage: depth-based outlier rejection, patch-to-part association
//! and motion-compensated refinement of part trajectories.

use crate::assembly::SkeletonTrajectory;
use crate::body::SkeletonTopology;
use crate::geometry::{Camera, Point2, Point3, RigidTransform};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Side length of a surface patch, also its neighbourhood radius.
pub const PATCH_SIZE: f64 = 0.06;
pub const MIN_PATCH_NEIGHBOURS: usize = 6;
pub const DEFAULT_DEPTH_MARGIN: f64 = 0.05;
pub const DEFAULT_RIGIDITY_THRESHOLD: f64 = 0.10;
pub const DEFAULT_MAX_REFINE_ITERATIONS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("part endpoints coincide")]
    DegeneratePart,
    #[error("patch and part overlap in {0} frames, at least 2 are needed")]
    InsufficientOverlap(usize),
    #[error("patch never projects inside the part segment")]
    NoInteriorFoot,
    #[error("{0} correspondences, at least 3 are needed for a rigid transform")]
    TooFewPatches(usize),
    #[error("patch centres are collinear")]
    Collinear,
    #[error("invalid depth map: {0}")]
    InvalidDepth(String),
}

/// One depth image with its sensor calibration. Zero marks missing depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    camera: Camera,
    frame: usize,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(camera: Camera, frame: usize, values: Vec<f32>) -> Result<Self, TrajectoryError> {
        let expected = camera.width() as usize * camera.height() as usize;
        if values.len() != expected {
            return Err(TrajectoryError::InvalidDepth(format!(
                "{} values for a {}x{} sensor",
                values.len(),
                camera.width(),
                camera.height()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(TrajectoryError::InvalidDepth(format!("depth value {v}")));
        }
        Ok(Self { camera, frame, values })
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.camera.width() as usize
    }

    pub fn height(&self) -> usize {
        self.camera.height() as usize
    }

    /// Depth at integer pixel `(x, y)`, `None` when invalid.
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        let v = self.values[y * self.width() + x];
        (v > 0.0).then_some(v as f64)
    }

    /// Depth of the pixel nearest to `px`.
    pub fn lookup(&self, px: &Point2) -> Option<f64> {
        let x = (px.x + 0.5).floor();
        let y = (px.y + 0.5).floor();
        if x < 0.0 || y < 0.0 || x >= self.width() as f64 || y >= self.height() as f64 {
            return None;
        }
        self.at(x as usize, y as usize)
    }

    /// World points of every valid pixel.
    pub fn point_cloud(&self) -> Vec<Point3> {
        let w = self.width();
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.0)
            .map(|(i, &d)| {
                let px = Point2::new((i % w) as f64, (i / w) as f64);
                self.camera.back_project(&px, d as f64)
            })
            .collect()
    }
}

/// A small oriented surface element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub center: Point3,
    pub normal: Vector3<f64>,
}

/// A patch tracked over a contiguous run of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTrajectory {
    pub id: u64,
    pub start_frame: usize,
    pub centers: Vec<Point3>,
    pub normals: Vec<Vector3<f64>>,
}

impl PatchTrajectory {
    /// One past the last valid frame.
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.centers.len()
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.start_frame && t < self.end_frame()
    }

    pub fn center(&self, t: usize) -> Option<&Point3> {
        t.checked_sub(self.start_frame).and_then(|i| self.centers.get(i))
    }

    pub fn normal(&self, t: usize) -> Option<&Vector3<f64>> {
        t.checked_sub(self.start_frame).and_then(|i| self.normals.get(i))
    }
}

/// Endpoints of one person's bone over time; `None` marks a missing frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PartTrajectory {
    pub person: u32,
    pub bone: (usize, usize),
    pub endpoints: Vec<Option<(Point3, Point3)>>,
    /// Ids of the associated patch trajectories.
    pub patches: Vec<u64>,
}

impl PartTrajectory {
    pub fn at(&self, t: usize) -> Option<&(Point3, Point3)> {
        self.endpoints.get(t).and_then(|e| e.as_ref())
    }

    pub fn present_frames(&self) -> usize {
        self.endpoints.iter().filter(|e| e.is_some()).count()
    }
}

/// Splits a skeleton trajectory into per-bone part trajectories covering
/// frames `0..num_frames`.
pub fn part_trajectories(
    trajectory: &SkeletonTrajectory,
    topology: &SkeletonTopology,
    num_frames: usize,
) -> Vec<PartTrajectory> {
    (0..topology.bones().len())
        .map(|b| {
            let mut endpoints = vec![None; num_frames];
            for (t, e) in trajectory.part_trajectory(topology, b) {
                if t < num_frames {
                    endpoints[t] = Some(e);
                }
            }
            PartTrajectory {
                person: trajectory.person,
                bone: topology.bones()[b],
                endpoints,
                patches: Vec::new(),
            }
        })
        .collect()
}

/// Creates patches from the depth maps of `frame`: every valid pixel with at
/// least six other points within the patch size becomes a patch whose normal
/// is the least principal axis of its neighbourhood, oriented towards the
/// sensor that observed it.
pub fn init_patches(depth: &[DepthMap], frame: usize) -> Vec<Patch> {
    let mut points: Vec<(Point3, Point3)> = Vec::new(); // (point, sensor centre)
    for map in depth.iter().filter(|m| m.frame() == frame) {
        let eye = map.camera().center();
        points.extend(map.point_cloud().into_iter().map(|p| (p, eye)));
    }
    let cell = |p: &Point3| -> (i64, i64, i64) {
        (
            (p.x / PATCH_SIZE).floor() as i64,
            (p.y / PATCH_SIZE).floor() as i64,
            (p.z / PATCH_SIZE).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, (p, _)) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let r2 = PATCH_SIZE * PATCH_SIZE;
    points
        .par_iter()
        .enumerate()
        .filter_map(|(i, (p, eye))| {
            let (cx, cy, cz) = cell(p);
            let mut neighbourhood = vec![*p];
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        neighbourhood.extend(
                            bucket
                                .iter()
                                .filter(|&&j| j != i && (points[j].0 - p).norm_squared() <= r2)
                                .map(|&j| points[j].0),
                        );
                    }
                }
            }
            if neighbourhood.len() - 1 < MIN_PATCH_NEIGHBOURS {
                return None;
            }
            let mut normal = least_principal_axis(&neighbourhood)?;
            if normal.dot(&(p - eye)) > 0.0 {
                normal = -normal;
            }
            Some(Patch { center: *p, normal })
        })
        .collect()
}

fn least_principal_axis(points: &[Point3]) -> Option<Vector3<f64>> {
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / points.len() as f64;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        scatter += d * d.transpose();
    }
    let eigen = SymmetricEigen::new(scatter);
    let k = eigen.eigenvalues.imin();
    let n = eigen.eigenvectors.column(k).into_owned();
    let norm = n.norm();
    (norm > 0.0 && norm.is_finite()).then(|| n / norm)
}

/// Marks a part missing at every frame where some depth view sees both of
/// its endpoints on valid pixels and either endpoint lies more than `margin`
/// in front of the measured surface. Returns the number of removed frames.
pub fn remove_outlier_parts(parts: &mut [PartTrajectory], depth: &[DepthMap], margin: f64) -> usize {
    let mut by_frame: BTreeMap<usize, Vec<&DepthMap>> = BTreeMap::new();
    for map in depth {
        by_frame.entry(map.frame()).or_default().push(map);
    }
    let mut removed = 0;
    for part in parts.iter_mut() {
        for (t, slot) in part.endpoints.iter_mut().enumerate() {
            let Some((a, b)) = slot else { continue };
            let Some(maps) = by_frame.get(&t) else { continue };
            if maps.iter().any(|m| floats_in_front(m, a, b, margin)) {
                *slot = None;
                removed += 1;
            }
        }
    }
    removed
}

fn floats_in_front(map: &DepthMap, a: &Point3, b: &Point3, margin: f64) -> bool {
    let probe = |p: &Point3| -> Option<(f64, f64)> {
        let px = map.camera().project_visible(p)?;
        Some((map.camera().depth(p), map.lookup(&px)?))
    };
    let (Some((da, ma)), Some((db, mb))) = (probe(a), probe(b)) else {
        return false;
    };
    da < ma - margin || db < mb - margin
}

fn segment_foot(f: &Point3, a: &Point3, b: &Point3) -> Result<f64, TrajectoryError> {
    let ab = a - b;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return Err(TrajectoryError::DegeneratePart);
    }
    Ok((f - b).dot(&ab) / len2)
}

/// Distance from `f` to the segment `αA + (1 − α)B`, `α ∈ [0, 1]`, and the
/// minimising `α`.
pub fn segment_distance(f: &Point3, a: &Point3, b: &Point3) -> Result<(f64, f64), TrajectoryError> {
    let alpha = segment_foot(f, a, b)?.clamp(0.0, 1.0);
    let foot = b + (a - b) * alpha;
    Ok(((f - foot).norm(), alpha))
}

fn overlap<'a>(
    patch: &'a PatchTrajectory,
    part: &'a PartTrajectory,
) -> impl Iterator<Item = (usize, Point3, Vector3<f64>, Point3, Point3)> + 'a {
    (patch.start_frame..patch.end_frame().min(part.endpoints.len())).filter_map(move |t| {
        let (a, b) = part.at(t)?;
        Some((t, *patch.center(t)?, *patch.normal(t)?, *a, *b))
    })
}

/// Range over the common frames of the patch-to-segment distance.
pub fn rigidity_cost(patch: &PatchTrajectory, part: &PartTrajectory) -> Result<f64, TrajectoryError> {
    rigidity_stats(patch, part).map(|s| s.max - s.min)
}

struct RigidityStats {
    min: f64,
    max: f64,
    normals_agree: bool,
}

fn rigidity_stats(patch: &PatchTrajectory, part: &PartTrajectory) -> Result<RigidityStats, TrajectoryError> {
    let mut count = 0;
    let mut interior = false;
    let mut normals_agree = true;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (_, f, n, a, b) in overlap(patch, part) {
        let raw = segment_foot(&f, &a, &b)?;
        interior |= (0.0..=1.0).contains(&raw);
        let alpha = raw.clamp(0.0, 1.0);
        let foot = b + (a - b) * alpha;
        let offset = f - foot;
        normals_agree &= offset.dot(&n) > 0.0;
        let l = offset.norm();
        min = min.min(l);
        max = max.max(l);
        count += 1;
    }
    if count < 2 {
        return Err(TrajectoryError::InsufficientOverlap(count));
    }
    if !interior {
        return Err(TrajectoryError::NoInteriorFoot);
    }
    Ok(RigidityStats {
        min,
        max,
        normals_agree,
    })
}

/// Assigns each patch trajectory to at most one part: among the parts whose
/// rigidity cost is within `threshold` and whose segment-to-patch direction
/// agrees with the patch normal at every common frame, the one with the
/// smallest maximum distance wins (lowest part index on ties).
///
/// Returns the patch ids per part and stores them in `parts[i].patches`.
pub fn associate(stream: &[PatchTrajectory], parts: &mut [PartTrajectory], threshold: f64) -> Vec<Vec<u64>> {
    let owners: Vec<Option<usize>> = stream
        .par_iter()
        .map(|patch| {
            let mut best: Option<(f64, usize)> = None;
            for (k, part) in parts.iter().enumerate() {
                let Ok(stats) = rigidity_stats(patch, part) else { continue };
                if !stats.normals_agree || stats.max - stats.min > threshold {
                    continue;
                }
                if best.is_none_or(|(m, _)| stats.max < m) {
                    best = Some((stats.max, k));
                }
            }
            best.map(|(_, k)| k)
        })
        .collect();
    let mut sets = vec![Vec::new(); parts.len()];
    for (patch, owner) in stream.iter().zip(owners) {
        if let Some(k) = owner {
            sets[k].push(patch.id);
        }
    }
    for (part, set) in parts.iter_mut().zip(&sets) {
        part.patches = set.clone();
    }
    sets
}

/// Least-squares rigid motion taking `from[i]` to `to[i]`.
pub fn estimate_transform(from: &[Point3], to: &[Point3]) -> Result<RigidTransform, TrajectoryError> {
    assert_eq!(from.len(), to.len(), "point sets differ in size");
    if from.len() < 3 {
        return Err(TrajectoryError::TooFewPatches(from.len()));
    }
    let n = from.len() as f64;
    let mean_from = from.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let mean_to = to.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let mut scatter = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (p, q) in from.iter().zip(to) {
        let dp = p.coords - mean_from;
        let dq = q.coords - mean_to;
        scatter += dp * dp.transpose();
        cross += dq * dp.transpose();
    }
    let mut spread = SymmetricEigen::new(scatter).eigenvalues;
    spread.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(spread[0] > 0.0) || spread[1] / spread[0] <= 1e-6 {
        return Err(TrajectoryError::Collinear);
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let mut fix = Matrix3::identity();
    fix[(2, 2)] = (u * v_t).determinant().signum();
    let rotation = u * fix * v_t;
    let translation = mean_to - rotation * mean_from;
    Ok(RigidTransform::from_parts_unchecked(rotation, translation))
}

/// Rigid fit followed, for six or more correspondences, by one refit
/// without the points whose residual exceeds twice the RMS residual.
pub fn estimate_transform_trimmed(from: &[Point3], to: &[Point3]) -> Result<RigidTransform, TrajectoryError> {
    let first = estimate_transform(from, to)?;
    if from.len() < 6 {
        return Ok(first);
    }
    let residuals: Vec<f64> = from.iter().zip(to).map(|(p, q)| (first.apply(p) - q).norm()).collect();
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    // below a micrometre the residuals are rounding noise
    let cut = (2.0 * rms).max(1e-6);
    let (kept_from, kept_to): (Vec<Point3>, Vec<Point3>) = from
        .iter()
        .zip(to)
        .zip(&residuals)
        .filter(|(_, &r)| r <= cut)
        .map(|((p, q), _)| (*p, *q))
        .unzip();
    if kept_from.len() == from.len() {
        return Ok(first);
    }
    estimate_transform(&kept_from, &kept_to).or(Ok(first))
}

/// Motion of the given patches from frame `t` to `t + 1`.
pub fn frame_transform(patches: &[&PatchTrajectory], t: usize) -> Result<RigidTransform, TrajectoryError> {
    let (from, to): (Vec<Point3>, Vec<Point3>) = patches
        .iter()
        .filter_map(|p| Some((*p.center(t)?, *p.center(t + 1)?)))
        .unzip();
    estimate_transform_trimmed(&from, &to)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub depth_margin: f64,
    pub rigidity_threshold: f64,
    pub max_iterations: usize,
    /// Neighbouring frames on each side averaged into every frame.
    pub propagation_window: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            depth_margin: DEFAULT_DEPTH_MARGIN,
            rigidity_threshold: DEFAULT_RIGIDITY_THRESHOLD,
            max_iterations: DEFAULT_MAX_REFINE_ITERATIONS,
            propagation_window: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineReport {
    pub outliers_removed: usize,
    pub iterations: usize,
    pub frames_filled: usize,
}

/// One propagation pass over a part: every frame becomes the mean of its own
/// observation and the observations of up to `window` frames on either side,
/// carried over by the patch motion. Returns the new endpoints.
pub fn refine_step(part: &PartTrajectory, stream: &[PatchTrajectory], window: usize) -> Vec<Option<(Point3, Point3)>> {
    let owned: Vec<&PatchTrajectory> = stream.iter().filter(|p| part.patches.contains(&p.id)).collect();
    let n = part.endpoints.len();
    // forward[t]: motion from t to t + 1
    let forward: Vec<Option<RigidTransform>> = (0..n.saturating_sub(1))
        .map(|t| frame_transform(&owned, t).ok())
        .collect();
    (0..n)
        .map(|t| {
            let mut sum_a = Vector3::zeros();
            let mut sum_b = Vector3::zeros();
            let mut count = 0usize;
            let mut add = |motion: &RigidTransform, (a, b): &(Point3, Point3)| {
                sum_a += motion.apply(a).coords;
                sum_b += motion.apply(b).coords;
                count += 1;
            };
            // earlier frames, pushed forward to t
            let mut motion = Some(RigidTransform::identity());
            for k in 1..=window.min(t) {
                motion = motion.zip(forward[t - k].as_ref()).map(|(m, step)| m.compose(step));
                let Some(m) = &motion else { break };
                if let Some(e) = part.at(t - k) {
                    add(m, e);
                }
            }
            if let Some(e) = part.at(t) {
                add(&RigidTransform::identity(), e);
            }
            // later frames, pulled back to t
            let mut motion = Some(RigidTransform::identity());
            for k in 1..=window.min(n - 1 - t) {
                motion = motion
                    .zip(forward[t + k - 1].as_ref())
                    .map(|(m, step)| m.compose(&step.inverse()));
                let Some(m) = &motion else { break };
                if let Some(e) = part.at(t + k) {
                    add(m, e);
                }
            }
            (count > 0).then(|| {
                let c = count as f64;
                (Point3::from(sum_a / c), Point3::from(sum_b / c))
            })
        })
        .collect()
}

/// Full second stage over all part trajectories: outlier removal, then
/// association and propagation repeated until no missing frame is filled
/// (or the iteration cap is reached).
pub fn refine_parts(
    parts: &mut [PartTrajectory],
    stream: &[PatchTrajectory],
    depth: &[DepthMap],
    config: &RefineConfig,
) -> RefineReport {
    let mut report = RefineReport {
        outliers_removed: remove_outlier_parts(parts, depth, config.depth_margin),
        ..RefineReport::default()
    };
    while report.iterations < config.max_iterations {
        associate(stream, parts, config.rigidity_threshold);
        let updated: Vec<Vec<Option<(Point3, Point3)>>> = parts
            .par_iter()
            .map(|p| refine_step(p, stream, config.propagation_window))
            .collect();
        report.iterations += 1;
        let mut filled = 0;
        for (part, endpoints) in parts.iter_mut().zip(updated) {
            filled += part
                .endpoints
                .iter()
                .zip(&endpoints)
                .filter(|(old, new)| old.is_none() && new.is_some())
                .count();
            part.endpoints = endpoints;
        }
        report.frames_filled += filled;
        if filled == 0 {
            break;
        }
    }
    report
}

/// Per-person, per-frame joint positions: the mean over all bones touching
/// each joint.
pub fn average_joints(parts: &[PartTrajectory], num_joints: usize) -> BTreeMap<u32, Vec<Vec<Option<Point3>>>> {
    let mut sums: BTreeMap<u32, Vec<Vec<(Vector3<f64>, usize)>>> = BTreeMap::new();
    for part in parts {
        let frames = sums
            .entry(part.person)
            .or_insert_with(|| vec![vec![(Vector3::zeros(), 0); num_joints]; part.endpoints.len()]);
        if frames.len() < part.endpoints.len() {
            frames.resize(part.endpoints.len(), vec![(Vector3::zeros(), 0); num_joints]);
        }
        for (t, e) in part.endpoints.iter().enumerate() {
            if let Some((a, b)) = e {
                for (joint, p) in [(part.bone.0, a), (part.bone.1, b)] {
                    frames[t][joint].0 += p.coords;
                    frames[t][joint].1 += 1;
                }
            }
        }
    }
    sums.into_iter()
        .map(|(person, frames)| {
            let joints = frames
                .into_iter()
                .map(|joints| {
                    joints
                        .into_iter()
                        .map(|(s, c)| (c > 0).then(|| Point3::from(s / c as f64)))
                        .collect()
                })
                .collect();
            (person, joints)
        })
        .collect()
}
