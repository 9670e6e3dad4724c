//! Synthetic multi-camera scenes with known ground truth: articulated
//! capsule bodies, calibrated cameras, 2D joint detections, depth maps and
//! tracked surface patches.

mod capsule;
mod motion;

pub use capsule::Capsule;
pub use motion::{pose_at, Actor, MotionScript, Pose};

use crate::assembly::Skeleton;
use crate::body::{default_topology, JointId, NUM_JOINTS};
use crate::eval::farthest_point_order;
use crate::geometry::{Camera, Distortion, Point2, Point3};
use crate::scoremap::{Detection, DetectionBlob, JointMap, ScoreMapSet};
use crate::trajectory::{DepthMap, PatchTrajectory};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

/// Depth sensors get ids from here on so they never clash with cameras.
pub const DEPTH_SENSOR_ID_BASE: u32 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub people: usize,
    pub frames: usize,
    pub frame_rate: f64,
    pub motion: MotionScript,
    /// People are placed uniformly in a disc of this radius.
    pub arena_radius: f64,
    pub min_separation: f64,

    pub cameras: usize,
    pub sphere_radius: f64,
    pub sphere_center_height: f64,
    /// Cameras below this height are not placed.
    pub min_camera_height: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    pub lens_distortion: bool,

    pub blob_sigma: f64,
    pub noise_px: f64,
    /// Probability that a single joint detection is lost in a view.
    pub dropout: f64,
    pub occlusion: bool,

    pub depth_sensors: usize,
    pub depth_width: u32,
    pub depth_height: u32,
    pub depth_focal: f64,
    pub floor: bool,

    pub patches_per_bone: usize,
    pub patch_interval: usize,
    pub patch_span: usize,
    pub patch_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            people: 1,
            frames: 1,
            frame_rate: 25.0,
            motion: MotionScript::default(),
            arena_radius: 1.2,
            min_separation: 0.8,
            cameras: 60,
            sphere_radius: 2.745,
            sphere_center_height: 1.4,
            min_camera_height: 0.25,
            image_width: 640,
            image_height: 480,
            focal: 400.0,
            lens_distortion: true,
            blob_sigma: 3.0,
            noise_px: 0.0,
            dropout: 0.0,
            occlusion: false,
            depth_sensors: 0,
            depth_width: 160,
            depth_height: 120,
            depth_focal: 130.0,
            floor: true,
            patches_per_bone: 0,
            patch_interval: 20,
            patch_span: 30,
            patch_noise: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(self.frame_rate > 0.0) {
            return fail("frame rate must be positive");
        }
        if !(self.sphere_radius > 0.0) || !(self.focal > 0.0) || !(self.depth_focal > 0.0) {
            return fail("radius and focal lengths must be positive");
        }
        if self.image_width == 0 || self.image_height == 0 || self.depth_width == 0 || self.depth_height == 0 {
            return fail("image sizes must be non-zero");
        }
        if !(self.blob_sigma > 0.0) || !(self.noise_px >= 0.0) || !(self.patch_noise >= 0.0) {
            return fail("blob sigma must be positive and noise non-negative");
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return fail("dropout must be a probability");
        }
        if self.patches_per_bone > 0 && self.patch_interval == 0 {
            return fail("patch interval must be positive");
        }
        if !(self.arena_radius >= 0.0) || !(self.min_separation >= 0.0) {
            return fail("arena radius and separation must be non-negative");
        }
        Ok(())
    }

    /// Axis-aligned box enclosing every body of the scene, with margin.
    pub fn working_volume(&self) -> ([f64; 3], [f64; 3]) {
        let r = self.arena_radius + self.motion.walk + 0.8;
        ([-r, -r, 0.0], [r, r, 2.0])
    }
}

/// Which person and bone a synthetic patch was sampled on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLabel {
    pub patch: u64,
    pub person: u32,
    pub bone: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config: SceneConfig,
    pub cameras: Vec<Camera>,
    pub depth_sensors: Vec<Camera>,
    pub actors: Vec<Actor>,
    /// `poses[frame][person]`.
    pub poses: Vec<Vec<Pose>>,
    /// Detections per frame.
    pub maps: Vec<ScoreMapSet>,
    pub depth: Vec<DepthMap>,
    pub patches: Vec<PatchTrajectory>,
    pub patch_labels: Vec<PatchLabel>,
}

impl GroundTruth {
    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn joints(&self, frame: usize, person: usize) -> &[Point3; NUM_JOINTS] {
        &self.poses[frame][person].joints
    }

    /// Reference skeletons of one frame, person ids set.
    pub fn skeletons(&self, frame: usize) -> Vec<Skeleton> {
        self.poses[frame]
            .iter()
            .enumerate()
            .map(|(p, pose)| {
                let positions: Vec<Option<Point3>> = pose.joints.iter().map(|j| Some(*j)).collect();
                Skeleton::from_positions(&positions, Some(p as u32))
            })
            .collect()
    }

    pub fn depth_for_frame(&self, frame: usize) -> Vec<DepthMap> {
        self.depth.iter().filter(|d| d.frame() == frame).cloned().collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SETUP_STREAM: u64 = 0;
const PATCH_STREAM: u64 = 1;
const FRAME_STREAM_BASE: u64 = 16;

fn aim(id: u32, eye: &Point3, target: &Point3, focal: f64, w: u32, h: u32, dist: Distortion) -> Camera {
    let forward = (target - eye).normalize();
    let up = if forward.cross(&Vector3::z()).norm() < 1e-3 { Vector3::x() } else { Vector3::z() };
    Camera::look_at(id, eye, target, &up, focal, w, h, dist).expect("synthetic camera is valid")
}

/// Cameras spread over the sphere by farthest-point selection from a dense
/// Fibonacci lattice, all aimed at the sphere centre.
pub fn place_cameras<R: Rng>(config: &SceneConfig, rng: &mut R) -> Vec<Camera> {
    if config.cameras == 0 {
        return Vec::new();
    }
    let centre = Point3::new(0.0, 0.0, config.sphere_center_height);
    let r = config.sphere_radius;
    let yaw: f64 = rng.random_range(0.0..TAU);
    let golden = PI * (3.0 - 5f64.sqrt());
    let m = (8 * config.cameras).max(4000);
    let candidates: Vec<Point3> = (0..m)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
            let rho = (1.0 - z * z).sqrt();
            let a = golden * i as f64 + yaw;
            centre + Vector3::new(rho * a.cos(), rho * a.sin(), z) * r
        })
        .filter(|p| p.z >= config.min_camera_height)
        .collect();
    let k = config.cameras.min(candidates.len());
    farthest_point_order(&candidates, k, 0)
        .into_iter()
        .enumerate()
        .map(|(id, i)| {
            let dist = if config.lens_distortion {
                Distortion::from_array([rng.random_range(-0.05..0.05), rng.random_range(-0.01..0.01), 0.0, 0.0, 0.0])
            } else {
                Distortion::default()
            };
            aim(id as u32, &candidates[i], &centre, config.focal, config.image_width, config.image_height, dist)
        })
        .collect()
}

/// Depth sensors on two rings of the sphere (1.0 m and 2.6 m high).
pub fn place_depth_sensors(config: &SceneConfig) -> Vec<Camera> {
    let centre = Point3::new(0.0, 0.0, config.sphere_center_height);
    let target = Point3::new(0.0, 0.0, 1.0);
    let r = config.sphere_radius;
    let n = config.depth_sensors;
    let low = n.div_ceil(2);
    (0..n)
        .map(|k| {
            let (height, index, count, offset) = if k < low { (1.0, k, low, 0.0) } else { (2.6, k - low, n - low, 0.5) };
            let dz = (height - centre.z).clamp(-r, r);
            let ring = (r * r - dz * dz).sqrt();
            let a = TAU * (index as f64 + offset) / count as f64;
            let eye = Point3::new(ring * a.cos(), ring * a.sin(), centre.z + dz);
            aim(
                DEPTH_SENSOR_ID_BASE + k as u32,
                &eye,
                &target,
                config.depth_focal,
                config.depth_width,
                config.depth_height,
                Distortion::default(),
            )
        })
        .collect()
}

fn place_actors<R: Rng>(config: &SceneConfig, rng: &mut R) -> Result<Vec<Actor>, SynthError> {
    let mut bases: Vec<Point3> = Vec::new();
    let mut attempts = 0;
    while bases.len() < config.people {
        attempts += 1;
        if attempts > 100_000 {
            return Err(SynthError::InvalidConfig(format!(
                "cannot place {} people {} m apart in a {} m arena",
                config.people, config.min_separation, config.arena_radius
            )));
        }
        let rho = config.arena_radius * rng.random_range(0.0f64..1.0).sqrt();
        let a = rng.random_range(0.0..TAU);
        let p = Point3::new(rho * a.cos(), rho * a.sin(), 0.0);
        if bases.iter().all(|b| (b - p).norm() >= config.min_separation) {
            bases.push(p);
        }
    }
    Ok(bases.into_iter().map(|b| Actor::random(rng, b)).collect())
}

fn render_detections(config: &SceneConfig, cameras: &[Camera], poses: &[Pose], rng: &mut ChaCha8Rng) -> ScoreMapSet {
    let noise = Normal::new(0.0, config.noise_px.max(f64::MIN_POSITIVE)).expect("finite noise");
    let torsos: Vec<Capsule> = poses.iter().map(Pose::torso_capsule).collect();
    let mut maps = ScoreMapSet::new();
    for cam in cameras {
        let eye = cam.center();
        let mut detections = Vec::new();
        for (p, pose) in poses.iter().enumerate() {
            let mut det = Detection::new(p as u32);
            for (j, joint) in pose.joints.iter().enumerate() {
                let dropped = config.dropout > 0.0 && rng.random_bool(config.dropout);
                let (nx, ny) = if config.noise_px > 0.0 {
                    (noise.sample(rng), noise.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                if dropped {
                    continue;
                }
                let Some(px) = cam.project_visible(joint) else {
                    continue;
                };
                if config.occlusion
                    && torsos
                        .iter()
                        .enumerate()
                        .any(|(q, torso)| q != p && torso.blocks_segment(&eye, joint))
                {
                    continue;
                }
                let peak = Point2::new(px.x + nx, px.y + ny);
                let blob = DetectionBlob::new(peak, 1.0, config.blob_sigma).expect("valid blob");
                det.joints[j] = Some(JointMap::Blob(blob));
            }
            if det.blob_count() > 0 {
                detections.push(det);
            }
        }
        maps.insert_view(cam.id(), detections);
    }
    maps
}

fn render_depth(config: &SceneConfig, sensor: &Camera, frame: usize, poses: &[Pose]) -> DepthMap {
    let eye = sensor.center();
    let bodies: Vec<((Point3, f64), Vec<Capsule>)> = poses.iter().map(|p| (p.bounds(), p.capsules())).collect();
    let (w, h) = (config.depth_width as usize, config.depth_height as usize);
    let mut values = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            // camera-frame z of `dir` is 1, so the ray parameter is the depth
            let dir = sensor.back_project(&Point2::new(x as f64, y as f64), 1.0) - eye;
            let mut best = f64::INFINITY;
            if config.floor && dir.z < 0.0 {
                best = -eye.z / dir.z;
            }
            for ((centre, radius), capsules) in &bodies {
                let oc = eye - centre;
                let b = dir.dot(&oc);
                let disc = b * b - dir.norm_squared() * (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    continue;
                }
                for c in capsules {
                    if let Some(s) = c.intersect_ray(&eye, &dir, 0.0) {
                        best = best.min(s);
                    }
                }
            }
            if best.is_finite() {
                values[y * w + x] = best as f32;
            }
        }
    }
    DepthMap::new(sensor.clone(), frame, values).expect("rendered depth is valid")
}

fn sample_patches(config: &SceneConfig, poses: &[Vec<Pose>], rng: &mut ChaCha8Rng) -> (Vec<PatchTrajectory>, Vec<PatchLabel>) {
    let noise = Normal::new(0.0, config.patch_noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let topology = default_topology();
    let frames = poses.len();
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    if config.patches_per_bone == 0 || frames == 0 {
        return (patches, labels);
    }
    for start in (0..frames).step_by(config.patch_interval) {
        let first = start.saturating_sub(config.patch_span);
        let last = (start + config.patch_span).min(frames - 1);
        for (person, pose) in poses[start].iter().enumerate() {
            for (bone, &(u, v)) in topology.bones().iter().enumerate() {
                let axis = pose.frames[bone].transpose() * (pose.joints[v] - pose.joints[u]);
                let e1 = axis.cross(&Vector3::z()).try_normalize(1e-9).unwrap_or_else(|| axis.cross(&Vector3::x()).normalize());
                let e2 = axis.normalize().cross(&e1);
                let radius = pose.bone_radius(bone);
                for _ in 0..config.patches_per_bone {
                    let along = rng.random_range(0.1..0.9);
                    let angle = rng.random_range(0.0..TAU);
                    let normal_local = e1 * angle.cos() + e2 * angle.sin();
                    let local = axis * along + normal_local * radius;
                    let id = patches.len() as u64;
                    let mut centers = Vec::with_capacity(last - first + 1);
                    let mut normals = Vec::with_capacity(last - first + 1);
                    for frame_poses in &poses[first..=last] {
                        let p = &frame_poses[person];
                        let mut c = p.joints[u] + p.frames[bone] * local;
                        if config.patch_noise > 0.0 {
                            c += Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
                        }
                        centers.push(c);
                        normals.push(p.frames[bone] * normal_local);
                    }
                    patches.push(PatchTrajectory {
                        id,
                        start_frame: first,
                        centers,
                        normals,
                    });
                    labels.push(PatchLabel {
                        patch: id,
                        person: person as u32,
                        bone,
                    });
                }
            }
        }
    }
    (patches, labels)
}

/// Builds a complete scene; the output depends only on `config`.
pub fn generate(config: &SceneConfig) -> Result<GroundTruth, SynthError> {
    generate_with_cameras(config, None)
}

/// Like [`generate`], but renders detections into the given cameras instead
/// of placing `config.cameras` on the sphere. Everything else is unchanged.
pub fn generate_with_cameras(config: &SceneConfig, cameras: Option<Vec<Camera>>) -> Result<GroundTruth, SynthError> {
    config.validate()?;
    let mut setup = stream_rng(config.seed, SETUP_STREAM);
    // placed either way so that the remaining draws do not depend on the rig
    let placed = place_cameras(config, &mut setup);
    let cameras = cameras.unwrap_or(placed);
    let mut ids = std::collections::BTreeSet::new();
    if let Some(c) = cameras.iter().find(|c| !ids.insert(c.id()) || c.id() >= DEPTH_SENSOR_ID_BASE) {
        return Err(SynthError::InvalidConfig(format!("camera id {} is duplicated or reserved", c.id())));
    }
    let depth_sensors = place_depth_sensors(config);
    let actors = place_actors(config, &mut setup)?;

    let poses: Vec<Vec<Pose>> = (0..config.frames)
        .map(|f| {
            let time = f as f64 / config.frame_rate;
            actors.iter().map(|a| pose_at(a, &config.motion, time)).collect()
        })
        .collect();

    let maps: Vec<ScoreMapSet> = poses
        .par_iter()
        .enumerate()
        .map(|(f, frame_poses)| {
            let mut rng = stream_rng(config.seed, FRAME_STREAM_BASE + f as u64);
            render_detections(config, &cameras, frame_poses, &mut rng)
        })
        .collect();

    let depth: Vec<DepthMap> = poses
        .par_iter()
        .enumerate()
        .flat_map_iter(|(f, frame_poses)| {
            depth_sensors
                .iter()
                .map(move |s| render_depth(config, s, f, frame_poses))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut patch_rng = stream_rng(config.seed, PATCH_STREAM);
    let (patches, patch_labels) = sample_patches(config, &poses, &mut patch_rng);

    Ok(GroundTruth {
        config: config.clone(),
        cameras,
        depth_sensors,
        actors,
        poses,
        maps,
        depth,
        patches,
        patch_labels,
    })
}

/// Swaps the left and right joint maps of every detection in a view, for
/// each view independently with `probability`.
pub fn perturb_detection_sides(maps: &ScoreMapSet, probability: f64, seed: u64) -> ScoreMapSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = maps.clone();
    for (_, detections) in out.views_mut() {
        if !rng.random_bool(probability.clamp(0.0, 1.0)) {
            continue;
        }
        for det in detections.iter_mut() {
            let original = det.joints.clone();
            for joint in JointId::ALL {
                det.joints[joint.mirrored().index()] = original[joint.index()].clone();
            }
        }
    }
    out
}
