//! Versioned JSON documents.

use super::{check_schema, read_json, write_json, write_raster, IoError};
use crate::assembly::{Correspondence, Skeleton, SkeletonJoint};
use crate::body::{JointId, NUM_JOINTS};
use crate::geometry::{Camera, Distortion, Point2, Point3};
use crate::scoremap::{Detection, DetectionBlob, JointMap, ScoreMapSet};
use crate::synth::PatchLabel;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

pub const CALIBRATION_SCHEMA: &str = "mvpose.calibration/v1";
pub const SCOREMAPS_SCHEMA: &str = "mvpose.scoremaps/v1";
pub const SKELETONS_SCHEMA: &str = "mvpose.skeletons/v1";
pub const PATCH_LABELS_SCHEMA: &str = "mvpose.patch-labels/v1";

/// One camera: row-major `K` and `R`, world-to-camera `t`, Brown
/// coefficients `[k1, k2, p1, p2, k3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: u32,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub dist: [f64; 5],
    pub width: u32,
    pub height: u32,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    std::array::from_fn(|i| m[(i / 3, i % 3)])
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        Self {
            id: c.id(),
            k: row_major(c.intrinsics()),
            r: row_major(c.rotation()),
            t: [c.translation().x, c.translation().y, c.translation().z],
            dist: c.distortion().to_array(),
            width: c.width(),
            height: c.height(),
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera, crate::geometry::GeometryError> {
        Camera::new(
            self.id,
            Matrix3::from_row_slice(&self.k),
            Matrix3::from_row_slice(&self.r),
            Vector3::from(self.t),
            Distortion::from_array(self.dist),
            self.width,
            self.height,
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationDocument {
    schema: String,
    cameras: Vec<CameraRecord>,
}

pub fn write_calibration(path: &Path, cameras: &[Camera]) -> Result<(), IoError> {
    write_json(
        path,
        &CalibrationDocument {
            schema: CALIBRATION_SCHEMA.to_string(),
            cameras: cameras.iter().map(CameraRecord::from).collect(),
        },
    )
}

pub fn read_calibration(path: &Path) -> Result<Vec<Camera>, IoError> {
    let doc: CalibrationDocument = read_json(path, None)?;
    check_schema(path, None, &doc.schema, CALIBRATION_SCHEMA)?;
    let mut seen = BTreeSet::new();
    doc.cameras
        .iter()
        .map(|record| {
            if !seen.insert(record.id) {
                return Err(IoError::malformed(path, None, format!("duplicate camera id {}", record.id)));
            }
            record.to_camera().map_err(|e| IoError::malformed(path, None, e.to_string()))
        })
        .collect()
}

/// A joint map entry: `(x, y)` is the detected peak; blobs carry
/// `amplitude` and `sigma`, rasters a path relative to the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointEntry {
    joint: usize,
    x: f64,
    y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raster: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionEntry {
    index: u32,
    joints: Vec<JointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewEntry {
    camera: u32,
    detections: Vec<DetectionEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreMapDocument {
    schema: String,
    frame: usize,
    views: Vec<ViewEntry>,
}

/// Writes one frame of detections. Raster maps go to `.smap` files next to
/// the document.
pub fn write_scoremaps(path: &Path, frame: usize, maps: &ScoreMapSet) -> Result<(), IoError> {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut views = Vec::new();
    for (camera, detections) in maps.views() {
        let mut entries = Vec::new();
        for det in detections {
            let mut joints = Vec::new();
            for (j, map) in det.joints.iter().enumerate() {
                let Some(map) = map else { continue };
                let peak = map.peak();
                let mut entry = JointEntry {
                    joint: j,
                    x: peak.x,
                    y: peak.y,
                    amplitude: None,
                    sigma: None,
                    raster: None,
                };
                match map {
                    JointMap::Blob(b) => {
                        entry.amplitude = Some(b.amplitude);
                        entry.sigma = Some(b.sigma);
                    }
                    JointMap::Raster { raster, .. } => {
                        let name = format!("{stem}_c{camera}_d{}_j{j}.smap", det.index);
                        let joint = JointId::from_index(j).expect("joint index is canonical");
                        write_raster(&dir.join(&name), joint, raster)?;
                        entry.raster = Some(name);
                    }
                }
                joints.push(entry);
            }
            entries.push(DetectionEntry {
                index: det.index,
                joints,
            });
        }
        views.push(ViewEntry {
            camera,
            detections: entries,
        });
    }
    write_json(
        path,
        &ScoreMapDocument {
            schema: SCOREMAPS_SCHEMA.to_string(),
            frame,
            views,
        },
    )
}

pub fn read_scoremaps(path: &Path, frame: usize) -> Result<ScoreMapSet, IoError> {
    let doc: ScoreMapDocument = read_json(path, Some(frame))?;
    check_schema(path, Some(frame), &doc.schema, SCOREMAPS_SCHEMA)?;
    let bad = |message: String| IoError::malformed(path, Some(frame), message);
    if doc.frame != frame {
        return Err(bad(format!("document is for frame {}", doc.frame)));
    }
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut maps = ScoreMapSet::new();
    let mut cameras = BTreeSet::new();
    for view in doc.views {
        if !cameras.insert(view.camera) {
            return Err(bad(format!("camera {} listed twice", view.camera)));
        }
        let mut detections = Vec::new();
        for entry in view.detections {
            let mut det = Detection::new(entry.index);
            for joint in entry.joints {
                let slot = det
                    .joints
                    .get_mut(joint.joint)
                    .ok_or_else(|| bad(format!("joint index {}", joint.joint)))?;
                if slot.is_some() {
                    return Err(bad(format!("joint {} repeated in detection {}", joint.joint, entry.index)));
                }
                let peak = Point2::new(joint.x, joint.y);
                *slot = Some(match (&joint.raster, joint.amplitude, joint.sigma) {
                    (Some(file), None, None) => {
                        let (id, raster) = super::read_raster(&dir.join(file))?;
                        if id.index() != joint.joint {
                            return Err(bad(format!("raster {file} holds joint {}", id.index())));
                        }
                        JointMap::Raster {
                            peak,
                            raster: Arc::new(raster),
                        }
                    }
                    (None, Some(a), Some(s)) => JointMap::Blob(
                        DetectionBlob::new(peak, a, s)
                            .map_err(|e| bad(format!("camera {}, detection {}: {e}", view.camera, entry.index)))?,
                    ),
                    _ => return Err(bad("joint entry needs either a raster or amplitude and sigma".into())),
                });
            }
            detections.push(det);
        }
        maps.insert_view(view.camera, detections);
    }
    Ok(maps)
}

/// One reconstructed joint. `correspondences` holds `[camera, detection]`
/// pairs; `support` is their count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointRecord {
    pub position: [f64; 3],
    pub score: f64,
    pub refined: bool,
    pub support: usize,
    #[serde(default)]
    pub correspondences: Vec<[u64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel: Option<[f64; 3]>,
    #[serde(default)]
    pub proposal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonRecord {
    pub person: Option<u32>,
    pub score: f64,
    /// Canonical joint order; `null` for missing joints.
    pub joints: Vec<Option<JointRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonFrame {
    pub frame: usize,
    pub people: Vec<PersonRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonDocument {
    pub schema: String,
    pub frames: Vec<SkeletonFrame>,
}

fn arr(p: &Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

impl SkeletonDocument {
    pub fn from_frames(frames: &[Vec<Skeleton>]) -> Self {
        let frames = frames
            .iter()
            .enumerate()
            .map(|(frame, people)| SkeletonFrame {
                frame,
                people: people
                    .iter()
                    .map(|s| PersonRecord {
                        person: s.person,
                        score: s.score,
                        joints: s
                            .joints
                            .iter()
                            .map(|j| {
                                j.as_ref().map(|j| JointRecord {
                                    position: arr(&j.position),
                                    score: j.score,
                                    refined: j.refined,
                                    support: j.correspondences.len(),
                                    correspondences: j
                                        .correspondences
                                        .iter()
                                        .map(|c| [c.camera as u64, c.detection as u64])
                                        .collect(),
                                    voxel: (j.voxel_position != j.position).then(|| arr(&j.voxel_position)),
                                    proposal: j.proposal,
                                })
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            schema: SKELETONS_SCHEMA.to_string(),
            frames,
        }
    }

    /// Skeletons indexed by frame; frames absent from the document are empty.
    pub fn to_frames(&self) -> Vec<Vec<Skeleton>> {
        let len = self.frames.iter().map(|f| f.frame + 1).max().unwrap_or(0);
        let mut out = vec![Vec::new(); len];
        for f in &self.frames {
            out[f.frame] = f.people.iter().map(PersonRecord::to_skeleton).collect();
        }
        out
    }
}

impl PersonRecord {
    pub fn to_skeleton(&self) -> Skeleton {
        Skeleton {
            joints: self
                .joints
                .iter()
                .map(|j| {
                    j.as_ref().map(|j| {
                        let position = Point3::from(j.position);
                        SkeletonJoint {
                            proposal: j.proposal,
                            position,
                            voxel_position: j.voxel.map_or(position, Point3::from),
                            score: j.score,
                            refined: j.refined,
                            correspondences: j
                                .correspondences
                                .iter()
                                .map(|c| Correspondence {
                                    camera: c[0] as u32,
                                    detection: c[1] as usize,
                                })
                                .collect(),
                        }
                    })
                })
                .collect(),
            score: self.score,
            person: self.person,
        }
    }
}

pub fn write_skeletons(path: &Path, frames: &[Vec<Skeleton>]) -> Result<(), IoError> {
    write_json(path, &SkeletonDocument::from_frames(frames))
}

pub fn read_skeletons(path: &Path) -> Result<Vec<Vec<Skeleton>>, IoError> {
    let doc: SkeletonDocument = read_json(path, None)?;
    check_schema(path, None, &doc.schema, SKELETONS_SCHEMA)?;
    let mut seen = BTreeSet::new();
    for f in &doc.frames {
        let bad = |message: String| IoError::malformed(path, Some(f.frame), message);
        if !seen.insert(f.frame) {
            return Err(bad("frame listed twice".into()));
        }
        for p in &f.people {
            if p.joints.len() != NUM_JOINTS {
                return Err(bad(format!("{} joints, expected {NUM_JOINTS}", p.joints.len())));
            }
            for j in p.joints.iter().flatten() {
                if j.position.iter().any(|v| !v.is_finite()) {
                    return Err(bad("non-finite joint position".into()));
                }
                if j.support != j.correspondences.len() && !j.correspondences.is_empty() {
                    return Err(bad("support disagrees with the correspondence list".into()));
                }
            }
        }
    }
    Ok(doc.to_frames())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchLabelDocument {
    schema: String,
    labels: Vec<PatchLabel>,
}

pub fn write_patch_labels(path: &Path, labels: &[PatchLabel]) -> Result<(), IoError> {
    write_json(
        path,
        &PatchLabelDocument {
            schema: PATCH_LABELS_SCHEMA.to_string(),
            labels: labels.to_vec(),
        },
    )
}

pub fn read_patch_labels(path: &Path) -> Result<Vec<PatchLabel>, IoError> {
    let doc: PatchLabelDocument = read_json(path, None)?;
    check_schema(path, None, &doc.schema, PATCH_LABELS_SCHEMA)?;
    Ok(doc.labels)
}
