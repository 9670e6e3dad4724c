//! Per-view 2D joint score maps.
//!
//! Each 2D person detection carries, per joint, a peak location `s_ij` and a
//! confidence map `h_ij(z)`. Maps are either isotropic Gaussian blobs (the
//! compact synthetic representation) or dense rasters read from disk.

use crate::body::{JointId, NUM_JOINTS};
use crate::geometry::{Camera, Point2};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

/// Blobs are truncated to zero beyond this many standard deviations
/// (`exp(-8) ≈ 3.4e-4`, far below any useful threshold).
pub const BLOB_SUPPORT_SIGMAS: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreMapError {
    #[error("blob amplitude {0} outside [0, 1]")]
    Amplitude(f64),
    #[error("blob spread {0} must be positive")]
    Spread(f64),
    #[error("view {camera}: joint peak ({x}, {y}) outside the image")]
    PeakOutsideImage { camera: u32, x: f64, y: f64 },
    #[error("score maps reference unknown camera {0}")]
    UnknownCamera(u32),
    #[error("raster of {width}x{height} has {len} values")]
    RasterSize { width: u32, height: u32, len: usize },
}

/// Gaussian blob `h(z) = a·exp(-|z - μ|² / 2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBlob {
    pub peak: Point2,
    pub amplitude: f64,
    pub sigma: f64,
}

impl DetectionBlob {
    pub fn new(peak: Point2, amplitude: f64, sigma: f64) -> Result<Self, ScoreMapError> {
        if !(0.0..=1.0).contains(&amplitude) {
            return Err(ScoreMapError::Amplitude(amplitude));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ScoreMapError::Spread(sigma));
        }
        Ok(Self {
            peak,
            amplitude,
            sigma,
        })
    }

    pub fn support_radius(&self) -> f64 {
        BLOB_SUPPORT_SIGMAS * self.sigma
    }

    #[inline]
    pub fn evaluate(&self, z: &Point2) -> f64 {
        let dx = z.x - self.peak.x;
        let dy = z.y - self.peak.y;
        let d2 = dx * dx + dy * dy;
        let s2 = self.sigma * self.sigma;
        if d2 > BLOB_SUPPORT_SIGMAS * BLOB_SUPPORT_SIGMAS * s2 {
            0.0
        } else {
            self.amplitude * (-d2 / (2.0 * s2)).exp()
        }
    }
}

/// Dense per-pixel confidence raster, row-major, pixel centres at integer
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRaster {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl ScoreRaster {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, ScoreMapError> {
        if values.len() != width as usize * height as usize {
            return Err(ScoreMapError::RasterSize {
                width,
                height,
                len: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width as usize + x].clamp(0.0, 1.0) as f64
    }

    /// Bilinear sample; zero outside the raster.
    pub fn sample(&self, z: &Point2) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(z.x >= 0.0 && z.y >= 0.0 && z.x <= w - 1.0 && z.y <= h - 1.0) {
            return 0.0;
        }
        let x0 = z.x.floor() as usize;
        let y0 = z.y.floor() as usize;
        let x1 = (x0 + 1).min(self.width as usize - 1);
        let y1 = (y0 + 1).min(self.height as usize - 1);
        let fx = z.x - x0 as f64;
        let fy = z.y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Pixel with the highest value (first in row-major order on ties).
    pub fn peak(&self) -> Option<(Point2, f64)> {
        let mut best: Option<(usize, f32)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, v)| {
            let w = self.width as usize;
            (Point2::new((i % w) as f64, (i / w) as f64), v as f64)
        })
    }
}

/// The confidence function of one joint of one detection.
#[derive(Debug, Clone, PartialEq)]
pub enum JointMap {
    Blob(DetectionBlob),
    Raster { peak: Point2, raster: Arc<ScoreRaster> },
}

impl JointMap {
    /// The detected 2D joint location `s_ij`.
    pub fn peak(&self) -> Point2 {
        match self {
            JointMap::Blob(b) => b.peak,
            JointMap::Raster { peak, .. } => *peak,
        }
    }

    #[inline]
    pub fn evaluate(&self, z: &Point2) -> f64 {
        match self {
            JointMap::Blob(b) => b.evaluate(z),
            JointMap::Raster { raster, .. } => raster.sample(z),
        }
    }
}

/// One 2D person detection: up to one map per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub index: u32,
    pub joints: [Option<JointMap>; NUM_JOINTS],
}

impl Detection {
    pub fn new(index: u32) -> Self {
        Self {
            index,
            joints: std::array::from_fn(|_| None),
        }
    }

    pub fn joint(&self, joint: usize) -> Option<&JointMap> {
        self.joints.get(joint).and_then(|j| j.as_ref())
    }

    /// `h_ij(z)`; zero when the detection has no map for the joint.
    #[inline]
    pub fn score(&self, joint: usize, z: &Point2) -> f64 {
        self.joint(joint).map_or(0.0, |m| m.evaluate(z))
    }

    pub fn blob_count(&self) -> usize {
        self.joints.iter().filter(|j| j.is_some()).count()
    }
}

/// Detections of one frame, keyed by camera id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreMapSet {
    views: BTreeMap<u32, Vec<Detection>>,
}

impl ScoreMapSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_view(&mut self, camera: u32, detections: Vec<Detection>) {
        self.views.insert(camera, detections);
    }

    pub fn view(&self, camera: u32) -> &[Detection] {
        self.views.get(&camera).map_or(&[], |v| v.as_slice())
    }

    pub fn views(&self) -> impl Iterator<Item = (u32, &[Detection])> {
        self.views.iter().map(|(&c, d)| (c, d.as_slice()))
    }

    pub fn views_mut(&mut self) -> impl Iterator<Item = (u32, &mut Vec<Detection>)> {
        self.views.iter_mut().map(|(&c, d)| (c, d))
    }

    pub fn is_empty(&self) -> bool {
        self.views.values().all(|d| d.is_empty())
    }

    pub fn total_blobs(&self) -> usize {
        self.views.values().flatten().map(Detection::blob_count).sum()
    }

    /// Keeps only the views of the listed cameras.
    pub fn restricted_to(&self, cameras: &[Camera]) -> ScoreMapSet {
        let keep: std::collections::BTreeSet<u32> = cameras.iter().map(Camera::id).collect();
        ScoreMapSet {
            views: self
                .views
                .iter()
                .filter(|(c, _)| keep.contains(c))
                .map(|(&c, d)| (c, d.clone()))
                .collect(),
        }
    }

    /// Checks blob invariants against the camera set.
    pub fn validate(&self, cameras: &[Camera]) -> Result<(), ScoreMapError> {
        for (&cam_id, detections) in &self.views {
            let cam = cameras
                .iter()
                .find(|c| c.id() == cam_id)
                .ok_or(ScoreMapError::UnknownCamera(cam_id))?;
            for map in detections.iter().flat_map(|d| d.joints.iter().flatten()) {
                if let JointMap::Blob(b) = map {
                    DetectionBlob::new(b.peak, b.amplitude, b.sigma)?;
                }
                let p = map.peak();
                if !cam.in_bounds(&p) {
                    return Err(ScoreMapError::PeakOutsideImage {
                        camera: cam_id,
                        x: p.x,
                        y: p.y,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Builds a detection from a dense raster per joint; the peak of each raster
/// stands in for the detected 2D joint location.
pub fn detection_from_rasters(index: u32, rasters: Vec<(JointId, ScoreRaster)>) -> Detection {
    let mut det = Detection::new(index);
    for (joint, raster) in rasters {
        if let Some((peak, _)) = raster.peak() {
            det.joints[joint.index()] = Some(JointMap::Raster {
                peak,
                raster: Arc::new(raster),
            });
        }
    }
    det
}

/// `h_j^c(z) = max_i h_ij^c(z)`; zero when the view has no detections.
pub fn merged_score(maps: &ScoreMapSet, view: u32, joint: JointId, z: &Point2) -> f64 {
    maps.view(view)
        .iter()
        .map(|d| d.score(joint.index(), z))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn blob_detection(index: u32, joint: JointId, peak: Point2, a: f64, sigma: f64) -> Detection {
        let mut d = Detection::new(index);
        d.joints[joint.index()] = Some(JointMap::Blob(DetectionBlob::new(peak, a, sigma).unwrap()));
        d
    }

    #[test]
    fn merged_score_takes_max_over_detections() {
        let mut maps = ScoreMapSet::new();
        let p = Point2::new(100.0, 100.0);
        maps.insert_view(
            0,
            vec![
                blob_detection(0, JointId::Neck, p, 0.8, 3.0),
                blob_detection(1, JointId::Neck, p, 0.5, 3.0),
            ],
        );
        assert_eq!(merged_score(&maps, 0, JointId::Neck, &p), 0.8);
    }

    #[test]
    fn empty_view_scores_zero() {
        let maps = ScoreMapSet::new();
        assert_eq!(merged_score(&maps, 3, JointId::Neck, &Point2::new(5.0, 5.0)), 0.0);
    }

    #[test]
    fn gaussian_falloff() {
        let mut maps = ScoreMapSet::new();
        maps.insert_view(0, vec![blob_detection(0, JointId::WristL, Point2::new(50.0, 50.0), 1.0, 3.0)]);
        let v = merged_score(&maps, 0, JointId::WristL, &Point2::new(53.0, 50.0));
        assert_abs_diff_eq!(v, (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.6065, epsilon = 1e-4);
        // truncated support
        assert_eq!(merged_score(&maps, 0, JointId::WristL, &Point2::new(50.0, 63.0)), 0.0);
        // other joints are unaffected
        assert_eq!(merged_score(&maps, 0, JointId::WristR, &Point2::new(50.0, 50.0)), 0.0);
    }

    #[test]
    fn blob_invariants() {
        assert!(DetectionBlob::new(Point2::origin(), 1.2, 3.0).is_err());
        assert!(DetectionBlob::new(Point2::origin(), 0.5, 0.0).is_err());
        assert!(DetectionBlob::new(Point2::origin(), 0.5, 1.0).is_ok());
    }

    #[test]
    fn raster_sampling_and_peak() {
        let mut values = vec![0.0f32; 16];
        values[5] = 1.0; // (1, 1)
        let r = ScoreRaster::new(4, 4, values).unwrap();
        assert_eq!(r.peak().unwrap().0, Point2::new(1.0, 1.0));
        assert_eq!(r.sample(&Point2::new(1.0, 1.0)), 1.0);
        assert_abs_diff_eq!(r.sample(&Point2::new(1.5, 1.0)), 0.5, epsilon = 1e-12);
        assert_eq!(r.sample(&Point2::new(-1.0, 1.0)), 0.0);
        assert!(ScoreRaster::new(4, 4, vec![0.0; 3]).is_err());
        let det = detection_from_rasters(0, vec![(JointId::Neck, r)]);
        assert_eq!(det.joint(0).unwrap().peak(), Point2::new(1.0, 1.0));
    }
}
