//! Little-endian binary payloads.
//!
//! Depth (`DPTH`): magic, then u32 version, sensor id, frame, width, height,
//! then `width·height` f32 depths row-major (0 = missing).
//!
//! Score raster (`SMAP`): magic, then u32 version, width, height, joint, then
//! `width·height` f32 scores row-major.
//!
//! Patch stream (`PTRJ`): magic, u32 version, u64 count, then per trajectory
//! u64 id, u32 start frame, u32 length, and `length` records of six f64
//! (centre xyz, normal xyz).

use super::{read_bytes, write_bytes, IoError, BINARY_VERSION};
use crate::body::JointId;
use crate::geometry::{Camera, Point3};
use crate::scoremap::ScoreRaster;
use crate::trajectory::{DepthMap, PatchTrajectory};
use nalgebra::Vector3;
use std::path::Path;

pub const DEPTH_MAGIC: [u8; 4] = *b"DPTH";
pub const RASTER_MAGIC: [u8; 4] = *b"SMAP";
pub const PATCH_MAGIC: [u8; 4] = *b"PTRJ";

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
    frame: Option<usize>,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            at: 0,
            path,
            frame: None,
        }
    }

    fn error(&self, message: impl Into<String>) -> IoError {
        IoError::malformed(self.path, self.frame, message)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        let end = self.at + N;
        let chunk = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| self.error(format!("truncated at byte {}", self.at)))?;
        self.at = end;
        Ok(chunk.try_into().expect("slice has length N"))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), IoError> {
        let found = self.take::<4>()?;
        if found != expected {
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(&expected)
            )));
        }
        let version = self.u32()?;
        if version != BINARY_VERSION {
            return Err(self.error(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        self.take().map(u64::from_le_bytes)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, IoError> {
        (0..n).map(|_| self.take().map(f32::from_le_bytes)).collect()
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        self.take().map(f64::from_le_bytes)
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.at == self.bytes.len() {
            Ok(())
        } else {
            Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.at)))
        }
    }
}

fn header(magic: [u8; 4], fields: &[u32]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend(BINARY_VERSION.to_le_bytes());
    for f in fields {
        out.extend(f.to_le_bytes());
    }
    out
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    let mut out = header(
        DEPTH_MAGIC,
        &[
            depth.camera().id(),
            depth.frame() as u32,
            depth.width() as u32,
            depth.height() as u32,
        ],
    );
    for v in depth.values() {
        out.extend(v.to_le_bytes());
    }
    write_bytes(path, &out)
}

/// Reads a depth map; the sensor id in the header selects its calibration.
pub fn read_depth(path: &Path, sensors: &[Camera]) -> Result<DepthMap, IoError> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(DEPTH_MAGIC)?;
    let sensor = r.u32()?;
    let frame = r.u32()? as usize;
    r.frame = Some(frame);
    let (width, height) = (r.u32()?, r.u32()?);
    let camera = sensors
        .iter()
        .find(|c| c.id() == sensor)
        .ok_or_else(|| r.error(format!("unknown depth sensor {sensor}")))?;
    if (camera.width(), camera.height()) != (width, height) {
        return Err(r.error(format!(
            "{width}x{height} raster for a {}x{} sensor",
            camera.width(),
            camera.height()
        )));
    }
    let values = r.f32s(width as usize * height as usize)?;
    r.finish()?;
    DepthMap::new(camera.clone(), frame, values).map_err(|e| r.error(e.to_string()))
}

pub fn write_raster(path: &Path, joint: JointId, raster: &ScoreRaster) -> Result<(), IoError> {
    let mut out = header(RASTER_MAGIC, &[raster.width(), raster.height(), joint.index() as u32]);
    for v in raster.values() {
        out.extend(v.to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_raster(path: &Path) -> Result<(JointId, ScoreRaster), IoError> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(RASTER_MAGIC)?;
    let (width, height, joint) = (r.u32()?, r.u32()?, r.u32()?);
    let joint = JointId::from_index(joint as usize).ok_or_else(|| r.error(format!("joint index {joint}")))?;
    let values = r.f32s(width as usize * height as usize)?;
    r.finish()?;
    let raster = ScoreRaster::new(width, height, values).map_err(|e| r.error(e.to_string()))?;
    Ok((joint, raster))
}

pub fn write_patch_stream(path: &Path, stream: &[PatchTrajectory]) -> Result<(), IoError> {
    let mut out = PATCH_MAGIC.to_vec();
    out.extend(BINARY_VERSION.to_le_bytes());
    out.extend((stream.len() as u64).to_le_bytes());
    for traj in stream {
        out.extend(traj.id.to_le_bytes());
        out.extend((traj.start_frame as u32).to_le_bytes());
        out.extend((traj.centers.len() as u32).to_le_bytes());
        for (c, n) in traj.centers.iter().zip(&traj.normals) {
            for v in c.iter().chain(n.iter()) {
                out.extend(v.to_le_bytes());
            }
        }
    }
    write_bytes(path, &out)
}

pub fn read_patch_stream(path: &Path) -> Result<Vec<PatchTrajectory>, IoError> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(PATCH_MAGIC)?;
    let count = r.u64()?;
    let mut stream = Vec::new();
    for _ in 0..count {
        let id = r.u64()?;
        let start_frame = r.u32()? as usize;
        let len = r.u32()? as usize;
        r.frame = Some(start_frame);
        let mut centers = Vec::with_capacity(len);
        let mut normals = Vec::with_capacity(len);
        for _ in 0..len {
            let mut v = [0.0; 6];
            for x in &mut v {
                *x = r.f64()?;
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(r.error(format!("patch {id}: non-finite sample")));
            }
            centers.push(Point3::new(v[0], v[1], v[2]));
            normals.push(Vector3::new(v[3], v[4], v[5]));
        }
        r.frame = None;
        stream.push(PatchTrajectory {
            id,
            start_frame,
            centers,
            normals,
        });
    }
    r.finish()?;
    Ok(stream)
}
