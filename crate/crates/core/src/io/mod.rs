//! On-disk formats: versioned JSON documents for metadata and little-endian
//! binaries for numeric payloads.
//!
//! A dataset directory looks like
//!
//! ```text
//! calibration.json            cameras (calibration/v1)
//! depth_calibration.json      depth sensors (calibration/v1)
//! scoremaps/frame_000000.json detections per frame (scoremaps/v1)
//! depth/frame_000000_sensor_10000.dpth
//! patches.ptrj                tracked surface patches
//! ground_truth.json           reference skeletons (skeletons/v1)
//! patch_labels_gt.json        generating bone of every patch (patch-labels/v1)
//! ```

mod binary;
mod documents;

pub use binary::{
    read_depth, read_patch_stream, read_raster, write_depth, write_patch_stream, write_raster, DEPTH_MAGIC,
    PATCH_MAGIC, RASTER_MAGIC,
};
pub use documents::{
    read_calibration, read_patch_labels, read_scoremaps, read_skeletons, write_calibration, write_patch_labels,
    write_scoremaps, write_skeletons, CameraRecord, JointRecord, PersonRecord, SkeletonDocument, SkeletonFrame,
    CALIBRATION_SCHEMA, PATCH_LABELS_SCHEMA, SCOREMAPS_SCHEMA, SKELETONS_SCHEMA,
};

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};

pub const BINARY_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", Location(path, *frame))]
    Malformed {
        path: PathBuf,
        frame: Option<usize>,
        message: String,
    },
}

struct Location<'a>(&'a PathBuf, Option<usize>);

impl fmt::Display for Location<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.1 {
            Some(frame) => write!(f, "{} (frame {frame})", self.0.display()),
            None => write!(f, "{}", self.0.display()),
        }
    }
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn malformed(path: &Path, frame: Option<usize>, message: impl Into<String>) -> Self {
        IoError::Malformed {
            path: path.to_path_buf(),
            frame,
            message: message.into(),
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            IoError::Io { path, .. } | IoError::Malformed { path, .. } => path,
        }
    }
}

/// File names inside a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }

    pub fn depth_calibration(&self) -> PathBuf {
        self.root.join("depth_calibration.json")
    }

    pub fn scoremaps_dir(&self) -> PathBuf {
        self.root.join("scoremaps")
    }

    pub fn scoremaps(&self, frame: usize) -> PathBuf {
        scoremap_file(&self.scoremaps_dir(), frame)
    }

    pub fn depth_dir(&self) -> PathBuf {
        self.root.join("depth")
    }

    pub fn depth(&self, frame: usize, sensor: u32) -> PathBuf {
        self.depth_dir().join(format!("frame_{frame:06}_sensor_{sensor}.dpth"))
    }

    pub fn patches(&self) -> PathBuf {
        self.root.join("patches.ptrj")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.json")
    }

    pub fn patch_labels(&self) -> PathBuf {
        self.root.join("patch_labels_gt.json")
    }

    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.json")
    }
}

pub fn scoremap_file(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("frame_{frame:06}.json"))
}

/// Frames that have a score-map document in `dir`, in increasing order.
pub fn scoremap_frames(dir: &Path) -> Result<Vec<usize>, IoError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| IoError::io(dir, e))? {
        let entry = entry.map_err(|e| IoError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".json")) {
            let frame = n
                .parse()
                .map_err(|_| IoError::malformed(&entry.path(), None, "unrecognised frame file name"))?;
            frames.push(frame);
        }
    }
    frames.sort_unstable();
    Ok(frames)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    Ok(())
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| IoError::malformed(path, None, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, frame: Option<usize>) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::malformed(path, frame, e.to_string()))
}

pub(crate) fn check_schema(path: &Path, frame: Option<usize>, found: &str, expected: &str) -> Result<(), IoError> {
    if found == expected {
        Ok(())
    } else {
        Err(IoError::malformed(
            path,
            frame,
            format!("unsupported schema {found:?}, expected {expected:?}"),
        ))
    }
}
