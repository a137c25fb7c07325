use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClipSource, MotionClip, RefPose, RobotGeometry};
use crate::error::{Error, Result};

/// On-disk clip layout: one `[root_x, root_z, pitch, j1, j2, j3, j4]` row per frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipFile {
    pub name: String,
    pub source: ClipSource,
    pub dt: f64,
    pub frames: Vec<[f64; 7]>,
}

impl ClipFile {
    pub fn from_clip(clip: &MotionClip) -> Self {
        Self {
            name: clip.name.clone(),
            source: clip.source,
            dt: clip.dt,
            frames: clip
                .frames
                .iter()
                .map(|f| [f.root_x, f.root_z, f.pitch, f.joints[0], f.joints[1], f.joints[2], f.joints[3]])
                .collect(),
        }
    }

    /// Build a validated clip; feet always come from forward kinematics.
    pub fn into_clip(self, geometry: &RobotGeometry) -> Result<MotionClip> {
        let frames = self
            .frames
            .iter()
            .map(|r| RefPose::new(r[0], r[1], r[2], [r[3], r[4], r[5], r[6]], geometry))
            .collect();
        let clip = MotionClip {
            name: self.name,
            source: self.source,
            dt: self.dt,
            frames,
        };
        clip.validate(geometry)?;
        Ok(clip)
    }
}

pub fn load_clip(path: impl AsRef<Path>, geometry: &RobotGeometry) -> Result<MotionClip> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ClipFile = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    file.into_clip(geometry)
}

pub fn save_clip(clip: &MotionClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&ClipFile::from_clip(clip))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
