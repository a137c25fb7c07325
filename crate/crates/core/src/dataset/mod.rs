//! Reference motion clips: poses, clip files, synthetic generators and
//! the time-indexed segments the encoder consumes.

mod io;
pub mod kinematics;
mod synth;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use io::{load_clip, save_clip, ClipFile};
pub use kinematics::{foot_fk, leg_ik, RobotGeometry};
pub use synth::{generate_synthetic_clip, standard_menu, SynthKind, SynthParams};

use crate::error::{Error, Result};

/// Offsets (in control steps) of the future frames in a segment.
pub const SEGMENT_OFFSETS: [usize; 4] = [1, 2, 10, 30];

/// Minimum clip length in frames; a full segment exists at `t = 0`.
pub const MIN_FRAMES: usize = 31;

/// Maximum root displacement allowed between consecutive frames.
pub const MAX_FRAME_JUMP: f64 = 0.5;

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// One reference pose. Pitch is stored unwrapped so flips survive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefPose {
    pub root_x: f64,
    pub root_z: f64,
    pub pitch: f64,
    pub joints: [f64; 4],
    /// Front then rear foot, always derived by forward kinematics.
    pub feet: [[f64; 2]; 2],
}

impl RefPose {
    pub fn new(root_x: f64, root_z: f64, pitch: f64, joints: [f64; 4], geometry: &RobotGeometry) -> Self {
        Self {
            root_x,
            root_z,
            pitch,
            joints,
            feet: foot_fk(root_x, root_z, pitch, &joints, geometry),
        }
    }

    pub fn recompute_feet(&mut self, geometry: &RobotGeometry) {
        self.feet = foot_fk(self.root_x, self.root_z, self.pitch, &self.joints, geometry);
    }

    pub fn airborne(&self) -> bool {
        self.feet.iter().all(|f| f[1] > 0.0)
    }
}

/// Where a clip came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSource {
    MocapLike,
    Synthetic,
    Optimized,
}

impl ClipSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ClipSource::MocapLike => "mocap_like",
            ClipSource::Synthetic => "synthetic",
            ClipSource::Optimized => "optimized",
        }
    }
}

/// Finite-difference velocities of a reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RefVelocity {
    pub vx: f64,
    pub vz: f64,
    pub pitch_rate: f64,
    pub joint_vels: [f64; 4],
}

/// A named, fixed-rate sequence of reference poses (`T + 1` frames).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub name: String,
    pub source: ClipSource,
    pub dt: f64,
    pub frames: Vec<RefPose>,
}

impl MotionClip {
    /// Index of the last frame, `T`.
    pub fn last_index(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn duration(&self) -> f64 {
        self.last_index() as f64 * self.dt
    }

    /// Check every clip invariant. Feet must already be FK-consistent.
    pub fn validate(&self, geometry: &RobotGeometry) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Validation(format!("clip '{}': dt must be positive, got {}", self.name, self.dt)));
        }
        if self.frames.len() < MIN_FRAMES {
            return Err(Error::Validation(format!(
                "clip '{}': {} frames, need at least {MIN_FRAMES}",
                self.name,
                self.frames.len()
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let values = [f.root_x, f.root_z, f.pitch, f.joints[0], f.joints[1], f.joints[2], f.joints[3]];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidFrame { frame: i, message: "non-finite value".into() });
            }
            if !geometry.joints_within_limits(&f.joints, 1e-9) {
                return Err(Error::InvalidFrame {
                    frame: i,
                    message: format!("joints {:?} outside limits", f.joints),
                });
            }
            let fk = foot_fk(f.root_x, f.root_z, f.pitch, &f.joints, geometry);
            let fk_err = fk
                .iter()
                .flatten()
                .zip(f.feet.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if fk_err > 1e-9 {
                return Err(Error::InvalidFrame { frame: i, message: format!("feet disagree with FK by {fk_err}") });
            }
            if i > 0 {
                let p = &self.frames[i - 1];
                let jump = (f.root_x - p.root_x).hypot(f.root_z - p.root_z);
                if jump >= MAX_FRAME_JUMP {
                    return Err(Error::InvalidFrame { frame: i, message: format!("root jumps {jump} m from previous frame") });
                }
            }
        }
        Ok(())
    }

    /// Central-difference velocities at frame `t` (one-sided at the ends).
    pub fn velocity(&self, t: usize) -> RefVelocity {
        let last = self.last_index();
        let (a, b) = match t {
            0 => (0, 1),
            t if t >= last => (last - 1, last),
            t => (t - 1, t + 1),
        };
        let span = (b - a) as f64 * self.dt;
        let fa = &self.frames[a];
        let fb = &self.frames[b];
        let mut joint_vels = [0.0; 4];
        for (j, v) in joint_vels.iter_mut().enumerate() {
            *v = (fb.joints[j] - fa.joints[j]) / span;
        }
        RefVelocity {
            vx: (fb.root_x - fa.root_x) / span,
            vz: (fb.root_z - fa.root_z) / span,
            pitch_rate: (fb.pitch - fa.pitch) / span,
            joint_vels,
        }
    }
}

/// The four future reference frames the encoder sees at step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSegment {
    pub frames: [RefPose; 4],
    pub clip_id: usize,
    pub t: usize,
}

/// Frames at `min(t + k, T)` for `k` in [`SEGMENT_OFFSETS`].
pub fn extract_segment(clip: &MotionClip, clip_id: usize, t: usize) -> Result<MotionSegment> {
    let last = clip.last_index();
    if t > last {
        return Err(Error::Index { index: t, max: last });
    }
    let frames = SEGMENT_OFFSETS.map(|k| clip.frames[(t + k).min(last)]);
    Ok(MotionSegment { frames, clip_id, t })
}

/// Resample a clip to `target_dt` with linear interpolation of root and
/// joints and shortest-arc interpolation of pitch.
pub fn resample_clip(clip: &MotionClip, target_dt: f64, geometry: &RobotGeometry) -> Result<MotionClip> {
    if !(target_dt.is_finite() && target_dt > 0.0) {
        return Err(Error::Validation(format!("target dt must be positive, got {target_dt}")));
    }
    if target_dt == clip.dt {
        return Ok(clip.clone());
    }
    let duration = clip.duration();
    let count = (duration / target_dt + 1e-9).floor() as usize + 1;
    let last = clip.last_index();
    let mut frames = Vec::with_capacity(count);
    let mut unwrapped_prev: Option<f64> = None;
    for i in 0..count {
        let pos = i as f64 * target_dt / clip.dt;
        let mut i0 = pos.floor() as usize;
        let mut frac = pos - i0 as f64;
        if frac > 1.0 - 1e-9 {
            i0 += 1;
            frac = 0.0;
        }
        let pose = if i0 >= last || frac < 1e-9 {
            clip.frames[i0.min(last)]
        } else {
            let a = &clip.frames[i0];
            let b = &clip.frames[i0 + 1];
            let lerp = |x: f64, y: f64| x + frac * (y - x);
            let mut joints = [0.0; 4];
            for (j, q) in joints.iter_mut().enumerate() {
                *q = lerp(a.joints[j], b.joints[j]);
            }
            let pitch = a.pitch + frac * wrap_angle(b.pitch - a.pitch);
            RefPose::new(lerp(a.root_x, b.root_x), lerp(a.root_z, b.root_z), pitch, joints, geometry)
        };
        // keep pitch continuous across source frames
        let mut pose = pose;
        if let Some(prev) = unwrapped_prev {
            pose.pitch = prev + wrap_angle(pose.pitch - prev);
        }
        unwrapped_prev = Some(pose.pitch);
        pose.recompute_feet(geometry);
        frames.push(pose);
    }
    Ok(MotionClip {
        name: clip.name.clone(),
        source: clip.source,
        dt: target_dt,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_clip(frames: usize) -> MotionClip {
        let g = RobotGeometry::default();
        let pose = RefPose::new(0.0, g.standing_height(), 0.0, g.standing_joints(), &g);
        MotionClip {
            name: "stand".into(),
            source: ClipSource::Synthetic,
            dt: 0.02,
            frames: vec![pose; frames],
        }
    }

    fn indexed_clip(frames: usize) -> MotionClip {
        let g = RobotGeometry::default();
        let mut clip = constant_clip(frames);
        for (i, f) in clip.frames.iter_mut().enumerate() {
            f.root_x = i as f64 * 1e-3;
            f.recompute_feet(&g);
        }
        clip
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(-6.183) - (-6.183 + 2.0 * PI)).abs() < 1e-12);
        assert!(wrap_angle(4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn segment_at_start() {
        let clip = indexed_clip(201);
        let seg = extract_segment(&clip, 0, 0).unwrap();
        let idx: Vec<usize> = seg.frames.iter().map(|f| (f.root_x * 1e3).round() as usize).collect();
        assert_eq!(idx, vec![1, 2, 10, 30]);
    }

    #[test]
    fn segment_clamps_at_end() {
        let clip = indexed_clip(201);
        let idx = |t| -> Vec<usize> {
            extract_segment(&clip, 0, t)
                .unwrap()
                .frames
                .iter()
                .map(|f| (f.root_x * 1e3).round() as usize)
                .collect()
        };
        assert_eq!(idx(195), vec![196, 197, 200, 200]);
        assert_eq!(idx(200), vec![200, 200, 200, 200]);
    }

    #[test]
    fn segment_out_of_range() {
        let clip = indexed_clip(201);
        assert!(matches!(extract_segment(&clip, 0, 201), Err(Error::Index { index: 201, max: 200 })));
    }

    #[test]
    fn validation_rejects_bad_dt_and_short_clips() {
        let g = RobotGeometry::default();
        let mut clip = constant_clip(31);
        assert!(clip.validate(&g).is_ok());
        clip.dt = 0.0;
        assert!(matches!(clip.validate(&g), Err(Error::Validation(_))));
        assert!(matches!(constant_clip(30).validate(&g), Err(Error::Validation(_))));
    }

    #[test]
    fn validation_names_discontinuous_frame() {
        let g = RobotGeometry::default();
        let mut clip = constant_clip(40);
        for f in clip.frames.iter_mut().skip(12) {
            f.root_x += 0.6;
            f.recompute_feet(&g);
        }
        assert!(matches!(clip.validate(&g), Err(Error::InvalidFrame { frame: 12, .. })));
    }

    #[test]
    fn resample_identity() {
        let g = RobotGeometry::default();
        let clip = indexed_clip(50);
        assert_eq!(resample_clip(&clip, 0.02, &g).unwrap(), clip);
    }

    fn two_frame(x: [f64; 2], pitch: [f64; 2]) -> MotionClip {
        let g = RobotGeometry::default();
        let j = g.standing_joints();
        MotionClip {
            name: "two".into(),
            source: ClipSource::Synthetic,
            dt: 1.0,
            frames: vec![RefPose::new(x[0], 0.3, pitch[0], j, &g), RefPose::new(x[1], 0.3, pitch[1], j, &g)],
        }
    }

    #[test]
    fn resample_linear_midpoint() {
        let g = RobotGeometry::default();
        let out = resample_clip(&two_frame([0.0, 1.0], [0.0, 0.0]), 0.5, &g).unwrap();
        let xs: Vec<f64> = out.frames.iter().map(|f| f.root_x).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn resample_pitch_takes_shortest_arc() {
        let g = RobotGeometry::default();
        let out = resample_clip(&two_frame([0.0, 0.0], [3.0, -3.0]), 0.5, &g).unwrap();
        // oracle: the wrapped midpoint of 3 and -3 is pi, the linear one is 0
        let mid = out.frames[1].pitch;
        assert!((wrap_angle(mid).abs() - PI).abs() < 1e-12, "mid pitch {mid}");
        let end = out.frames[2].pitch;
        assert!((wrap_angle(end) - wrap_angle(-3.0)).abs() < 1e-12);
    }

    #[test]
    fn resample_preserves_duration() {
        let g = RobotGeometry::default();
        let clip = indexed_clip(101);
        for dt in [0.015, 0.03, 0.007] {
            let out = resample_clip(&clip, dt, &g).unwrap();
            assert!((out.duration() - clip.duration()).abs() <= dt);
            out.validate(&g).unwrap();
        }
    }

    #[test]
    fn velocity_of_linear_motion() {
        let clip = indexed_clip(40);
        for t in [0, 10, 39] {
            assert!((clip.velocity(t).vx - 0.05).abs() < 1e-9);
        }
    }
}
