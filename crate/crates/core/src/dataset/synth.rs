//! Parameterized generators for planar reference motions.
//!
//! Root trajectories are built first, feet are placed on the ground during
//! stance and swung or tucked otherwise, and joints come from leg IK.

use std::f64::consts::PI;

use super::kinematics::leg_ik;
use super::{ClipSource, MotionClip, RefPose, RobotGeometry};
use crate::error::{Error, Result};

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthKind {
    Stand,
    Walk,
    TrotLike,
    Hop,
    JumpForward,
    Backflip,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "stand" => SynthKind::Stand,
            "walk" => SynthKind::Walk,
            "trot_like" | "trot-like" => SynthKind::TrotLike,
            "hop" => SynthKind::Hop,
            "jump_forward" | "jump-forward" => SynthKind::JumpForward,
            "backflip" => SynthKind::Backflip,
            other => return Err(Error::Validation(format!("unknown clip kind '{other}'"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Stand => "stand",
            SynthKind::Walk => "walk",
            SynthKind::TrotLike => "trot_like",
            SynthKind::Hop => "hop",
            SynthKind::JumpForward => "jump_forward",
            SynthKind::Backflip => "backflip",
        }
    }

    fn source(self) -> ClipSource {
        match self {
            SynthKind::Walk | SynthKind::TrotLike => ClipSource::MocapLike,
            SynthKind::Stand | SynthKind::Hop => ClipSource::Synthetic,
            SynthKind::JumpForward | SynthKind::Backflip => ClipSource::Optimized,
        }
    }
}

/// Gait parameters. Fields a kind does not use are ignored.
///
/// Ranges: walk speed 0..=2 m/s, trot-like 0..=2.5 m/s, hop 0..=1.5 m/s;
/// jump distance 0..=1.2 m with apex 0.45..=0.8 m; backflip apex 0.5..=0.9 m;
/// dt in (0, 0.05]; duration up to 60 s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub speed: f64,
    pub duration: f64,
    pub dt: f64,
    pub apex_height: f64,
    pub distance: f64,
}

impl SynthParams {
    pub fn defaults(kind: SynthKind) -> Self {
        let base = SynthParams {
            speed: 0.0,
            duration: 4.0,
            dt: 0.02,
            apex_height: 0.0,
            distance: 0.0,
        };
        match kind {
            SynthKind::Stand => SynthParams { duration: 2.0, ..base },
            SynthKind::Walk => SynthParams { speed: 1.0, ..base },
            SynthKind::TrotLike => SynthParams { speed: 1.2, ..base },
            SynthKind::Hop => SynthParams { speed: 0.3, ..base },
            SynthKind::JumpForward => SynthParams {
                duration: 0.0,
                apex_height: 0.55,
                distance: 0.6,
                ..base
            },
            SynthKind::Backflip => SynthParams {
                duration: 0.0,
                apex_height: 0.6,
                ..base
            },
        }
    }

    fn check(&self, kind: SynthKind) -> Result<()> {
        let range = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(Error::Validation(format!("{} {name}={v} outside [{lo}, {hi}]", kind.as_str())))
            }
        };
        if !(self.dt > 0.0 && self.dt <= 0.05) {
            return Err(Error::Validation(format!("dt={} outside (0, 0.05]", self.dt)));
        }
        range("duration", self.duration, 0.0, 60.0)?;
        match kind {
            SynthKind::Stand => Ok(()),
            SynthKind::Walk => range("speed", self.speed, 0.0, 2.0),
            SynthKind::TrotLike => range("speed", self.speed, 0.0, 2.5),
            SynthKind::Hop => range("speed", self.speed, 0.0, 1.5),
            SynthKind::JumpForward => {
                range("distance", self.distance, 0.0, 1.2)?;
                range("apex_height", self.apex_height, 0.45, 0.8)
            }
            SynthKind::Backflip => range("apex_height", self.apex_height, 0.5, 0.9),
        }
    }
}

/// The fixed generator menu behind `gen-dataset`: name, kind, parameters.
pub fn standard_menu() -> Vec<(String, SynthKind, SynthParams)> {
    let walk = SynthParams::defaults(SynthKind::Walk);
    vec![
        ("stand".into(), SynthKind::Stand, SynthParams::defaults(SynthKind::Stand)),
        ("walk_slow".into(), SynthKind::Walk, SynthParams { speed: 0.5, ..walk }),
        ("walk_fast".into(), SynthKind::Walk, walk),
        ("trot_like".into(), SynthKind::TrotLike, SynthParams::defaults(SynthKind::TrotLike)),
        ("hop".into(), SynthKind::Hop, SynthParams::defaults(SynthKind::Hop)),
        ("jump_forward".into(), SynthKind::JumpForward, SynthParams::defaults(SynthKind::JumpForward)),
        ("backflip".into(), SynthKind::Backflip, SynthParams::defaults(SynthKind::Backflip)),
    ]
}

/// Target root and foot placement for one frame, before IK.
struct FrameTarget {
    root_x: f64,
    root_z: f64,
    pitch: f64,
    feet: [[f64; 2]; 2],
}

pub fn generate_synthetic_clip(kind: SynthKind, params: &SynthParams, geometry: &RobotGeometry) -> Result<MotionClip> {
    params.check(kind)?;
    geometry.validate()?;
    let targets = match kind {
        SynthKind::Stand => stand(params, geometry),
        SynthKind::Walk => periodic_gait(params, geometry, 0.65, 0.6, 0.25, 0.04, 0.0),
        SynthKind::TrotLike => periodic_gait(params, geometry, 0.5, 0.4, 0.3, 0.06, 0.008),
        SynthKind::Hop => hop(params, geometry),
        SynthKind::JumpForward => ballistic_jump(params, geometry, params.distance, false),
        SynthKind::Backflip => ballistic_jump(params, geometry, 0.0, true),
    };
    let frames = targets.iter().map(|t| solve_frame(t, geometry)).collect();
    let clip = MotionClip {
        name: kind.as_str().to_string(),
        source: kind.source(),
        dt: params.dt,
        frames,
    };
    clip.validate(geometry)?;
    Ok(clip)
}

fn solve_frame(t: &FrameTarget, geometry: &RobotGeometry) -> RefPose {
    let mut joints = [0.0; 4];
    for leg in 0..2 {
        let hip = geometry.hip(t.root_x, t.root_z, t.pitch, leg);
        let (h, k) = leg_ik(hip, t.feet[leg], t.pitch, geometry);
        joints[2 * leg] = h;
        joints[2 * leg + 1] = k;
    }
    geometry.clamp_joints(&mut joints);
    RefPose::new(t.root_x, t.root_z, t.pitch, joints, geometry)
}

fn frame_count(duration: f64, dt: f64) -> usize {
    ((duration / dt).round() as usize + 1).max(super::MIN_FRAMES)
}

fn stand(params: &SynthParams, geometry: &RobotGeometry) -> Vec<FrameTarget> {
    let h = geometry.standing_height();
    (0..frame_count(params.duration, params.dt))
        .map(|_| FrameTarget {
            root_x: 0.0,
            root_z: h,
            pitch: 0.0,
            feet: [[geometry.d, 0.0], [-geometry.d, 0.0]],
        })
        .collect()
}

/// Two-beat gait: front and rear feet half a period apart.
fn periodic_gait(
    params: &SynthParams,
    geometry: &RobotGeometry,
    duty: f64,
    base_period: f64,
    max_stride: f64,
    swing_height: f64,
    bob: f64,
) -> Vec<FrameTarget> {
    let speed = params.speed;
    let period = if speed * base_period > max_stride { max_stride / speed } else { base_period };
    let height = geometry.standing_height() - 0.015;
    let half_stance = speed * duty * period / 2.0;
    (0..frame_count(params.duration, params.dt))
        .map(|i| {
            let t = i as f64 * params.dt;
            let root_x = speed * t;
            let root_z = height + bob * (4.0 * PI * t / period).cos();
            let mut feet = [[0.0; 2]; 2];
            for (leg, foot) in feet.iter_mut().enumerate() {
                let offset = if leg == 0 { geometry.d } else { -geometry.d };
                let u = (t / period + 0.5 * leg as f64).rem_euclid(1.0);
                let (rel_x, z) = if u < duty {
                    (half_stance - 2.0 * half_stance * u / duty, 0.0)
                } else {
                    let w = (u - duty) / (1.0 - duty);
                    (-half_stance + 2.0 * half_stance * (1.0 - (PI * w).cos()) / 2.0, swing_height * (PI * w).sin())
                };
                *foot = [root_x + offset + rel_x, z];
            }
            FrameTarget {
                root_x,
                root_z,
                pitch: 0.0,
                feet,
            }
        })
        .collect()
}

/// Pronking hop: both feet in stance, then a short ballistic flight.
fn hop(params: &SynthParams, geometry: &RobotGeometry) -> Vec<FrameTarget> {
    let dt = params.dt;
    let stance = (0.3 / dt).round().max(2.0) * dt;
    let flight = (0.2 / dt).round().max(2.0) * dt;
    let period = stance + flight;
    let v0 = GRAVITY * flight / 2.0;
    let touchdown = geometry.standing_height();
    let speed = params.speed;
    let planted = |cycle: f64, leg: usize| {
        let offset = if leg == 0 { geometry.d } else { -geometry.d };
        speed * (cycle * period + stance / 2.0) + offset
    };
    (0..frame_count(params.duration, dt))
        .map(|i| {
            let t = i as f64 * dt;
            let cycle = (t / period + 1e-9).floor();
            let tau = (t - cycle * period).max(0.0);
            let root_x = speed * t;
            let mut feet = [[0.0; 2]; 2];
            let root_z;
            if tau < stance {
                root_z = touchdown - v0 * tau + v0 * tau * tau / stance;
                for (leg, foot) in feet.iter_mut().enumerate() {
                    *foot = [planted(cycle, leg), 0.0];
                }
            } else {
                let s = tau - stance;
                root_z = touchdown + v0 * s - 0.5 * GRAVITY * s * s;
                let w = s / flight;
                let blend = (1.0 - (PI * w).cos()) / 2.0;
                for (leg, foot) in feet.iter_mut().enumerate() {
                    let a = planted(cycle, leg);
                    let b = planted(cycle + 1.0, leg);
                    *foot = [a + (b - a) * blend, root_z - touchdown + 0.03 * (PI * w).sin()];
                }
            }
            FrameTarget {
                root_x,
                root_z,
                pitch: 0.0,
                feet,
            }
        })
        .collect()
}

/// Root keyframe for cubic Hermite interpolation.
#[derive(Clone, Copy)]
struct Key {
    t: f64,
    x: f64,
    vx: f64,
    z: f64,
    vz: f64,
}

fn hermite(p0: f64, m0: f64, p1: f64, m1: f64, span: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * p0 + (s3 - 2.0 * s2 + s) * span * m0 + (-2.0 * s3 + 3.0 * s2) * p1 + (s3 - s2) * span * m1
}

fn eval_keys(keys: &[Key], t: f64) -> (f64, f64) {
    let last = keys[keys.len() - 1];
    if t >= last.t {
        return (last.x, last.z);
    }
    let i = keys.windows(2).position(|w| t < w[1].t).unwrap_or(0);
    let (a, b) = (keys[i], keys[i + 1]);
    let span = b.t - a.t;
    let s = ((t - a.t) / span).clamp(0.0, 1.0);
    (hermite(a.x, a.vx, b.x, b.vx, span, s), hermite(a.z, a.vz, b.z, b.vz, span, s))
}

/// Crouch, push off, fly ballistically, land and recover. With `flip` the
/// trunk turns through exactly -2*pi during the flight phase.
fn ballistic_jump(params: &SynthParams, geometry: &RobotGeometry, distance: f64, flip: bool) -> Vec<FrameTarget> {
    let dt = params.dt;
    let quant = |s: f64| (s / dt).round().max(1.0) * dt;
    let stand_h = geometry.standing_height();
    let crouch_h = stand_h - 0.09;
    let apex = params.apex_height;
    let nominal_takeoff = 0.35;
    // apex falls exactly on a frame: integer steps to apex, takeoff height adjusted
    let steps_to_apex = ((2.0 * (apex - nominal_takeoff) / GRAVITY).sqrt() / dt).round().max(1.0);
    let rise_time = steps_to_apex * dt;
    let takeoff_h = apex - 0.5 * GRAVITY * rise_time * rise_time;
    let vz0 = GRAVITY * rise_time;
    let flight = 2.0 * rise_time;

    let (rest, crouch, push, absorb, recover) = (quant(0.3), quant(0.3), quant(0.16), quant(0.2), quant(0.4));
    let vx = distance / (flight + (push + absorb) / 2.0);

    let t_rest = rest;
    let t_crouch = t_rest + crouch;
    let t_takeoff = t_crouch + push;
    let t_land = t_takeoff + flight;
    let t_absorbed = t_land + absorb;
    let t_recovered = t_absorbed + recover;
    let min_end = t_recovered + rest;
    let t_end = if params.duration > min_end { quant(params.duration) } else { min_end };

    let x_takeoff = vx * push / 2.0;
    let x_land = x_takeoff + vx * flight;
    let x_final = x_land + vx * absorb / 2.0;
    let keys = [
        Key { t: 0.0, x: 0.0, vx: 0.0, z: stand_h, vz: 0.0 },
        Key { t: t_rest, x: 0.0, vx: 0.0, z: stand_h, vz: 0.0 },
        Key { t: t_crouch, x: 0.0, vx: 0.0, z: crouch_h, vz: 0.0 },
        Key { t: t_takeoff, x: x_takeoff, vx, z: takeoff_h, vz: vz0 },
        Key { t: t_takeoff + rise_time, x: x_takeoff + vx * rise_time, vx, z: apex, vz: 0.0 },
        Key { t: t_land, x: x_land, vx, z: takeoff_h, vz: -vz0 },
        Key { t: t_absorbed, x: x_final, vx: 0.0, z: crouch_h, vz: 0.0 },
        Key { t: t_recovered, x: x_final, vx: 0.0, z: stand_h, vz: 0.0 },
        Key { t: t_end, x: x_final, vx: 0.0, z: stand_h, vz: 0.0 },
    ];

    let start_feet = [[geometry.d, 0.0], [-geometry.d, 0.0]];
    let end_feet = [[x_final + geometry.d, 0.0], [x_final - geometry.d, 0.0]];
    let full_turn = if flip { -2.0 * PI } else { 0.0 };
    let pitch_at = |t: f64| {
        if t <= t_takeoff {
            0.0
        } else if t >= t_land {
            full_turn
        } else {
            let w = (t - t_takeoff) / flight;
            full_turn * w * w * (3.0 - 2.0 * w)
        }
    };
    // trunk-frame foot vectors at takeoff and touchdown
    let rel = |root: [f64; 2], pitch: f64, foot: [f64; 2], leg: usize| {
        let hip = geometry.hip(root[0], root[1], pitch, leg);
        let (s, c) = pitch.sin_cos();
        let w = [foot[0] - hip[0], foot[1] - hip[1]];
        [c * w[0] + s * w[1], -s * w[0] + c * w[1]]
    };
    let takeoff_rel = [0, 1].map(|leg| rel([x_takeoff, takeoff_h], 0.0, start_feet[leg], leg));
    let land_rel = [0, 1].map(|leg| rel([x_land, takeoff_h], full_turn, end_feet[leg], leg));
    let tuck = if flip { 0.5 } else { 0.35 };

    let count = (t_end / dt).round() as usize + 1;
    (0..count)
        .map(|i| {
            let t = i as f64 * dt;
            let (root_x, root_z) = eval_keys(&keys, t);
            let pitch = pitch_at(t);
            let feet = if t <= t_takeoff + 1e-9 {
                start_feet
            } else if t >= t_land - 1e-9 {
                end_feet
            } else {
                let w = (t - t_takeoff) / flight;
                let blend = w * w * (3.0 - 2.0 * w);
                let shrink = 1.0 - tuck * (PI * w).sin();
                let (s, c) = pitch.sin_cos();
                [0, 1].map(|leg| {
                    let r = [
                        (takeoff_rel[leg][0] + (land_rel[leg][0] - takeoff_rel[leg][0]) * blend) * shrink,
                        (takeoff_rel[leg][1] + (land_rel[leg][1] - takeoff_rel[leg][1]) * blend) * shrink,
                    ];
                    let hip = geometry.hip(root_x, root_z, pitch, leg);
                    let world = [hip[0] + c * r[0] - s * r[1], hip[1] + s * r[0] + c * r[1]];
                    [world[0], world[1].max(0.02 * (PI * w).sin())]
                })
            };
            FrameTarget {
                root_x,
                root_z,
                pitch,
                feet,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::wrap_angle;
    use super::*;

    fn gen(kind: SynthKind, p: SynthParams) -> MotionClip {
        generate_synthetic_clip(kind, &p, &RobotGeometry::default()).unwrap()
    }

    #[test]
    fn walk_integrates_commanded_speed() {
        let p = SynthParams {
            speed: 1.0,
            duration: 2.0,
            dt: 0.02,
            ..SynthParams::defaults(SynthKind::Walk)
        };
        let clip = gen(SynthKind::Walk, p);
        assert_eq!(clip.frames.len(), 101);
        let dx = clip.frames[100].root_x - clip.frames[0].root_x;
        assert!((dx - 2.0).abs() < 1e-9, "dx = {dx}");
    }

    #[test]
    fn backflip_apex_and_net_turn() {
        let clip = gen(SynthKind::Backflip, SynthParams::defaults(SynthKind::Backflip));
        let max_z = clip.frames.iter().map(|f| f.root_z).fold(f64::MIN, f64::max);
        assert!((max_z - 0.6).abs() < 1e-9, "apex {max_z}");
        let net = clip.frames.last().unwrap().pitch - clip.frames[0].pitch;
        assert!((net + 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn backflip_pitch_monotone_and_small_steps() {
        let clip = gen(SynthKind::Backflip, SynthParams::defaults(SynthKind::Backflip));
        for w in clip.frames.windows(2) {
            assert!(w[1].pitch <= w[0].pitch + 1e-12);
            assert!(wrap_angle(w[1].pitch - w[0].pitch).abs() < PI);
        }
    }

    #[test]
    fn hop_in_place_is_periodic() {
        let p = SynthParams {
            speed: 0.0,
            ..SynthParams::defaults(SynthKind::Hop)
        };
        let clip = gen(SynthKind::Hop, p);
        let net = clip.frames.last().unwrap().root_x - clip.frames[0].root_x;
        assert!(net.abs() < 1e-12);
        // 0.5 s period at 50 Hz
        let a = &clip.frames[10];
        let b = &clip.frames[35];
        assert!((a.root_z - b.root_z).abs() < 1e-9);
    }

    #[test]
    fn jumps_have_airborne_interval() {
        for kind in [SynthKind::JumpForward, SynthKind::Backflip, SynthKind::Hop] {
            let clip = gen(kind, SynthParams::defaults(kind));
            assert!(clip.frames.iter().any(|f| f.airborne()), "{kind:?} never leaves the ground");
        }
    }

    #[test]
    fn jump_forward_covers_distance() {
        let clip = gen(SynthKind::JumpForward, SynthParams::defaults(SynthKind::JumpForward));
        let net = clip.frames.last().unwrap().root_x - clip.frames[0].root_x;
        assert!((net - 0.6).abs() < 1e-9);
        let max_z = clip.frames.iter().map(|f| f.root_z).fold(f64::MIN, f64::max);
        assert!((max_z - 0.55).abs() < 1e-9);
    }

    #[test]
    fn feet_stay_above_ground() {
        for (_, kind, p) in standard_menu() {
            let clip = gen(kind, p);
            for (i, f) in clip.frames.iter().enumerate() {
                for foot in f.feet {
                    assert!(foot[1] > -0.02, "{kind:?} frame {i} foot z {}", foot[1]);
                }
            }
        }
    }

    #[test]
    fn out_of_range_params_rejected() {
        let g = RobotGeometry::default();
        let p = SynthParams {
            speed: 3.0,
            ..SynthParams::defaults(SynthKind::Walk)
        };
        assert!(matches!(generate_synthetic_clip(SynthKind::Walk, &p, &g), Err(Error::Validation(_))));
        let p = SynthParams {
            apex_height: 2.0,
            ..SynthParams::defaults(SynthKind::Backflip)
        };
        assert!(generate_synthetic_clip(SynthKind::Backflip, &p, &g).is_err());
    }

    #[test]
    fn speed_sweep_stays_valid() {
        for kind in [SynthKind::Walk, SynthKind::TrotLike, SynthKind::Hop] {
            for speed in [0.0, 0.3, 0.9, 1.5] {
                let p = SynthParams {
                    speed,
                    ..SynthParams::defaults(kind)
                };
                gen(kind, p);
            }
        }
    }
}
