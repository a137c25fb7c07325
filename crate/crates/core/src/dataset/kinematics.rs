//! Robot geometry and leg kinematics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint ordering used throughout the crate.
pub const FRONT_HIP: usize = 0;
pub const FRONT_KNEE: usize = 1;
pub const REAR_HIP: usize = 2;
pub const REAR_KNEE: usize = 3;

/// Physical description of the planar robot.
///
/// The front hip sits at `+d` along the trunk axis and the rear hip at `-d`.
/// A zero joint angle points the link straight down the trunk normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotGeometry {
    pub l1: f64,
    pub l2: f64,
    pub d: f64,
    pub trunk_mass: f64,
    pub trunk_inertia: f64,
    /// `[lo, hi]` per joint, in joint order.
    pub joint_limits: [[f64; 2]; 4],
    pub torque_limit: f64,
}

impl Default for RobotGeometry {
    fn default() -> Self {
        Self {
            l1: 0.2,
            l2: 0.2,
            d: 0.19,
            trunk_mass: 10.0,
            trunk_inertia: 0.18,
            joint_limits: [[-1.0, 2.2], [-2.6, 0.2], [-1.0, 2.2], [-2.6, 0.2]],
            torque_limit: 33.0,
        }
    }
}

impl RobotGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("trunk_mass", self.trunk_mass),
            ("trunk_inertia", self.trunk_inertia),
            ("torque_limit", self.torque_limit),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("geometry.{name} must be positive, got {v}")));
            }
        }
        if !(self.d.is_finite() && self.d >= 0.0) {
            return Err(Error::Validation(format!("geometry.d must be non-negative, got {}", self.d)));
        }
        for (j, [lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Validation(format!("joint {j} limits [{lo}, {hi}] are not an interval")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let geometry: RobotGeometry = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Clamp joints into their limits.
    pub fn clamp_joints(&self, joints: &mut [f64; 4]) {
        for (q, [lo, hi]) in joints.iter_mut().zip(self.joint_limits) {
            *q = q.clamp(lo, hi);
        }
    }

    pub fn joints_within_limits(&self, joints: &[f64; 4], tol: f64) -> bool {
        joints
            .iter()
            .zip(self.joint_limits)
            .all(|(q, [lo, hi])| *q >= lo - tol && *q <= hi + tol)
    }

    /// Nominal standing joint configuration.
    pub fn standing_joints(&self) -> [f64; 4] {
        [0.6, -1.2, 0.6, -1.2]
    }

    /// Trunk height at which the standing pose puts both feet on the ground.
    pub fn standing_height(&self) -> f64 {
        let feet = foot_fk(0.0, 0.0, 0.0, &self.standing_joints(), self);
        -feet[0][1]
    }

    /// Hip position of leg `leg` (0 = front, 1 = rear).
    pub fn hip(&self, root_x: f64, root_z: f64, pitch: f64, leg: usize) -> [f64; 2] {
        let offset = if leg == 0 { self.d } else { -self.d };
        let (s, c) = pitch.sin_cos();
        [root_x + c * offset, root_z + s * offset]
    }
}

/// Direction of a link whose absolute angle is `psi`; zero points straight down.
#[inline]
pub(crate) fn link_dir(psi: f64) -> [f64; 2] {
    let (s, c) = psi.sin_cos();
    [s, -c]
}

/// Forward kinematics of both feet, front then rear.
pub fn foot_fk(root_x: f64, root_z: f64, pitch: f64, joints: &[f64; 4], geometry: &RobotGeometry) -> [[f64; 2]; 2] {
    let mut feet = [[0.0; 2]; 2];
    for (leg, foot) in feet.iter_mut().enumerate() {
        let hip = geometry.hip(root_x, root_z, pitch, leg);
        let psi1 = pitch + joints[2 * leg];
        let psi2 = psi1 + joints[2 * leg + 1];
        let a = link_dir(psi1);
        let b = link_dir(psi2);
        *foot = [
            hip[0] + geometry.l1 * a[0] + geometry.l2 * b[0],
            hip[1] + geometry.l1 * a[1] + geometry.l2 * b[1],
        ];
    }
    feet
}

/// Jacobian of a foot position with respect to its (hip, knee) angles,
/// as `[[dx/dhip, dx/dknee], [dz/dhip, dz/dknee]]`.
pub fn foot_jacobian(pitch: f64, hip: f64, knee: f64, geometry: &RobotGeometry) -> [[f64; 2]; 2] {
    let psi1 = pitch + hip;
    let psi2 = psi1 + knee;
    let (s1, c1) = psi1.sin_cos();
    let (s2, c2) = psi2.sin_cos();
    [
        [geometry.l1 * c1 + geometry.l2 * c2, geometry.l2 * c2],
        [geometry.l1 * s1 + geometry.l2 * s2, geometry.l2 * s2],
    ]
}

/// Knee-backward inverse kinematics for one leg. Unreachable targets are
/// projected onto the reachable annulus.
pub fn leg_ik(hip: [f64; 2], foot: [f64; 2], pitch: f64, geometry: &RobotGeometry) -> (f64, f64) {
    let (l1, l2) = (geometry.l1, geometry.l2);
    let (s, c) = pitch.sin_cos();
    let wx = foot[0] - hip[0];
    let wz = foot[1] - hip[1];
    // rotate into the trunk frame
    let rx = c * wx + s * wz;
    let rz = -s * wx + c * wz;
    let r_min = (l1 - l2).abs() + 1e-6;
    let r_max = l1 + l2 - 1e-6;
    let r = (rx * rx + rz * rz).sqrt().clamp(r_min, r_max);
    let cos_knee = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let knee = -cos_knee.acos();
    let psi = rx.atan2(-rz);
    let hip_angle = psi - (l2 * knee.sin()).atan2(l1 + l2 * knee.cos());
    (hip_angle, knee)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use super::*;

    fn simple() -> RobotGeometry {
        RobotGeometry {
            l1: 0.2,
            l2: 0.2,
            d: 0.0,
            ..RobotGeometry::default()
        }
    }

    #[test]
    fn straight_leg_hangs_below_hip() {
        let feet = foot_fk(0.15, 0.5, 0.0, &[0.0; 4], &simple());
        for foot in feet {
            assert!((foot[0] - 0.15).abs() < 1e-12);
            assert!((foot[1] - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn hip_quarter_turn_points_leg_forward() {
        let feet = foot_fk(0.15, 0.5, 0.0, &[FRAC_PI_2, 0.0, FRAC_PI_2, 0.0], &simple());
        assert!((feet[0][0] - 0.55).abs() < 1e-12);
        assert!((feet[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn inverted_trunk_points_leg_up() {
        let feet = foot_fk(0.0, 0.5, PI, &[0.0; 4], &simple());
        assert!(feet[0][0].abs() < 1e-12);
        assert!((feet[0][1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn hips_follow_trunk_pitch() {
        let g = RobotGeometry::default();
        let front = g.hip(1.0, 0.3, FRAC_PI_2, 0);
        assert!((front[0] - 1.0).abs() < 1e-12);
        assert!((front[1] - (0.3 + g.d)).abs() < 1e-12);
    }

    #[test]
    fn ik_inverts_fk() {
        let g = RobotGeometry::default();
        for &(pitch, hip, knee) in &[(0.0, 0.6, -1.2), (0.3, 1.0, -0.5), (-2.0, -0.4, -2.0), (-5.0, 1.5, -1.7)] {
            let joints = [hip, knee, hip, knee];
            let feet = foot_fk(0.2, 0.4, pitch, &joints, &g);
            let hip_pos = g.hip(0.2, 0.4, pitch, 0);
            let (h, k) = leg_ik(hip_pos, feet[0], pitch, &g);
            let wrapped = (h - hip).rem_euclid(2.0 * PI);
            assert!(wrapped < 1e-9 || (2.0 * PI - wrapped) < 1e-9, "hip {h} vs {hip}");
            assert!((k - knee).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let g = RobotGeometry::default();
        let (pitch, hip, knee) = (0.2, 0.7, -1.1);
        let jac = foot_jacobian(pitch, hip, knee, &g);
        let h = 1e-6;
        let f = |hq: f64, kq: f64| foot_fk(0.0, 0.0, pitch, &[hq, kq, 0.0, 0.0], &g)[0];
        let dh = [(f(hip + h, knee)[0] - f(hip - h, knee)[0]) / (2.0 * h), (f(hip + h, knee)[1] - f(hip - h, knee)[1]) / (2.0 * h)];
        let dk = [(f(hip, knee + h)[0] - f(hip, knee - h)[0]) / (2.0 * h), (f(hip, knee + h)[1] - f(hip, knee - h)[1]) / (2.0 * h)];
        assert!((jac[0][0] - dh[0]).abs() < 1e-8);
        assert!((jac[1][0] - dh[1]).abs() < 1e-8);
        assert!((jac[0][1] - dk[0]).abs() < 1e-8);
        assert!((jac[1][1] - dk[1]).abs() < 1e-8);
    }

    #[test]
    fn standing_pose_touches_ground() {
        let g = RobotGeometry::default();
        let h = g.standing_height();
        let feet = foot_fk(0.0, h, 0.0, &g.standing_joints(), &g);
        assert!(feet[0][1].abs() < 1e-12 && feet[1][1].abs() < 1e-12);
    }
}
