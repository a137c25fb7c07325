//! Fixed-timestep planar simulator: a rigid trunk on two massless legs with
//! PD joint motors and penalty ground contact.

use std::io::Write;

use rand::Rng;

use crate::dataset::kinematics::{foot_jacobian, link_dir};
use crate::dataset::{foot_fk, wrap_angle, RefPose, RefVelocity, RobotGeometry};
use crate::error::{Error, Result};

/// Full simulator state. Pitch is unwrapped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub root_x: f64,
    pub root_z: f64,
    pub pitch: f64,
    pub vx: f64,
    pub vz: f64,
    pub pitch_rate: f64,
    pub joints: [f64; 4],
    pub joint_vels: [f64; 4],
    pub foot_contact: [bool; 2],
    pub last_action: [f64; 4],
    pub time: f64,
    /// Tangential spring anchors of feet currently in contact.
    pub anchors: [Option<f64>; 2],
}

impl RobotState {
    pub fn feet(&self, geometry: &RobotGeometry) -> [[f64; 2]; 2] {
        foot_fk(self.root_x, self.root_z, self.pitch, &self.joints, geometry)
    }

    /// Foot velocities, front then rear.
    pub fn foot_velocities(&self, geometry: &RobotGeometry) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        let (s, c) = self.pitch.sin_cos();
        for (leg, v) in out.iter_mut().enumerate() {
            let offset = if leg == 0 { geometry.d } else { -geometry.d };
            let (hip, knee) = (self.joints[2 * leg], self.joints[2 * leg + 1]);
            let jac = foot_jacobian(self.pitch, hip, knee, geometry);
            // d(foot)/d(pitch) = d(hip point)/d(pitch) + d(foot)/d(hip angle)
            let dpx = -s * offset + jac[0][0];
            let dpz = c * offset + jac[1][0];
            let (qh, qk) = (self.joint_vels[2 * leg], self.joint_vels[2 * leg + 1]);
            *v = [
                self.vx + self.pitch_rate * dpx + jac[0][0] * qh + jac[0][1] * qk,
                self.vz + self.pitch_rate * dpz + jac[1][0] * qh + jac[1][1] * qk,
            ];
        }
        out
    }

    fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        let scalars = [
            ("root_x", self.root_x),
            ("root_z", self.root_z),
            ("pitch", self.pitch),
            ("vx", self.vx),
            ("vz", self.vz),
            ("pitch_rate", self.pitch_rate),
        ];
        const JOINT: [&str; 4] = ["joint[0]", "joint[1]", "joint[2]", "joint[3]"];
        const JOINT_VEL: [&str; 4] = ["joint_vel[0]", "joint_vel[1]", "joint_vel[2]", "joint_vel[3]"];
        scalars
            .into_iter()
            .chain(JOINT.into_iter().zip(self.joints))
            .chain(JOINT_VEL.into_iter().zip(self.joint_vels))
            .find(|(_, v)| !v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub control_dt: f64,
    pub substeps: usize,
    /// Signed vertical acceleration (negative is down).
    pub gravity: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
    pub friction: f64,
    pub kp: f64,
    pub kd: f64,
    /// Viscous joint damping `b`.
    pub joint_damping: f64,
    /// Reflected joint inertia of each leg joint.
    pub leg_inertia: f64,
    pub pos_err_max: f64,
    pub ori_err_max: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_dt: 0.02,
            substeps: 10,
            gravity: -9.81,
            contact_stiffness: 2.0e4,
            contact_damping: 200.0,
            tangential_stiffness: 1.0e4,
            tangential_damping: 100.0,
            friction: 0.8,
            kp: 80.0,
            kd: 2.0,
            joint_damping: 0.2,
            leg_inertia: 0.05,
            pos_err_max: 0.5,
            ori_err_max: 0.8,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps < 1 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        let positive = [
            ("control_dt", self.control_dt),
            ("contact_stiffness", self.contact_stiffness),
            ("contact_damping", self.contact_damping),
            ("tangential_stiffness", self.tangential_stiffness),
            ("tangential_damping", self.tangential_damping),
            ("friction", self.friction),
            ("kp", self.kp),
            ("kd", self.kd),
            ("leg_inertia", self.leg_inertia),
            ("pos_err_max", self.pos_err_max),
            ("ori_err_max", self.ori_err_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.joint_damping.is_finite() && self.joint_damping >= 0.0) {
            return Err(Error::Config("joint_damping must be non-negative".into()));
        }
        Ok(())
    }

    pub fn physics_dt(&self) -> f64 {
        self.control_dt / self.substeps as f64
    }
}

/// `clamp(kp * (target - q) - kd * qdot, +-limit)` per joint.
pub fn pd_torque(target: &[f64; 4], q: &[f64; 4], qdot: &[f64; 4], kp: f64, kd: f64, limit: f64) -> [f64; 4] {
    let mut tau = [0.0; 4];
    for j in 0..4 {
        tau[j] = (kp * (target[j] - q[j]) - kd * qdot[j]).clamp(-limit, limit);
    }
    tau
}

/// Normal force of the penalty contact law.
pub fn normal_force(foot_z: f64, foot_vz: f64, stiffness: f64, damping: f64) -> f64 {
    if foot_z < 0.0 {
        (-stiffness * foot_z - damping * foot_vz).max(0.0)
    } else {
        0.0
    }
}

/// Contact forces on one foot during one substep.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContactForce {
    pub normal: f64,
    pub tangential: f64,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    Position,
    Orientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Continue,
    Terminate(TerminationReason),
}

/// Terminate when the root drifts beyond `pos_err_max` or the wrapped
/// pitch error exceeds `ori_err_max`.
pub fn check_termination(state: &RobotState, reference: &RefPose, cfg: &SimConfig) -> Termination {
    let pos_err = (state.root_x - reference.root_x).hypot(state.root_z - reference.root_z);
    if pos_err > cfg.pos_err_max {
        return Termination::Terminate(TerminationReason::Position);
    }
    if wrap_angle(state.pitch - reference.pitch).abs() > cfg.ori_err_max {
        return Termination::Terminate(TerminationReason::Orientation);
    }
    Termination::Continue
}

/// Initialize a state at a reference frame, optionally perturbed by uniform
/// noise (joints by `+-noise_scale` rad, root by `+-noise_scale / 2` m).
pub fn reset_from_reference<R: Rng + ?Sized>(
    reference: &RefPose,
    velocity: &RefVelocity,
    noise_scale: f64,
    geometry: &RobotGeometry,
    rng: &mut R,
) -> RobotState {
    let mut joints = reference.joints;
    let (mut root_x, mut root_z) = (reference.root_x, reference.root_z);
    if noise_scale > 0.0 {
        for q in joints.iter_mut() {
            *q += rng.random_range(-noise_scale..=noise_scale);
        }
        root_x += rng.random_range(-noise_scale / 2.0..=noise_scale / 2.0);
        root_z += rng.random_range(-noise_scale / 2.0..=noise_scale / 2.0);
        geometry.clamp_joints(&mut joints);
    }
    let feet = foot_fk(root_x, root_z, reference.pitch, &joints, geometry);
    RobotState {
        root_x,
        root_z,
        pitch: reference.pitch,
        vx: velocity.vx,
        vz: velocity.vz,
        pitch_rate: velocity.pitch_rate,
        joints,
        joint_vels: velocity.joint_vels,
        foot_contact: [feet[0][1] <= 0.0, feet[1][1] <= 0.0],
        last_action: reference.joints,
        time: 0.0,
        anchors: [None; 2],
    }
}

/// The simulator: geometry plus configuration. Stateless between calls.
#[derive(Debug, Clone)]
pub struct PlanarSim {
    pub geometry: RobotGeometry,
    pub config: SimConfig,
}

impl PlanarSim {
    pub fn new(geometry: RobotGeometry, config: SimConfig) -> Result<Self> {
        geometry.validate()?;
        config.validate()?;
        Ok(Self { geometry, config })
    }

    /// Advance one control step with PD target angles `action`.
    pub fn step(&self, state: &RobotState, action: &[f64; 4]) -> Result<RobotState> {
        self.step_inner(state, action, &mut |_, _| {})
    }

    /// As [`PlanarSim::step`], also returning the contact forces of every substep.
    pub fn step_logged(&self, state: &RobotState, action: &[f64; 4]) -> Result<(RobotState, Vec<[ContactForce; 2]>)> {
        let mut log = Vec::with_capacity(self.config.substeps);
        let next = self.step_inner(state, action, &mut |_, f| log.push(f))?;
        Ok((next, log))
    }

    fn step_inner(
        &self,
        state: &RobotState,
        action: &[f64; 4],
        sink: &mut dyn FnMut(usize, [ContactForce; 2]),
    ) -> Result<RobotState> {
        if let Some(bad) = action.iter().find(|a| !a.is_finite()) {
            return Err(Error::Diverged { quantity: "action", value: *bad });
        }
        let g = &self.geometry;
        let cfg = &self.config;
        let h = cfg.physics_dt();
        let mut s = *state;
        for sub in 0..cfg.substeps {
            let feet = s.feet(g);
            let foot_vel = s.foot_velocities(g);
            let mut forces = [ContactForce::default(); 2];
            let mut force_xz = [[0.0; 2]; 2];
            for leg in 0..2 {
                let [fx, fz] = feet[leg];
                let [vx, vz] = foot_vel[leg];
                if fz < 0.0 {
                    let fn_ = normal_force(fz, vz, cfg.contact_stiffness, cfg.contact_damping);
                    let anchor = s.anchors[leg].unwrap_or(fx);
                    let raw = -cfg.tangential_stiffness * (fx - anchor) - cfg.tangential_damping * vx;
                    let bound = cfg.friction * fn_;
                    let ft = raw.clamp(-bound, bound);
                    s.anchors[leg] = Some(if ft != raw {
                        fx + (ft + cfg.tangential_damping * vx) / cfg.tangential_stiffness
                    } else {
                        anchor
                    });
                    forces[leg] = ContactForce { normal: fn_, tangential: ft };
                    force_xz[leg] = [ft, fn_];
                } else {
                    s.anchors[leg] = None;
                }
            }
            sink(sub, forces);

            // trunk
            let mut fx_total = 0.0;
            let mut fz_total = 0.0;
            let mut torque = 0.0;
            for leg in 0..2 {
                let [fx, fz] = force_xz[leg];
                fx_total += fx;
                fz_total += fz;
                let rx = feet[leg][0] - s.root_x;
                let rz = feet[leg][1] - s.root_z;
                torque += rx * fz - rz * fx;
            }
            let ax = fx_total / g.trunk_mass;
            let az = fz_total / g.trunk_mass + cfg.gravity;
            let alpha = torque / g.trunk_inertia;

            // joints: motor, viscous damping and reflected contact load
            let tau = pd_torque(action, &s.joints, &s.joint_vels, cfg.kp, cfg.kd, g.torque_limit);
            let mut qdd = [0.0; 4];
            for leg in 0..2 {
                let jac = foot_jacobian(s.pitch, s.joints[2 * leg], s.joints[2 * leg + 1], g);
                let [fx, fz] = force_xz[leg];
                for k in 0..2 {
                    let j = 2 * leg + k;
                    let reflected = jac[0][k] * fx + jac[1][k] * fz;
                    qdd[j] = (tau[j] - cfg.joint_damping * s.joint_vels[j] + reflected) / cfg.leg_inertia;
                }
            }

            s.vx += ax * h;
            s.vz += az * h;
            s.pitch_rate += alpha * h;
            s.root_x += s.vx * h;
            s.root_z += s.vz * h;
            s.pitch += s.pitch_rate * h;
            for j in 0..4 {
                s.joint_vels[j] += qdd[j] * h;
                s.joints[j] += s.joint_vels[j] * h;
                let [lo, hi] = g.joint_limits[j];
                if s.joints[j] < lo {
                    s.joints[j] = lo;
                    s.joint_vels[j] = s.joint_vels[j].max(0.0);
                } else if s.joints[j] > hi {
                    s.joints[j] = hi;
                    s.joint_vels[j] = s.joint_vels[j].min(0.0);
                }
            }
            if let Some((quantity, value)) = s.first_non_finite() {
                return Err(Error::Diverged { quantity, value });
            }
        }
        let feet = s.feet(g);
        s.foot_contact = [feet[0][1] <= 0.0, feet[1][1] <= 0.0];
        s.last_action = *action;
        s.time = state.time + cfg.control_dt;
        Ok(s)
    }
}

/// Link endpoints for drawing: hip, knee and foot per leg.
pub fn leg_points(state: &RobotState, geometry: &RobotGeometry) -> [[[f64; 2]; 3]; 2] {
    let mut out = [[[0.0; 2]; 3]; 2];
    for (leg, pts) in out.iter_mut().enumerate() {
        let hip = geometry.hip(state.root_x, state.root_z, state.pitch, leg);
        let a = link_dir(state.pitch + state.joints[2 * leg]);
        let knee = [hip[0] + geometry.l1 * a[0], hip[1] + geometry.l1 * a[1]];
        let b = link_dir(state.pitch + state.joints[2 * leg] + state.joints[2 * leg + 1]);
        let foot = [knee[0] + geometry.l2 * b[0], knee[1] + geometry.l2 * b[1]];
        *pts = [hip, knee, foot];
    }
    out
}

/// Header of the per-step trajectory CSV.
pub const TRAJECTORY_HEADER: &str = "time,root_x,root_z,pitch,vx,vz,pitch_rate,\
q0,q1,q2,q3,qd0,qd1,qd2,qd3,contact_front,contact_rear,a0,a1,a2,a3,\
fn_front,ft_front,fn_rear,ft_rear";

/// Write one trajectory CSV row (without newline-terminated extras).
pub fn write_trajectory_row<W: Write>(out: &mut W, state: &RobotState, forces: &[ContactForce; 2]) -> std::io::Result<()> {
    write!(
        out,
        "{},{},{},{},{},{},{}",
        state.time, state.root_x, state.root_z, state.pitch, state.vx, state.vz, state.pitch_rate
    )?;
    for q in state.joints.iter().chain(state.joint_vels.iter()) {
        write!(out, ",{q}")?;
    }
    write!(out, ",{},{}", state.foot_contact[0] as u8, state.foot_contact[1] as u8)?;
    for a in &state.last_action {
        write!(out, ",{a}")?;
    }
    write!(
        out,
        ",{},{},{},{}",
        forces[0].normal, forces[0].tangential, forces[1].normal, forces[1].tangential
    )
}
