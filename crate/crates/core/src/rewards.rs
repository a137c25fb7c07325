//! Imitation rewards: functionality (root tracking), style (joint/foot
//! tracking and adversarial), and the coach-satisfaction scheduler.

use crate::dataset::{wrap_angle, RefPose, RobotGeometry};
use crate::error::{Error, Result};
use crate::sim::RobotState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub w_func_ori: f64,
    pub w_func_pos_xy: f64,
    pub w_func_pos_z: f64,
    pub w_style_adv: f64,
    pub w_style_joint: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_func_ori: 0.3,
            w_func_pos_xy: 0.3,
            w_func_pos_z: 0.4,
            w_style_adv: 0.5,
            w_style_joint: 0.5,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_func_ori,
            self.w_func_pos_xy,
            self.w_func_pos_z,
            self.w_style_adv,
            self.w_style_joint,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("reward weights must be non-negative: {self:?}")))
        }
    }
}

/// Which reward terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RewardMode {
    /// Functionality plus scheduled style.
    Vim,
    /// Functionality plus a fixed-weight style sum.
    VimNoSched,
    /// Functionality plus joint tracking only.
    MotionImitation,
    /// Adversarial reward only.
    Gail,
}

impl RewardMode {
    pub const ALL: [RewardMode; 4] = [RewardMode::Vim, RewardMode::VimNoSched, RewardMode::MotionImitation, RewardMode::Gail];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vim" => Ok(RewardMode::Vim),
            "vim-no-sched" => Ok(RewardMode::VimNoSched),
            "motion-imitation" => Ok(RewardMode::MotionImitation),
            "gail" => Ok(RewardMode::Gail),
            other => Err(Error::Config(format!("unknown reward mode '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::Vim => "vim",
            RewardMode::VimNoSched => "vim-no-sched",
            RewardMode::MotionImitation => "motion-imitation",
            RewardMode::Gail => "gail",
        }
    }

    /// Whether this mode consumes discriminator output.
    pub fn uses_discriminator(self) -> bool {
        !matches!(self, RewardMode::MotionImitation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalityTerms {
    pub r_ori: f64,
    pub r_pos_xy: f64,
    pub r_pos_z: f64,
    pub weighted: f64,
}

pub fn functionality_reward(state: &RobotState, reference: &RefPose, w: &RewardWeights) -> FunctionalityTerms {
    let d_pitch = wrap_angle(reference.pitch - state.pitch);
    let dx = reference.root_x - state.root_x;
    let dz = reference.root_z - state.root_z;
    let r_ori = (-10.0 * d_pitch * d_pitch).exp();
    let r_pos_xy = (-20.0 * dx * dx).exp();
    let r_pos_z = (-80.0 * dz * dz).exp();
    FunctionalityTerms {
        r_ori,
        r_pos_xy,
        r_pos_z,
        weighted: w.w_func_ori * r_ori + w.w_func_pos_xy * r_pos_xy + w.w_func_pos_z * r_pos_z,
    }
}

/// `exp(-5 sum dq^2) + exp(-20 sum |dfoot|^2)`, in `(0, 2]`.
pub fn joint_style_reward(joints: &[f64; 4], feet: &[[f64; 2]; 2], reference: &RefPose) -> f64 {
    let joint_err: f64 = joints.iter().zip(&reference.joints).map(|(q, r)| (r - q).powi(2)).sum();
    let foot_err: f64 = feet
        .iter()
        .zip(&reference.feet)
        .map(|(f, r)| (r[0] - f[0]).powi(2) + (r[1] - f[1]).powi(2))
        .sum();
    (-5.0 * joint_err).exp() + (-20.0 * foot_err).exp()
}

/// `clamp(1 - (1 - d)^2 / 4, 0, 1)`.
pub fn adversarial_style_reward(d_out: f64) -> f64 {
    (1.0 - 0.25 * (1.0 - d_out).powi(2)).clamp(0.0, 1.0)
}

/// `w_adv r_adv + w_joint r_joint + w_adv (1 - mean_adv) r_joint`.
pub fn schedule_style_reward(r_adv: f64, r_joint: f64, mean_adv: f64, w: &RewardWeights) -> Result<f64> {
    if !(0.0..=1.0).contains(&mean_adv) {
        return Err(Error::Validation(format!("mean adversarial reward {mean_adv} outside [0, 1]")));
    }
    Ok(w.w_style_adv * r_adv + w.w_style_joint * r_joint + w.w_style_adv * (1.0 - mean_adv) * r_joint)
}

/// Per-step record of every reward term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown {
    pub r_ori: f64,
    pub r_pos_xy: f64,
    pub r_pos_z: f64,
    pub r_joint: f64,
    pub r_adv: f64,
    pub mean_adv: f64,
    /// The style contribution the mode adds to the total.
    pub scheduled_style: f64,
    pub total: f64,
    pub terminated: bool,
}

impl RewardBreakdown {
    pub const CSV_HEADER: &'static str = "r_ori,r_pos_xy,r_pos_z,r_joint,r_adv,mean_adv,scheduled_style,total,terminated";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.r_ori,
            self.r_pos_xy,
            self.r_pos_z,
            self.r_joint,
            self.r_adv,
            self.mean_adv,
            self.scheduled_style,
            self.total,
            self.terminated as u8
        )
    }

    fn functionality(&self, w: &RewardWeights) -> f64 {
        w.w_func_ori * self.r_ori + w.w_func_pos_xy * self.r_pos_xy + w.w_func_pos_z * self.r_pos_z
    }

    /// Style contribution of `mode` from the stored terms.
    pub fn style_for(&self, w: &RewardWeights, mode: RewardMode) -> Result<f64> {
        Ok(match mode {
            RewardMode::Vim => schedule_style_reward(self.r_adv, self.r_joint, self.mean_adv, w)?,
            RewardMode::VimNoSched => w.w_style_adv * self.r_adv + w.w_style_joint * self.r_joint,
            RewardMode::MotionImitation => w.w_style_joint * self.r_joint,
            RewardMode::Gail => w.w_style_adv * self.r_adv,
        })
    }

    /// Recompute the total from the stored components.
    pub fn recompute_total(&self, w: &RewardWeights, mode: RewardMode) -> Result<f64> {
        let style = self.style_for(w, mode)?;
        Ok(match mode {
            RewardMode::Gail => style,
            _ => self.functionality(w) + style,
        })
    }
}

/// Score the post-step state against the reference frame it should match.
/// `d_out` is the discriminator score of the transition; it is ignored in
/// motion-imitation mode.
pub fn total_reward(
    next_state: &RobotState,
    reference: &RefPose,
    d_out: f64,
    mean_adv: f64,
    w: &RewardWeights,
    mode: RewardMode,
    geometry: &RobotGeometry,
) -> Result<RewardBreakdown> {
    let func = functionality_reward(next_state, reference, w);
    let r_joint = joint_style_reward(&next_state.joints, &next_state.feet(geometry), reference);
    let r_adv = if mode.uses_discriminator() { adversarial_style_reward(d_out) } else { 0.0 };
    let mut b = RewardBreakdown {
        r_ori: func.r_ori,
        r_pos_xy: func.r_pos_xy,
        r_pos_z: func.r_pos_z,
        r_joint,
        r_adv,
        mean_adv,
        ..Default::default()
    };
    b.scheduled_style = b.style_for(w, mode)?;
    b.total = match mode {
        RewardMode::Gail => b.scheduled_style,
        _ => func.weighted + b.scheduled_style,
    };
    Ok(b)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn state_at(pose: &RefPose) -> RobotState {
        RobotState {
            root_x: pose.root_x,
            root_z: pose.root_z,
            pitch: pose.pitch,
            vx: 0.0,
            vz: 0.0,
            pitch_rate: 0.0,
            joints: pose.joints,
            joint_vels: [0.0; 4],
            foot_contact: [true; 2],
            last_action: pose.joints,
            time: 0.0,
            anchors: [None; 2],
        }
    }

    fn pose() -> RefPose {
        let g = RobotGeometry::default();
        RefPose::new(0.3, g.standing_height(), 0.0, g.standing_joints(), &g)
    }

    #[test]
    fn zero_error_functionality() {
        let p = pose();
        let w = RewardWeights::default();
        let f = functionality_reward(&state_at(&p), &p, &w);
        assert_eq!((f.r_ori, f.r_pos_xy, f.r_pos_z), (1.0, 1.0, 1.0));
        assert!((f.weighted - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RewardMode::ALL {
            assert_eq!(RewardMode::parse(m.as_str()).unwrap(), m);
        }
        assert_eq!(RewardMode::parse("vim_no_sched").unwrap(), RewardMode::VimNoSched);
        assert!(matches!(RewardMode::parse("amp"), Err(Error::Config(_))));
    }

    #[test]
    fn scheduler_rejects_out_of_range_mean() {
        let w = RewardWeights::default();
        assert!(schedule_style_reward(0.5, 1.0, 1.2, &w).is_err());
        assert!(schedule_style_reward(0.5, 1.0, -0.1, &w).is_err());
    }

    #[test]
    fn motion_imitation_perfect_tracking() {
        let g = RobotGeometry::default();
        let p = pose();
        let w = RewardWeights::default();
        let b = total_reward(&state_at(&p), &p, 0.0, 0.3, &w, RewardMode::MotionImitation, &g).unwrap();
        assert!((b.total - (0.3 + 0.3 + 0.4 + 0.5 * 2.0)).abs() < 1e-12);
        assert_eq!(b.r_adv, 0.0);
    }

    #[test]
    fn gail_uses_only_discriminator() {
        let g = RobotGeometry::default();
        let p = pose();
        let w = RewardWeights::default();
        let b = total_reward(&state_at(&p), &p, 1.0, 0.3, &w, RewardMode::Gail, &g).unwrap();
        assert_eq!(b.total, 0.5);
        assert_eq!(b.r_ori, 1.0);
        assert_eq!(b.r_joint, 2.0);
    }

    proptest! {
        #[test]
        fn vim_matches_unscheduled_when_coach_satisfied(
            dx in -0.5f64..0.5, dz in -0.2f64..0.2, dp in -1.0f64..1.0, dq in -0.5f64..0.5, d in -2.0f64..2.0
        ) {
            let g = RobotGeometry::default();
            let p = pose();
            let mut s = state_at(&p);
            s.root_x += dx;
            s.root_z += dz;
            s.pitch += dp;
            s.joints[1] += dq;
            let w = RewardWeights::default();
            let a = total_reward(&s, &p, d, 1.0, &w, RewardMode::Vim, &g).unwrap();
            let b = total_reward(&s, &p, d, 1.0, &w, RewardMode::VimNoSched, &g).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-12);
        }

        #[test]
        fn breakdown_total_is_recomputable(
            dx in -0.5f64..0.5, dp in -3.0f64..3.0, d in -2.0f64..2.0, mean in 0.0f64..1.0, mode_idx in 0usize..4
        ) {
            let g = RobotGeometry::default();
            let p = pose();
            let mut s = state_at(&p);
            s.root_x += dx;
            s.pitch += dp;
            let w = RewardWeights::default();
            let mode = RewardMode::ALL[mode_idx];
            let b = total_reward(&s, &p, d, mean, &w, mode, &g).unwrap();
            prop_assert!((b.recompute_total(&w, mode).unwrap() - b.total).abs() < 1e-12);
        }

        #[test]
        fn vim_invariant_under_full_turns(dp in -3.0f64..3.0, dx in -0.3f64..0.3, turns in -3i32..3) {
            let g = RobotGeometry::default();
            let p = pose();
            let mut s = state_at(&p);
            s.pitch += dp;
            s.root_x += dx;
            let w = RewardWeights::default();
            let a = total_reward(&s, &p, 0.2, 0.5, &w, RewardMode::Vim, &g).unwrap();
            let shift = 2.0 * std::f64::consts::PI * turns as f64;
            let mut s2 = s;
            s2.pitch += shift;
            let mut p2 = p;
            p2.pitch += shift;
            p2.recompute_feet(&g);
            let b = total_reward(&s2, &p2, 0.2, 0.5, &w, RewardMode::Vim, &g).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-9);
        }

        #[test]
        fn exp_terms_decrease_with_error(e1 in 0.0f64..2.0, e2 in 0.0f64..2.0) {
            prop_assume!(e1 < e2 - 1e-9);
            let p = pose();
            let w = RewardWeights::default();
            let mut a = state_at(&p);
            let mut b = state_at(&p);
            a.root_z += e1 * 0.1;
            b.root_z += e2 * 0.1;
            a.root_x += e1 * 0.1;
            b.root_x += e2 * 0.1;
            let (fa, fb) = (functionality_reward(&a, &p, &w), functionality_reward(&b, &p, &w));
            prop_assert!(fa.r_pos_z > fb.r_pos_z && fb.r_pos_z > 0.0 && fa.r_pos_z <= 1.0);
            prop_assert!(fa.r_pos_xy > fb.r_pos_xy && fb.r_pos_xy > 0.0);
        }

        #[test]
        fn adversarial_reward_in_unit_interval(d in -100.0f64..100.0) {
            let r = adversarial_style_reward(d);
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
