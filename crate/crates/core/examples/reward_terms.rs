//! Score perturbed copies of a walk frame under every reward mode and show
//! how the scheduler shifts weight onto joint tracking when the
//! discriminator is unimpressed.
//!
//! ```text
//! cargo run --release --example reward_terms
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use motion_prior::dataset::{generate_synthetic_clip, RobotGeometry, SynthKind, SynthParams};
use motion_prior::rewards::{schedule_style_reward, total_reward, RewardMode, RewardWeights};
use motion_prior::sim::reset_from_reference;

fn main() -> motion_prior::Result<()> {
    let g = RobotGeometry::default();
    let clip = generate_synthetic_clip(SynthKind::Walk, &SynthParams::defaults(SynthKind::Walk), &g)?;
    let reference = &clip.frames[40];
    let w = RewardWeights::default();

    println!("{:<22} {:>7} {:>7} {:>7} {:>7} {:>7}", "perturbation", "r_ori", "r_xy", "r_z", "r_joint", "vim");
    let cases: [(&str, f64, f64, f64); 4] = [
        ("exact", 0.0, 0.0, 0.0),
        ("pitch +0.2 rad", 0.2, 0.0, 0.0),
        ("root x +0.1 m", 0.0, 0.1, 0.0),
        ("joints +0.3 rad", 0.0, 0.0, 0.3),
    ];
    for (name, dp, dx, dq) in cases {
        let mut s = reset_from_reference(reference, &clip.velocity(40), 0.0, &g, &mut ChaCha8Rng::seed_from_u64(0));
        s.pitch += dp;
        s.root_x += dx;
        for q in s.joints.iter_mut() {
            *q += dq;
        }
        let b = total_reward(&s, reference, 0.5, 0.5, &w, RewardMode::Vim, &g)?;
        println!(
            "{name:<22} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            b.r_ori, b.r_pos_xy, b.r_pos_z, b.r_joint, b.total
        );
    }

    println!("\nstyle mix for r_adv = 0.2, r_joint = 0.9 as the coach warms up:");
    for mean_adv in [0.0, 0.25, 0.5, 0.75, 1.0] {
        println!("  mean_adv {mean_adv:.2} -> style {:.4}", schedule_style_reward(0.2, 0.9, mean_adv, &w)?);
    }

    println!("\nsame exact state under each mode (D = 0.5, mean_adv = 0.5):");
    let s = reset_from_reference(reference, &clip.velocity(40), 0.0, &g, &mut ChaCha8Rng::seed_from_u64(0));
    for mode in RewardMode::ALL {
        let b = total_reward(&s, reference, 0.5, 0.5, &w, mode, &g)?;
        println!("  {:<17} total {:.4}", mode.as_str(), b.total);
    }
    Ok(())
}
