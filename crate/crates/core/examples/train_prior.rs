//! Train a motion prior on synthetic clips and print learning progress.
//!
//! ```text
//! cargo run --release --example train_prior -- [--out DIR] [steps] [mode] [seed] [clips...]
//! cargo run --release --example train_prior -- --out runs/hop 200000 vim 1 hop
//! ```

use std::time::Instant;

use motion_prior::rewards::RewardMode;
use motion_prior::trainer::{TrainConfig, Trainer};

fn main() -> motion_prior::Result<()> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let out = match args.iter().position(|a| a == "--out") {
        Some(i) if i + 1 < args.len() => {
            let dir = args.remove(i + 1);
            args.remove(i);
            Some(std::path::PathBuf::from(dir))
        }
        _ => None,
    };
    let steps = args.first().and_then(|s| s.parse().ok()).unwrap_or(200_000);
    let mode = args.get(1).map(|m| RewardMode::parse(m)).transpose()?.unwrap_or(RewardMode::Vim);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let clips: Vec<String> = if args.len() > 3 { args[3..].to_vec() } else { vec!["hop".into()] };

    let mut cfg = TrainConfig {
        seed,
        mode,
        total_env_steps: steps,
        clips,
        eval_every: 10,
        ..Default::default()
    };
    cfg.prior.encoder_hidden = vec![64, 64];
    cfg.prior.prop_layers = vec![64, 32];
    cfg.prior.policy_hidden = vec![128, 128];
    cfg.prior.critic_hidden = vec![128, 128];
    cfg.disc.hidden = vec![64, 64];

    let start = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    let summary = trainer.train(out.as_deref(), |row| {
        let eval = row
            .eval
            .map(|e| format!(" | eval x {:.3} z {:.3} len {:.0} reach {:.2}", e.root_x, e.root_z, e.length, e.reach_fraction))
            .unwrap_or_default();
        println!(
            "upd {:4} steps {:8} r {:.3} ep_len {:6.1} adv {:.2} vloss {:.3} std {:.3}{} [{:.0}s]",
            row.update,
            row.env_steps,
            row.rollout.mean_reward,
            row.rollout.episode_length,
            row.rollout.r_adv,
            row.ppo.value_loss,
            row.ppo.entropy,
            eval,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("finished {} updates, {} env steps", summary.updates, summary.env_steps);
    Ok(())
}
