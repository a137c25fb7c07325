//! Train a speed-following high-level policy on top of a saved prior.
//!
//! ```text
//! cargo run --release --example train_prior -- --out runs/walkhop 1000000 vim 1 stand walk_slow walk_fast hop
//! cargo run --release --example downstream_following -- runs/walkhop/checkpoint.json [steps] [task] [seed]
//! ```

use std::time::Instant;

use motion_prior::dataset::RobotGeometry;
use motion_prior::downstream::{DownstreamConfig, DownstreamTrainer, Task};

fn main() -> motion_prior::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(ckpt) = args.first() else {
        eprintln!("usage: downstream_following <prior checkpoint> [steps] [task] [seed]");
        std::process::exit(1);
    };
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300_000);
    let task = args.get(2).map(|t| Task::parse(t)).transpose()?.unwrap_or(Task::Following);
    let seed = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let prior = DownstreamTrainer::load_prior(ckpt, &RobotGeometry::default(), None)?;
    let before = prior.clone();
    let cfg = DownstreamConfig {
        task,
        seed,
        total_env_steps: steps,
        eval_every: 10,
        ..Default::default()
    };
    let start = Instant::now();
    let mut trainer = DownstreamTrainer::new(cfg, prior)?;
    trainer.train(None, |row| {
        let eval = row
            .eval
            .as_ref()
            .map(|e| {
                let speeds: Vec<String> = e.per_speed.iter().map(|(c, a, _)| format!("{c:.1}->{a:.2}")).collect();
                format!(" | err {:.3} [{}] falls {} |z|max {:.2}", e.mean_speed_error, speeds.join(" "), e.falls, e.max_abs_latent)
            })
            .unwrap_or_default();
        println!(
            "upd {:4} steps {:8} r {:.3} ep_len {:6.1} std {:.3}{} [{:.0}s]",
            row.update,
            row.env_steps,
            row.mean_reward,
            row.episode_length,
            row.latent_std,
            eval,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("prior unchanged: {}", trainer.prior() == &before);
    Ok(())
}
