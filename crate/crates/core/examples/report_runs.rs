//! Build the metrics table and learning-curve SVGs for finished runs, and
//! export the encoder latents of the first run.
//!
//! ```text
//! cargo run --release --example train_prior -- --out runs/a 100000 vim 1 hop
//! cargo run --release --example train_prior -- --out runs/b 100000 vim 2 hop
//! cargo run --release --example report_runs -- report_out runs/a runs/b
//! ```

use std::path::PathBuf;

use motion_prior::nn::Checkpoint;
use motion_prior::report::{export_latents, write_report};
use motion_prior::trainer::{TrainConfig, Trainer};

fn main() -> motion_prior::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    if args.len() < 2 {
        eprintln!("usage: report_runs <out_dir> <run_dir>...");
        std::process::exit(1);
    }
    let (out, runs) = (&args[0], &args[1..]);
    let summary = write_report(runs, out)?;
    println!("{} runs", summary.runs);
    for f in &summary.files {
        println!("  wrote {}", f.display());
    }

    let cfg = TrainConfig::load(runs[0].join("config.txt"))?;
    let trainer = Trainer::restore(cfg, &Checkpoint::load(runs[0].join("checkpoint.json"))?)?;
    let latents = export_latents(&trainer.prior, &trainer.clips)?;
    let path = out.join("latents.csv");
    std::fs::write(&path, latents).expect("write latents");
    println!("  wrote {}", path.display());
    Ok(())
}
