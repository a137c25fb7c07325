use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use motion_prior::dataset::{generate_synthetic_clip, save_clip, standard_menu, RobotGeometry};
use motion_prior::downstream::{DownstreamConfig, DownstreamTrainer, Task};
use motion_prior::eval::{episode_csv, MetricsTable};
use motion_prior::nn::Checkpoint;
use motion_prior::report::{dump_trajectory, export_latents, write_report};
use motion_prior::rewards::RewardMode;
use motion_prior::trainer::{TrainConfig, Trainer};
use motion_prior::{Error, Result};

/// Train and evaluate an instructable motion prior for a planar legged robot.
#[derive(Debug, Parser)]
#[command(name = "motion-prior", version)]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true, env = "MOTION_PRIOR_SEED")]
    seed: Option<u64>,
    /// Key = value config file.
    #[arg(long, global = true, env = "MOTION_PRIOR_CONFIG")]
    config: Option<PathBuf>,
    /// vim | vim-no-sched | motion-imitation | gail
    #[arg(long, global = true, env = "MOTION_PRIOR_MODE")]
    mode: Option<String>,
    /// Run everything on one thread (bitwise reproducible output).
    #[arg(long, global = true, env = "MOTION_PRIOR_SINGLE_THREAD", action = ArgAction::SetTrue)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic clip menu as JSON clip files.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        /// Robot geometry JSON (defaults to the built-in robot).
        #[arg(long)]
        geometry: Option<PathBuf>,
    },
    /// Train a motion prior.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated clip names.
        #[arg(long, value_delimiter = ',')]
        clips: Vec<String>,
    },
    /// Train a high-level policy over a frozen prior.
    TrainDownstream {
        #[arg(long)]
        out: PathBuf,
        /// Prior checkpoint (checkpoint.json of a training run).
        #[arg(long)]
        prior: Option<PathBuf>,
        /// following | jump | combined
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Use a freshly initialized prior instead (ablation).
        #[arg(long, action = ArgAction::SetTrue)]
        random_prior: bool,
    },
    /// Deterministic evaluation of a finished training run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Directory for eval_episodes.csv and metrics_table.csv; prints the
        /// table when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics table and learning-curve plots over run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encoder means for every clip frame of a run.
    ExportLatents {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step state, contact forces and reward terms for one episode.
    DumpTraj {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        clip: String,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            std::fs::write(p, text).map_err(|e| io_err(p, e))
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| io_err("<stdout>", e)),
    }
}

fn io_err(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::Io { path: path.into(), source }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.mode {
        cfg.mode = RewardMode::parse(m)?;
    }
    cfg.single_thread |= cli.single_thread;
    Ok(cfg)
}

/// Trainer restored from `run/config.txt` and `run/checkpoint.json`.
fn restore_run(cli: &Cli, run: &Path) -> Result<Trainer> {
    let mut cfg = TrainConfig::load(run.join("config.txt"))?;
    cfg.single_thread |= cli.single_thread;
    let ck = Checkpoint::load(run.join("checkpoint.json"))?;
    Trainer::restore(cfg, &ck)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenDataset { out, geometry } => {
            let g = match geometry {
                Some(p) => RobotGeometry::load(p)?,
                None => RobotGeometry::default(),
            };
            std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
            for (name, kind, params) in standard_menu() {
                let mut clip = generate_synthetic_clip(kind, &params, &g)?;
                clip.name = name.clone();
                let path = out.join(format!("{name}.json"));
                save_clip(&clip, &path)?;
                println!("{} ({} frames)", path.display(), clip.frames.len());
            }
        }
        Command::Train { out, steps, clips } => {
            let mut cfg = train_config(cli)?;
            if let Some(s) = steps {
                cfg.total_env_steps = *s;
            }
            if !clips.is_empty() {
                cfg.clips = clips.clone();
            }
            cfg.validate()?;
            let mut trainer = Trainer::new(cfg)?;
            let summary = trainer.train(Some(out), |row| {
                if let Some(e) = &row.eval {
                    eprintln!(
                        "update {} steps {} reward {:.3} eval x {:.3} z {:.3} reach {:.2}",
                        row.update, row.env_steps, row.rollout.mean_reward, e.root_x, e.root_z, e.reach_fraction
                    );
                }
            })?;
            println!("trained {} updates ({} env steps) into {}", summary.updates, summary.env_steps, out.display());
        }
        Command::TrainDownstream { out, prior, task, steps, random_prior } => {
            let mut cfg = match &cli.config {
                Some(p) => DownstreamConfig::load(p)?,
                None => DownstreamConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(t) = task {
                cfg.task = Task::parse(t)?;
            }
            if let Some(s) = steps {
                cfg.total_env_steps = *s;
            }
            if let Some(p) = prior {
                cfg.prior_checkpoint = Some(p.clone());
            }
            cfg.random_prior |= *random_prior;
            cfg.single_thread |= cli.single_thread;
            let path = cfg
                .prior_checkpoint
                .clone()
                .ok_or_else(|| Error::Usage("train-downstream needs --prior or prior_checkpoint in the config".into()))?;
            let g = match &cfg.geometry_file {
                Some(p) => RobotGeometry::load(p)?,
                None => RobotGeometry::default(),
            };
            let prior = DownstreamTrainer::load_prior(&path, &g, None)?;
            let mut trainer = DownstreamTrainer::new(cfg, prior)?;
            let rows = trainer.train(Some(out), |row| {
                if let Some(e) = &row.eval {
                    eprintln!("update {} steps {} speed error {:.3}", row.update, row.env_steps, e.mean_speed_error);
                }
            })?;
            if let Some(e) = rows.last().and_then(|r| r.eval.as_ref()) {
                println!("final mean speed error {:.4} m/s, jump success {:.3}", e.mean_speed_error, e.jump_success);
            }
        }
        Command::Eval { run, episodes, out } => {
            let trainer = restore_run(cli, run)?;
            let records = trainer.evaluate(episodes.unwrap_or(trainer.cfg.eval_episodes))?;
            let table = MetricsTable::from_episodes(&records).to_csv();
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                    write_or_print(Some(&dir.join("eval_episodes.csv")), &episode_csv(&records))?;
                    write_or_print(Some(&dir.join("metrics_table.csv")), &table)?;
                }
                None => write_or_print(None, &table)?,
            }
        }
        Command::Report { runs, out } => {
            let summary = write_report(runs, out)?;
            for f in &summary.files {
                println!("{}", f.display());
            }
        }
        Command::ExportLatents { run, out } => {
            let trainer = restore_run(cli, run)?;
            write_or_print(out.as_deref(), &export_latents(&trainer.prior, &trainer.clips)?)?;
        }
        Command::DumpTraj { run, clip, start, out } => {
            let trainer = restore_run(cli, run)?;
            let id = trainer
                .clips
                .iter()
                .position(|c| &c.name == clip)
                .ok_or_else(|| Error::Usage(format!("run has no clip named '{clip}'")))?;
            write_or_print(out.as_deref(), &dump_trajectory(&trainer, id, *start)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.single_thread {
        // a second global pool cannot be installed; only the first call matters
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
