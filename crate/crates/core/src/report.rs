//! Run-directory reporting: aggregate tables, SVG learning curves, latent
//! exports and per-step trajectory dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::dataset::{extract_segment, MotionClip};
use crate::discriminator::{make_feature, DiscFrame};
use crate::error::{Error, Result};
use crate::eval::{mean_std, parse_episode_csv, schema_comment, EpisodeRecord, MetricsTable};
use crate::prior::MotionPrior;
use crate::rewards::{total_reward, RewardBreakdown};
use crate::sim::{check_termination, reset_from_reference, write_trajectory_row, Termination, TRAJECTORY_HEADER};
use crate::trainer::Trainer;

/// Columns of the prior metrics stream that get a learning-curve plot.
pub const PRIOR_PLOTS: [&str; 6] = [
    "mean_reward",
    "episode_length",
    "eval_root_x_err",
    "eval_root_z_err",
    "eval_joint_err",
    "eval_reach_frac",
];
pub const DOWNSTREAM_PLOTS: [&str; 3] = ["mean_reward", "eval_speed_error", "eval_jump_success"];

/// A numeric CSV with `#` comment lines and one header row. Blank cells
/// read as NaN.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NumericCsv {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl NumericCsv {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Validation("CSV has no header".into()))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(Error::Validation(format!("CSV row {} has {} cells, header has {}", i + 1, cells.len(), columns.len())));
            }
            let row = cells
                .iter()
                .map(|c| if c.is_empty() { Ok(f64::NAN) } else { c.parse::<f64>() })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Validation(format!("CSV row {}: {e}", i + 1)))?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// `(env_steps, value)` pairs where the value is present.
    pub fn series(&self, name: &str) -> Vec<(f64, f64)> {
        let (Some(x), Some(y)) = (self.column("env_steps"), self.column(name)) else {
            return Vec::new();
        };
        self.rows.iter().filter(|r| r[y].is_finite()).map(|r| (r[x], r[y])).collect()
    }
}

/// One training run loaded from its output directory.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    /// Mode name for prior runs, task name for downstream runs.
    pub label: String,
    pub seed: u64,
    pub downstream: bool,
    pub metrics: NumericCsv,
    pub final_eval: Vec<EpisodeRecord>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_run(dir: &Path) -> Result<RunData> {
    let prior_cfg = dir.join("config.txt");
    let down_cfg = dir.join("downstream_config.txt");
    let (downstream, cfg_path, label_key, metrics_name) = if prior_cfg.exists() {
        (false, prior_cfg, "mode", "metrics.csv")
    } else if down_cfg.exists() {
        (true, down_cfg, "task", "downstream_metrics.csv")
    } else {
        return Err(Error::Validation(format!("{} is not a run directory", dir.display())));
    };
    let kv = KvConfig::load(&cfg_path)?;
    let label = kv.get::<String>(label_key)?.unwrap_or_else(|| "unknown".into());
    let seed = kv.get::<u64>("seed")?.unwrap_or(0);
    let metrics = NumericCsv::parse(&read(&dir.join(metrics_name))?)?;
    let eval_path = dir.join("final_eval.csv");
    let final_eval = if eval_path.exists() {
        parse_episode_csv(&read(&eval_path)?)?
    } else {
        Vec::new()
    };
    Ok(RunData {
        dir: dir.to_path_buf(),
        label,
        seed,
        downstream,
        metrics,
        final_eval,
    })
}

/// Mean and std across runs at each aligned point.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Align runs by the index of each present value and truncate to the
/// shortest run.
pub fn aggregate_curve(runs: &[&RunData], column: &str) -> Option<Curve> {
    let series: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| r.metrics.series(column)).collect();
    let n = series.iter().map(Vec::len).min()?;
    if n == 0 {
        return None;
    }
    let mut c = Curve { x: Vec::with_capacity(n), mean: Vec::with_capacity(n), std: Vec::with_capacity(n) };
    for k in 0..n {
        let xs: Vec<f64> = series.iter().map(|s| s[k].0).collect();
        let ys: Vec<f64> = series.iter().map(|s| s[k].1).collect();
        let (m, sd) = mean_std(&ys);
        c.x.push(mean_std(&xs).0);
        c.mean.push(m);
        c.std.push(sd);
    }
    Some(c)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

/// Line plot with one shaded mean +- std band per series.
pub fn svg_plot(title: &str, series: &[(String, Curve)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (l, r, t, b) = (70.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|(_, c)| c.x.iter().copied());
    let (x0, x1) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let ys = series
        .iter()
        .flat_map(|(_, c)| c.mean.iter().zip(&c.std).flat_map(|(m, s)| [m - s, m + s]));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !x0.is_finite() {
        return format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\"><text x=\"20\" y=\"30\">{title}: no data</text></svg>\n");
    }
    if (y1 - y0).abs() < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);

    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"22\" font-size=\"14\" text-anchor=\"middle\">{title}</text>", (l + w - r) / 2.0);
    let _ = writeln!(
        s,
        "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        w - l - r,
        h - t - b
    );
    for tx in nice_ticks(x0, x1) {
        let x = px(tx);
        let _ = writeln!(s, "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"black\"/>", h - b, h - b + 4.0);
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{tx}</text>", h - b + 16.0);
    }
    for ty in nice_ticks(y0, y1) {
        let y = py(ty);
        let label = format!("{:.4}", ty).trim_end_matches('0').trim_end_matches('.').to_string();
        let _ = writeln!(s, "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{l}\" y2=\"{y:.1}\" stroke=\"black\"/>", l - 4.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{label}</text>", l - 6.0, y + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">environment steps</text>", (l + w - r) / 2.0, h - 12.0);
    for (i, (name, c)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut band = String::new();
        for k in 0..c.x.len() {
            let _ = write!(band, "{:.2},{:.2} ", px(c.x[k]), py(c.mean[k] + c.std[k]));
        }
        for k in (0..c.x.len()).rev() {
            let _ = write!(band, "{:.2},{:.2} ", px(c.x[k]), py(c.mean[k] - c.std[k]));
        }
        let _ = writeln!(s, "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>", band.trim_end());
        let line: Vec<String> = (0..c.x.len()).map(|k| format!("{:.2},{:.2}", px(c.x[k]), py(c.mean[k]))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", line.join(" "));
        let ly = t + 14.0 + 18.0 * i as f64;
        let _ = writeln!(s, "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>", w - r + 10.0, w - r + 30.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{name}</text>", w - r + 35.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Files written by [`write_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub runs: usize,
    pub files: Vec<PathBuf>,
}

/// Build the metrics table and learning-curve plots for a set of run
/// directories. The output depends only on the run contents, not on the
/// order the directories are given in.
pub fn write_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(Error::Usage("report needs at least one run directory".into()));
    }
    let mut runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| (a.downstream, &a.label, a.seed, &a.dir).cmp(&(b.downstream, &b.label, b.seed, &b.dir)));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut write = |name: &str, body: &str| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        Ok(())
    };

    let episodes: Vec<EpisodeRecord> = runs.iter().flat_map(|r| r.final_eval.iter().cloned()).collect();
    if !episodes.is_empty() {
        write("metrics_table.csv", &MetricsTable::from_episodes(&episodes).to_csv())?;
    }
    for downstream in [false, true] {
        let mut groups: BTreeMap<&str, Vec<&RunData>> = BTreeMap::new();
        for r in runs.iter().filter(|r| r.downstream == downstream) {
            groups.entry(r.label.as_str()).or_default().push(r);
        }
        if groups.is_empty() {
            continue;
        }
        let (columns, prefix): (&[&str], &str) = if downstream { (&DOWNSTREAM_PLOTS, "downstream_") } else { (&PRIOR_PLOTS, "") };
        for col in columns {
            let series: Vec<(String, Curve)> = groups
                .iter()
                .filter_map(|(label, rs)| aggregate_curve(rs, col).map(|c| (format!("{label} (n={})", rs.len()), c)))
                .collect();
            if series.is_empty() {
                continue;
            }
            write(&format!("{prefix}{col}.svg"), &svg_plot(col, &series))?;
        }
    }
    Ok(ReportSummary { runs: runs.len(), files })
}

/// Encoder means for every frame of every clip: `clip,t,mu_0,...`.
pub fn export_latents(prior: &MotionPrior, clips: &[MotionClip]) -> Result<String> {
    let mut out = schema_comment("latents");
    out.push_str("\nclip,t");
    for j in 0..prior.d_z() {
        let _ = write!(out, ",mu_{j}");
    }
    out.push('\n');
    for (c, clip) in clips.iter().enumerate() {
        for t in 0..=clip.last_index() {
            let (mu, _) = prior.encode_reference(&extract_segment(clip, c, t)?)?;
            let _ = write!(out, "{},{t}", clip.name);
            for m in mu {
                let _ = write!(out, ",{m}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// One deterministic episode from `start` on clip `clip_id`, written as a
/// trajectory CSV with the reward terms of every step appended.
pub fn dump_trajectory(trainer: &Trainer, clip_id: usize, start: usize) -> Result<String> {
    let clip = trainer
        .clips
        .get(clip_id)
        .ok_or(Error::Index { index: clip_id, max: trainer.clips.len().saturating_sub(1) })?;
    if start >= clip.last_index() {
        return Err(Error::Index { index: start, max: clip.last_index().saturating_sub(1) });
    }
    let g = &trainer.sim.geometry;
    let prior = &trainer.prior;
    let mut state = reset_from_reference(&clip.frames[start], &clip.velocity(start), 0.0, g, &mut ChaCha8Rng::seed_from_u64(0));
    let mut out = schema_comment("trajectory");
    let _ = write!(out, "\nclip,t,{TRAJECTORY_HEADER},{}\n", RewardBreakdown::CSV_HEADER);
    for t in start..clip.last_index() {
        let (mu, _) = prior.encode_reference(&extract_segment(clip, clip_id, t)?)?;
        let action = prior.bounds.clamp(&prior.act(&mu, &state)?.0);
        let (next, forces) = trainer.sim.step_logged(&state, &action)?;
        let reference = &clip.frames[t + 1];
        let d_out = match &trainer.bank {
            Some(bank) => {
                let f = make_feature(&DiscFrame::from_state(&state), &DiscFrame::from_state(&next));
                bank.score(clip_id, &[f])?[0]
            }
            None => 0.0,
        };
        let mut rw = total_reward(&next, reference, d_out, trainer.mean_adv[clip_id], &trainer.cfg.weights, trainer.cfg.mode, g)?;
        rw.terminated = matches!(check_termination(&next, reference, &trainer.sim.config), Termination::Terminate(_));
        let last = forces.last().copied().unwrap_or_default();
        let mut row = Vec::new();
        write_trajectory_row(&mut row, &next, &last).map_err(|e| Error::io("<trajectory>", e))?;
        let _ = writeln!(out, "{},{},{},{}", clip.name, t + 1, String::from_utf8_lossy(&row), rw.csv_row());
        state = next;
        if rw.terminated {
            break;
        }
    }
    Ok(out)
}
