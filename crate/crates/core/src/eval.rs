//! Tracking metrics for evaluation episodes and their aggregation into a
//! per-(mode, seed, clip) table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataset::{wrap_angle, MotionClip, RefPose, RobotGeometry};
use crate::error::{Error, Result};
use crate::sim::RobotState;

/// Comment line written at the top of every CSV this crate emits.
pub fn schema_comment(kind: &str) -> String {
    format!("# schema: motion-prior {kind} v1")
}

/// Tracking errors of one step, or their mean over an episode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrackingErrors {
    /// `|dx|` in metres.
    pub root_x: f64,
    /// `|dz|` in metres.
    pub root_z: f64,
    /// `|wrap(d pitch)|` in radians.
    pub root_ori: f64,
    /// Mean squared joint error, rad^2 per joint.
    pub joint: f64,
    /// Mean Euclidean foot error in metres.
    pub foot: f64,
}

impl TrackingErrors {
    fn add(&mut self, o: &TrackingErrors) {
        self.root_x += o.root_x;
        self.root_z += o.root_z;
        self.root_ori += o.root_ori;
        self.joint += o.joint;
        self.foot += o.foot;
    }

    fn scale(&mut self, k: f64) {
        self.root_x *= k;
        self.root_z *= k;
        self.root_ori *= k;
        self.joint *= k;
        self.foot *= k;
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.root_x, self.root_z, self.root_ori, self.joint, self.foot]
    }
}

pub fn step_errors(state: &RobotState, reference: &RefPose, geometry: &RobotGeometry) -> TrackingErrors {
    let feet = state.feet(geometry);
    let joint = state
        .joints
        .iter()
        .zip(&reference.joints)
        .map(|(q, r)| (q - r).powi(2))
        .sum::<f64>()
        / 4.0;
    let foot = feet
        .iter()
        .zip(&reference.feet)
        .map(|(f, r)| (f[0] - r[0]).hypot(f[1] - r[1]))
        .sum::<f64>()
        / 2.0;
    TrackingErrors {
        root_x: (state.root_x - reference.root_x).abs(),
        root_z: (state.root_z - reference.root_z).abs(),
        root_ori: wrap_angle(state.pitch - reference.pitch).abs(),
        joint,
        foot,
    }
}

/// Mean per-step errors of `trajectory[k]` against `clip.frames[start + k]`.
pub fn tracking_metrics(
    trajectory: &[RobotState],
    clip: &MotionClip,
    start: usize,
    geometry: &RobotGeometry,
) -> Result<TrackingErrors> {
    if trajectory.is_empty() {
        return Err(Error::Validation("empty trajectory".into()));
    }
    if start + trajectory.len() > clip.frames.len() {
        return Err(Error::Validation(format!(
            "trajectory of {} steps from frame {start} overruns clip '{}' of {} frames",
            trajectory.len(),
            clip.name,
            clip.frames.len()
        )));
    }
    let mut acc = TrackingErrors::default();
    for (k, s) in trajectory.iter().enumerate() {
        acc.add(&step_errors(s, &clip.frames[start + k], geometry));
    }
    acc.scale(1.0 / trajectory.len() as f64);
    Ok(acc)
}

/// Running mean of step errors for an episode in progress.
#[derive(Debug, Clone, Copy, Default)]
pub struct ErrorAccumulator {
    sum: TrackingErrors,
    n: usize,
}

impl ErrorAccumulator {
    pub fn push(&mut self, e: &TrackingErrors) {
        self.sum.add(e);
        self.n += 1;
    }

    pub fn mean(&self) -> TrackingErrors {
        let mut m = self.sum;
        if self.n > 0 {
            m.scale(1.0 / self.n as f64);
        }
        m
    }
}

/// One deterministic evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub mode: String,
    pub seed: u64,
    pub update: usize,
    pub clip: String,
    pub start: usize,
    pub length: usize,
    /// The episode ran to the clip's last frame without early termination.
    pub reached_end: bool,
    pub episode_return: f64,
    pub errors: TrackingErrors,
}

impl EpisodeRecord {
    pub const CSV_HEADER: &'static str =
        "mode,seed,update,clip,start,length,reached_end,episode_return,root_x_err,root_z_err,root_ori_err,joint_err,foot_err";

    pub fn csv_row(&self) -> String {
        let e = &self.errors;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.seed,
            self.update,
            self.clip,
            self.start,
            self.length,
            self.reached_end as u8,
            self.episode_return,
            e.root_x,
            e.root_z,
            e.root_ori,
            e.joint,
            e.foot
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(Error::Validation(format!("episode row has {} fields, expected 13", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Validation(format!("bad number '{}' in episode row", f[i])))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse()
                .map_err(|_| Error::Validation(format!("bad integer '{}' in episode row", f[i])))
        };
        Ok(Self {
            mode: f[0].to_string(),
            seed: int(1)? as u64,
            update: int(2)?,
            clip: f[3].to_string(),
            start: int(4)?,
            length: int(5)?,
            reached_end: int(6)? != 0,
            episode_return: num(7)?,
            errors: TrackingErrors {
                root_x: num(8)?,
                root_z: num(9)?,
                root_ori: num(10)?,
                joint: num(11)?,
                foot: num(12)?,
            },
        })
    }
}

/// Read episode rows from CSV text, skipping the schema comment and header.
pub fn parse_episode_csv(text: &str) -> Result<Vec<EpisodeRecord>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty() && *l != EpisodeRecord::CSV_HEADER)
        .map(EpisodeRecord::parse_row)
        .collect()
}

pub fn episode_csv(records: &[EpisodeRecord]) -> String {
    let mut out = format!("{}\n{}\n", schema_comment("episodes"), EpisodeRecord::CSV_HEADER);
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Aggregated errors per (mode, seed, clip) from a set of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub mode: String,
    pub seed: u64,
    pub clip: String,
    pub episodes: usize,
    /// Mean and std of, in order: root x, root z, orientation, joint, foot
    /// errors, episode return, episode length.
    pub stats: [(f64, f64); 7],
    pub reach_fraction: f64,
}

pub const METRIC_NAMES: [&str; 7] = [
    "root_x_err",
    "root_z_err",
    "root_ori_err",
    "joint_err",
    "foot_err",
    "episode_return",
    "episode_length",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    /// Group episodes by (mode, seed, clip) in sorted order.
    pub fn from_episodes(records: &[EpisodeRecord]) -> Self {
        let mut groups: BTreeMap<(String, u64, String), Vec<&EpisodeRecord>> = BTreeMap::new();
        for r in records {
            groups.entry((r.mode.clone(), r.seed, r.clip.clone())).or_default().push(r);
        }
        let rows = groups
            .into_iter()
            .map(|((mode, seed, clip), eps)| {
                let col = |f: &dyn Fn(&EpisodeRecord) -> f64| mean_std(&eps.iter().map(|e| f(e)).collect::<Vec<_>>());
                let stats = [
                    col(&|e| e.errors.root_x),
                    col(&|e| e.errors.root_z),
                    col(&|e| e.errors.root_ori),
                    col(&|e| e.errors.joint),
                    col(&|e| e.errors.foot),
                    col(&|e| e.episode_return),
                    col(&|e| e.length as f64),
                ];
                let reach = eps.iter().filter(|e| e.reached_end).count() as f64 / eps.len() as f64;
                MetricsRow {
                    mode,
                    seed,
                    clip,
                    episodes: eps.len(),
                    stats,
                    reach_fraction: reach,
                }
            })
            .collect();
        Self { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = schema_comment("metrics-table");
        out.push_str("\nmode,seed,clip,episodes");
        for n in METRIC_NAMES {
            let _ = write!(out, ",{n}_mean,{n}_std");
        }
        out.push_str(",reach_fraction\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{}", r.mode, r.seed, r.clip, r.episodes);
            for (m, s) in r.stats {
                let _ = write!(out, ",{m},{s}");
            }
            let _ = writeln!(out, ",{}", r.reach_fraction);
        }
        out
    }
}
