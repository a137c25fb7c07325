//! PPO training of the motion prior: batched rollouts over many clips,
//! GAE, the clipped surrogate with the AR-KL term, discriminator
//! co-training, evaluation and metrics.

mod ppo;
mod rollout;
mod update;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ppo::{clipped_objective, gae, normalize_advantages, ValueNormalizer};
pub use rollout::{sample_start, Env, RolloutBuffer, RolloutStats};
pub use update::UpdateStats;

use crate::config::{KvConfig, KvWriter};
use crate::dataset::{
    generate_synthetic_clip, load_clip, resample_clip, standard_menu, MotionClip, RobotGeometry, SynthKind, SynthParams,
};
use crate::discriminator::{DiscConfig, DiscStats, DiscriminatorBank};
use crate::error::{Error, Result};
use crate::eval::{episode_csv, mean_std, schema_comment, EpisodeRecord};
use crate::nn::{Adam, Checkpoint};
use crate::prior::{MotionPrior, PriorConfig};
use crate::rewards::{RewardMode, RewardWeights};
use crate::sim::{PlanarSim, SimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: RewardMode,
    pub total_env_steps: usize,
    pub n_envs: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub ent_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Evaluate every this many updates (and after the last one).
    pub eval_every: usize,
    /// Evaluation episodes per clip, with starts spread evenly.
    pub eval_episodes: usize,
    /// Write a numbered checkpoint every this many env steps; 0 disables.
    pub checkpoint_every: usize,
    pub reset_noise: f64,
    /// Episodes start no later than `T - start_margin`.
    pub start_margin: usize,
    pub mean_adv_decay: f64,
    pub single_thread: bool,
    /// Clip names: files `<name>.json` under `dataset_dir`, or entries of
    /// the synthetic generator menu when no directory is given.
    pub clips: Vec<String>,
    pub dataset_dir: Option<PathBuf>,
    pub geometry_file: Option<PathBuf>,
    pub prior: PriorConfig,
    pub disc: DiscConfig,
    pub weights: RewardWeights,
    pub sim: SimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: RewardMode::Vim,
            total_env_steps: 2_000_000,
            n_envs: 16,
            horizon: 64,
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatches: 8,
            lr: 3e-4,
            critic_lr: 3e-4,
            ent_coef: 0.003,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            eval_every: 25,
            eval_episodes: 8,
            checkpoint_every: 0,
            reset_noise: 0.05,
            start_margin: 40,
            mean_adv_decay: 0.99,
            single_thread: false,
            clips: vec!["hop".into()],
            dataset_dir: None,
            geometry_file: None,
            prior: PriorConfig::default(),
            disc: DiscConfig::default(),
            weights: RewardWeights::default(),
            sim: SimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_envs == 0 || self.horizon == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("n_envs, horizon, epochs and minibatches must be positive");
        }
        if self.minibatches > self.n_envs * self.horizon {
            return bad("more minibatches than transitions per update");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !((0.0..=1.0).contains(&self.gamma) && (0.0..=1.0).contains(&self.lambda)) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.critic_lr > 0.0 && self.max_grad_norm > 0.0) {
            return bad("learning rates and max_grad_norm must be positive");
        }
        if !(self.ent_coef >= 0.0 && self.value_coef >= 0.0 && self.reset_noise >= 0.0) {
            return bad("ent_coef, value_coef and reset_noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.mean_adv_decay) {
            return bad("mean_adv_decay must lie in [0, 1)");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        if self.clips.is_empty() {
            return bad("at least one clip is required");
        }
        if self.prior.resample_every != 1 {
            return bad("training supports resample_every = 1 only");
        }
        self.prior.validate()?;
        self.disc.validate()?;
        self.weights.validate()?;
        self.sim.validate()
    }

    /// Defaults overridden by every key present in `kv`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        kv.apply("seed", &mut c.seed)?;
        if let Some(m) = kv.get::<String>("mode")? {
            c.mode = RewardMode::parse(&m)?;
        }
        kv.apply("total_env_steps", &mut c.total_env_steps)?;
        kv.apply("n_envs", &mut c.n_envs)?;
        kv.apply("horizon", &mut c.horizon)?;
        kv.apply("gamma", &mut c.gamma)?;
        kv.apply("lambda", &mut c.lambda)?;
        kv.apply("clip_eps", &mut c.clip_eps)?;
        kv.apply("epochs", &mut c.epochs)?;
        kv.apply("minibatches", &mut c.minibatches)?;
        kv.apply("lr", &mut c.lr)?;
        kv.apply("critic_lr", &mut c.critic_lr)?;
        kv.apply("ent_coef", &mut c.ent_coef)?;
        kv.apply("value_coef", &mut c.value_coef)?;
        kv.apply("max_grad_norm", &mut c.max_grad_norm)?;
        kv.apply("eval_every", &mut c.eval_every)?;
        kv.apply("eval_episodes", &mut c.eval_episodes)?;
        kv.apply("checkpoint_every", &mut c.checkpoint_every)?;
        kv.apply("reset_noise", &mut c.reset_noise)?;
        kv.apply("start_margin", &mut c.start_margin)?;
        kv.apply("mean_adv_decay", &mut c.mean_adv_decay)?;
        kv.apply("single_thread", &mut c.single_thread)?;
        kv.apply_list("clips", &mut c.clips)?;
        if let Some(d) = kv.get::<PathBuf>("dataset_dir")? {
            c.dataset_dir = Some(d);
        }
        if let Some(g) = kv.get::<PathBuf>("geometry_file")? {
            c.geometry_file = Some(g);
        }
        apply_prior(kv, &mut c.prior)?;

        let d = &mut c.disc;
        kv.apply_list("disc.hidden", &mut d.hidden)?;
        kv.apply("disc.lr", &mut d.lr)?;
        kv.apply("disc.gp_weight", &mut d.gp_weight)?;
        kv.apply("disc.batch_size", &mut d.batch_size)?;
        kv.apply("disc.steps_per_update", &mut d.steps_per_update)?;
        kv.apply("disc.replay_capacity", &mut d.replay_capacity)?;
        kv.apply("disc.max_grad_norm", &mut d.max_grad_norm)?;

        let w = &mut c.weights;
        kv.apply("reward.w_func_ori", &mut w.w_func_ori)?;
        kv.apply("reward.w_func_pos_xy", &mut w.w_func_pos_xy)?;
        kv.apply("reward.w_func_pos_z", &mut w.w_func_pos_z)?;
        kv.apply("reward.w_style_adv", &mut w.w_style_adv)?;
        kv.apply("reward.w_style_joint", &mut w.w_style_joint)?;

        apply_sim(kv, &mut c.sim)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let kv = KvConfig::load(path)?;
        let c = Self::from_kv(&kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// The full resolved configuration in file syntax.
    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::default();
        w.put("seed", self.seed);
        w.put("mode", self.mode.as_str());
        w.put("total_env_steps", self.total_env_steps);
        w.put("n_envs", self.n_envs);
        w.put("horizon", self.horizon);
        w.put_f64("gamma", self.gamma);
        w.put_f64("lambda", self.lambda);
        w.put_f64("clip_eps", self.clip_eps);
        w.put("epochs", self.epochs);
        w.put("minibatches", self.minibatches);
        w.put_f64("lr", self.lr);
        w.put_f64("critic_lr", self.critic_lr);
        w.put_f64("ent_coef", self.ent_coef);
        w.put_f64("value_coef", self.value_coef);
        w.put_f64("max_grad_norm", self.max_grad_norm);
        w.put("eval_every", self.eval_every);
        w.put("eval_episodes", self.eval_episodes);
        w.put("checkpoint_every", self.checkpoint_every);
        w.put_f64("reset_noise", self.reset_noise);
        w.put("start_margin", self.start_margin);
        w.put_f64("mean_adv_decay", self.mean_adv_decay);
        w.put("single_thread", self.single_thread);
        w.put_list("clips", &self.clips);
        if let Some(d) = &self.dataset_dir {
            w.put("dataset_dir", d.display());
        }
        if let Some(g) = &self.geometry_file {
            w.put("geometry_file", g.display());
        }
        write_prior(&mut w, &self.prior);
        let d = &self.disc;
        w.put_list("disc.hidden", &d.hidden);
        w.put_f64("disc.lr", d.lr);
        w.put_f64("disc.gp_weight", d.gp_weight);
        w.put("disc.batch_size", d.batch_size);
        w.put("disc.steps_per_update", d.steps_per_update);
        w.put("disc.replay_capacity", d.replay_capacity);
        w.put_f64("disc.max_grad_norm", d.max_grad_norm);
        let r = &self.weights;
        w.put_f64("reward.w_func_ori", r.w_func_ori);
        w.put_f64("reward.w_func_pos_xy", r.w_func_pos_xy);
        w.put_f64("reward.w_func_pos_z", r.w_func_pos_z);
        w.put_f64("reward.w_style_adv", r.w_style_adv);
        w.put_f64("reward.w_style_joint", r.w_style_joint);
        write_sim(&mut w, &self.sim);
        w.finish()
    }

    pub fn transitions_per_update(&self) -> usize {
        self.n_envs * self.horizon
    }
}

pub(crate) fn apply_prior(kv: &KvConfig, p: &mut PriorConfig) -> Result<()> {
    kv.apply("prior.alpha", &mut p.alpha)?;
    kv.apply("prior.beta", &mut p.beta)?;
    kv.apply("prior.d_z", &mut p.d_z)?;
    kv.apply("prior.resample_every", &mut p.resample_every)?;
    kv.apply_list("prior.encoder_hidden", &mut p.encoder_hidden)?;
    kv.apply_list("prior.prop_layers", &mut p.prop_layers)?;
    kv.apply_list("prior.policy_hidden", &mut p.policy_hidden)?;
    kv.apply_list("prior.critic_hidden", &mut p.critic_hidden)?;
    kv.apply("prior.embed_dim", &mut p.embed_dim)?;
    kv.apply("prior.init_action_std", &mut p.init_action_std)
}

fn write_prior(w: &mut KvWriter, p: &PriorConfig) {
    w.put_f64("prior.alpha", p.alpha);
    w.put_f64("prior.beta", p.beta);
    w.put("prior.d_z", p.d_z);
    w.put("prior.resample_every", p.resample_every);
    w.put_list("prior.encoder_hidden", &p.encoder_hidden);
    w.put_list("prior.prop_layers", &p.prop_layers);
    w.put_list("prior.policy_hidden", &p.policy_hidden);
    w.put_list("prior.critic_hidden", &p.critic_hidden);
    w.put("prior.embed_dim", p.embed_dim);
    w.put_f64("prior.init_action_std", p.init_action_std);
}

pub(crate) fn apply_sim(kv: &KvConfig, s: &mut SimConfig) -> Result<()> {
    kv.apply("sim.control_dt", &mut s.control_dt)?;
    kv.apply("sim.substeps", &mut s.substeps)?;
    kv.apply("sim.gravity", &mut s.gravity)?;
    kv.apply("sim.contact_stiffness", &mut s.contact_stiffness)?;
    kv.apply("sim.contact_damping", &mut s.contact_damping)?;
    kv.apply("sim.tangential_stiffness", &mut s.tangential_stiffness)?;
    kv.apply("sim.tangential_damping", &mut s.tangential_damping)?;
    kv.apply("sim.friction", &mut s.friction)?;
    kv.apply("sim.kp", &mut s.kp)?;
    kv.apply("sim.kd", &mut s.kd)?;
    kv.apply("sim.joint_damping", &mut s.joint_damping)?;
    kv.apply("sim.leg_inertia", &mut s.leg_inertia)?;
    kv.apply("sim.pos_err_max", &mut s.pos_err_max)?;
    kv.apply("sim.ori_err_max", &mut s.ori_err_max)
}

pub(crate) fn write_sim(w: &mut KvWriter, s: &SimConfig) {
    w.put_f64("sim.control_dt", s.control_dt);
    w.put("sim.substeps", s.substeps);
    w.put_f64("sim.gravity", s.gravity);
    w.put_f64("sim.contact_stiffness", s.contact_stiffness);
    w.put_f64("sim.contact_damping", s.contact_damping);
    w.put_f64("sim.tangential_stiffness", s.tangential_stiffness);
    w.put_f64("sim.tangential_damping", s.tangential_damping);
    w.put_f64("sim.friction", s.friction);
    w.put_f64("sim.kp", s.kp);
    w.put_f64("sim.kd", s.kd);
    w.put_f64("sim.joint_damping", s.joint_damping);
    w.put_f64("sim.leg_inertia", s.leg_inertia);
    w.put_f64("sim.pos_err_max", s.pos_err_max);
    w.put_f64("sim.ori_err_max", s.ori_err_max);
}

/// Load named clips from `dataset_dir`, or synthesize them from the
/// generator menu (menu names or bare generator kinds). Clips are resampled
/// to the control rate when their timestep differs.
pub fn resolve_clips(
    names: &[String],
    dataset_dir: Option<&Path>,
    geometry: &RobotGeometry,
    control_dt: f64,
) -> Result<Vec<MotionClip>> {
    let menu = standard_menu();
    names
        .iter()
        .map(|name| {
            let clip = match dataset_dir {
                Some(dir) => load_clip(dir.join(format!("{name}.json")), geometry)?,
                None => {
                    let (kind, params) = match menu.iter().find(|(n, _, _)| n == name) {
                        Some((_, k, p)) => (*k, p.clone()),
                        None => {
                            let k = SynthKind::parse(name)?;
                            (k, SynthParams::defaults(k))
                        }
                    };
                    let mut c = generate_synthetic_clip(kind, &params, geometry)?;
                    c.name = name.clone();
                    c
                }
            };
            if (clip.dt - control_dt).abs() > 1e-12 {
                resample_clip(&clip, control_dt, geometry)
            } else {
                Ok(clip)
            }
        })
        .collect()
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub update: usize,
    pub env_steps: usize,
    pub rollout: RolloutStats,
    pub ppo: UpdateStats,
    pub disc_loss: f64,
    pub disc_expert: f64,
    pub disc_policy: f64,
    pub mean_adv: f64,
    pub eval: Option<EvalSummary>,
}

pub const METRICS_HEADER: &str = "update,env_steps,mean_reward,episodes,episode_return,episode_length,\
r_ori,r_pos_xy,r_pos_z,r_joint,r_adv,mean_adv,sim_resets,\
policy_loss,value_loss,ar_kl,entropy,approx_kl,clip_frac,\
disc_loss,disc_expert,disc_policy,\
eval_root_x_err,eval_root_z_err,eval_root_ori_err,eval_joint_err,eval_foot_err,eval_return,eval_length,eval_reach_frac";

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

impl MetricsRow {
    pub fn csv_row(&self) -> String {
        let r = &self.rollout;
        let p = &self.ppo;
        let mut cells: Vec<String> = vec![
            self.update.to_string(),
            self.env_steps.to_string(),
            fmt_opt(r.mean_reward),
            r.episodes.to_string(),
            fmt_opt(r.episode_return),
            fmt_opt(r.episode_length),
            fmt_opt(r.r_ori),
            fmt_opt(r.r_pos_xy),
            fmt_opt(r.r_pos_z),
            fmt_opt(r.r_joint),
            fmt_opt(r.r_adv),
            fmt_opt(self.mean_adv),
            r.sim_resets.to_string(),
            fmt_opt(p.policy_loss),
            fmt_opt(p.value_loss),
            fmt_opt(p.ar_kl),
            fmt_opt(p.entropy),
            fmt_opt(p.approx_kl),
            fmt_opt(p.clip_frac),
            fmt_opt(self.disc_loss),
            fmt_opt(self.disc_expert),
            fmt_opt(self.disc_policy),
        ];
        match &self.eval {
            Some(e) => cells.extend(
                [
                    e.root_x, e.root_z, e.root_ori, e.joint, e.foot, e.episode_return, e.length, e.reach_fraction,
                ]
                .map(fmt_opt),
            ),
            None => cells.extend(std::iter::repeat_n(String::new(), 8)),
        }
        cells.join(",")
    }
}

/// Means over one evaluation sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub root_x: f64,
    pub root_z: f64,
    pub root_ori: f64,
    pub joint: f64,
    pub foot: f64,
    pub episode_return: f64,
    pub length: f64,
    pub reach_fraction: f64,
}

impl EvalSummary {
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let m = |f: &dyn Fn(&EpisodeRecord) -> f64| mean_std(&records.iter().map(f).collect::<Vec<_>>()).0;
        Self {
            root_x: m(&|r| r.errors.root_x),
            root_z: m(&|r| r.errors.root_z),
            root_ori: m(&|r| r.errors.root_ori),
            joint: m(&|r| r.errors.joint),
            foot: m(&|r| r.errors.foot),
            episode_return: m(&|r| r.episode_return),
            length: m(&|r| r.length as f64),
            reach_fraction: m(&|r| r.reached_end as u8 as f64),
        }
    }
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub updates: usize,
    pub env_steps: usize,
    pub final_eval: Vec<EpisodeRecord>,
    pub metrics: Vec<MetricsRow>,
}

/// Owns every piece of training state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub sim: PlanarSim,
    pub clips: Vec<MotionClip>,
    pub prior: MotionPrior,
    /// Absent in motion-imitation mode, which never queries a discriminator.
    pub bank: Option<DiscriminatorBank>,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub value_norm: ValueNormalizer,
    /// Per-clip moving average of the adversarial reward.
    pub mean_adv: Vec<f64>,
    pub envs: Vec<Env>,
    rng: ChaCha8Rng,
    pub env_steps: usize,
    pub updates: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let geometry = match &cfg.geometry_file {
            Some(p) => RobotGeometry::load(p)?,
            None => RobotGeometry::default(),
        };
        let clips = resolve_clips(&cfg.clips, cfg.dataset_dir.as_deref(), &geometry, cfg.sim.control_dt)?;
        Self::with_clips(cfg, geometry, clips)
    }

    /// Build around explicit clips (names in `cfg.clips` are ignored).
    pub fn with_clips(cfg: TrainConfig, geometry: RobotGeometry, clips: Vec<MotionClip>) -> Result<Self> {
        cfg.validate()?;
        if clips.is_empty() {
            return Err(Error::Config("no clips".into()));
        }
        for c in &clips {
            c.validate(&geometry)?;
            if (c.dt - cfg.sim.control_dt).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "clip '{}' has dt {} but the control step is {}",
                    c.name, c.dt, cfg.sim.control_dt
                )));
            }
        }
        let sim = PlanarSim::new(geometry.clone(), cfg.sim.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let prior = MotionPrior::new(cfg.prior.clone(), clips.len(), &geometry, &mut rng)?;
        let bank = if cfg.mode.uses_discriminator() {
            Some(DiscriminatorBank::new(cfg.disc.clone(), &clips, cfg.seed ^ 0x5EED_D15C)?)
        } else {
            None
        };
        let actor_opt = Adam::new(
            cfg.lr,
            &[prior.encoder.num_params(), prior.prop_encoder.num_params(), prior.policy.num_params(), prior.action_log_std.len()],
        );
        let critic_opt = Adam::new(cfg.critic_lr, &[prior.critic.num_params(), prior.embeddings.params().len()]);
        let mut envs = Vec::with_capacity(cfg.n_envs);
        for e in 0..cfg.n_envs {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(e as u64 + 1);
            envs.push(Env::new(seed, &clips, &sim, cfg.reset_noise, cfg.start_margin, cfg.prior.d_z));
        }
        Ok(Self {
            mean_adv: vec![0.0; clips.len()],
            cfg,
            sim,
            clips,
            prior,
            bank,
            actor_opt,
            critic_opt,
            value_norm: ValueNormalizer::default(),
            envs,
            rng,
            env_steps: 0,
            updates: 0,
        })
    }

    /// Rebuild a trainer from a saved run: config, clips and checkpoint.
    /// Rollout environments restart fresh; the prior, discriminators,
    /// optimizers and per-clip adversarial averages come from `ck`.
    pub fn restore(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        if let Some(names) = ck.meta.get("clips") {
            let have: Vec<&str> = t.clips.iter().map(|c| c.name.as_str()).collect();
            if names.split(',').collect::<Vec<_>>() != have {
                return Err(Error::Compatibility(format!("checkpoint clips [{names}] differ from config clips {have:?}")));
            }
        }
        t.prior = MotionPrior::from_checkpoint(ck, &t.sim.geometry)?;
        if t.prior.n_clips() != t.clips.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} clip embeddings, config has {} clips",
                t.prior.n_clips(),
                t.clips.len()
            )));
        }
        if let Some(bank) = t.bank.as_mut() {
            bank.restore(ck)?;
        }
        if let Some(a) = ck.optimizers.get("actor") {
            t.actor_opt = a.clone();
        }
        if let Some(c) = ck.optimizers.get("critic") {
            t.critic_opt = c.clone();
        }
        if let Some(m) = ck.meta.get("mean_adv") {
            let vals: Vec<f64> = m
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Compatibility(format!("bad mean_adv entry: {e}")))?;
            if vals.len() == t.clips.len() {
                t.mean_adv = vals;
            }
        }
        if let Some(n) = ck.meta.get("env_steps").and_then(|v| v.parse().ok()) {
            t.env_steps = n;
        }
        Ok(t)
    }

    /// One collect + update cycle.
    pub fn iterate(&mut self) -> Result<MetricsRow> {
        let buffer = self.collect_rollouts()?;
        let ppo = self.ppo_update(&buffer)?;
        let disc = self.update_discriminators(&buffer)?;
        self.update_mean_adv(&buffer);
        self.env_steps += buffer.len();
        self.updates += 1;
        let active: Vec<&DiscStats> = disc.iter().filter(|s| s.updated).collect();
        let avg = |f: &dyn Fn(&DiscStats) -> f64| {
            if active.is_empty() {
                f64::NAN
            } else {
                active.iter().map(|s| f(s)).sum::<f64>() / active.len() as f64
            }
        };
        Ok(MetricsRow {
            update: self.updates,
            env_steps: self.env_steps,
            rollout: buffer.stats.clone(),
            ppo,
            disc_loss: avg(&|s| s.loss),
            disc_expert: avg(&|s| s.mean_expert),
            disc_policy: avg(&|s| s.mean_policy),
            mean_adv: self.mean_adv.iter().sum::<f64>() / self.mean_adv.len() as f64,
            eval: None,
        })
    }

    fn update_discriminators(&mut self, buffer: &RolloutBuffer) -> Result<Vec<DiscStats>> {
        let Some(bank) = self.bank.as_mut() else {
            return Ok(Vec::new());
        };
        let mut grouped = vec![Vec::new(); self.clips.len()];
        for (i, f) in buffer.disc_features.iter().enumerate() {
            if let Some(f) = f {
                grouped[buffer.clip_id[i]].push(*f);
            }
        }
        bank.update_bank(&grouped, !self.cfg.single_thread)
    }

    /// Fold this batch's adversarial rewards into the per-clip averages in
    /// time-major order.
    fn update_mean_adv(&mut self, buffer: &RolloutBuffer) {
        if !self.cfg.mode.uses_discriminator() {
            return;
        }
        let decay = self.cfg.mean_adv_decay;
        let (n, h) = (self.cfg.n_envs, self.cfg.horizon);
        for k in 0..h {
            for e in 0..n {
                let i = e * h + k;
                if buffer.disc_features[i].is_some() {
                    let c = buffer.clip_id[i];
                    self.mean_adv[c] = decay * self.mean_adv[c] + (1.0 - decay) * buffer.rewards[i].r_adv;
                }
            }
        }
    }

    /// Checkpoint with the prior, discriminators and optimizer state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.prior.to_checkpoint(&mut ck);
        ck.meta.insert("mode".into(), self.cfg.mode.as_str().into());
        ck.meta.insert("seed".into(), self.cfg.seed.to_string());
        ck.meta.insert("env_steps".into(), self.env_steps.to_string());
        ck.meta.insert("clips".into(), self.clips.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(","));
        ck.meta.insert(
            "mean_adv".into(),
            self.mean_adv.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","),
        );
        ck.optimizers.insert("actor".into(), self.actor_opt.clone());
        ck.optimizers.insert("critic".into(), self.critic_opt.clone());
        if let Some(bank) = &self.bank {
            bank.to_checkpoint(&mut ck);
        }
        ck
    }

    /// Run to `total_env_steps`. With an output directory, writes the
    /// resolved config, the metrics stream, evaluation episodes and
    /// checkpoints there. `progress` sees every metrics row.
    pub fn train(&mut self, out_dir: Option<&Path>, mut progress: impl FnMut(&MetricsRow)) -> Result<TrainSummary> {
        let mut metrics_out = None;
        let mut episodes_out = None;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join("config.txt");
            std::fs::write(&cfg_path, self.cfg.to_kv_string()).map_err(|e| Error::io(&cfg_path, e))?;
            metrics_out = Some(CsvSink::create(&dir.join("metrics.csv"), &schema_comment("metrics"), METRICS_HEADER)?);
            episodes_out = Some(CsvSink::create(&dir.join("eval_episodes.csv"), &schema_comment("episodes"), EpisodeRecord::CSV_HEADER)?);
        }
        let per_update = self.cfg.transitions_per_update();
        let total_updates = self.cfg.total_env_steps.div_ceil(per_update).max(1);
        let mut rows = Vec::new();
        let mut final_eval = Vec::new();
        let mut next_ckpt = self.cfg.checkpoint_every;
        while self.updates < total_updates {
            let mut row = self.iterate()?;
            let last = self.updates == total_updates;
            if self.updates % self.cfg.eval_every == 0 || last {
                let records = self.evaluate(self.cfg.eval_episodes)?;
                row.eval = Some(EvalSummary::from_records(&records));
                if let Some(sink) = episodes_out.as_mut() {
                    for r in &records {
                        sink.write_line(&r.csv_row())?;
                    }
                }
                if last {
                    final_eval = records;
                }
            }
            if let Some(sink) = metrics_out.as_mut() {
                sink.write_line(&row.csv_row())?;
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.env_steps >= next_ckpt {
                    self.checkpoint().save(dir.join(format!("ckpt_{:010}.json", self.env_steps)))?;
                    next_ckpt += self.cfg.checkpoint_every;
                }
            }
            progress(&row);
            rows.push(row);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join("checkpoint.json"))?;
            let path = dir.join("final_eval.csv");
            std::fs::write(&path, episode_csv(&final_eval)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(TrainSummary {
            updates: self.updates,
            env_steps: self.env_steps,
            final_eval,
            metrics: rows,
        })
    }
}

/// Line-buffered CSV writer that flushes after each row so an aborted run
/// keeps everything written so far.
pub(crate) struct CsvSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvSink {
    pub(crate) fn create(path: &Path, comment: &str, header: &str) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut s = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        };
        s.write_line(comment)?;
        s.write_line(header)?;
        Ok(s)
    }

    pub(crate) fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
