//! Hierarchical reuse: a high-level policy emits latent commands that the
//! frozen prior turns into joint targets.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{KvConfig, KvWriter};
use crate::dataset::{wrap_angle, RefPose, RefVelocity, RobotGeometry};
use crate::error::{Error, Result};
use crate::eval::schema_comment;
use crate::nn::{clip_grad_norm, Activation, Adam, Checkpoint, Mlp, LOG_STD_MAX, LOG_STD_MIN};
use crate::prior::{proprio_features, MotionPrior, PriorConfig, PROPRIO_DIM};
use crate::sim::{reset_from_reference, PlanarSim, RobotState, SimConfig};
use crate::trainer::{apply_sim, clipped_objective, gae, normalize_advantages, write_sim, CsvSink, ValueNormalizer};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Height the trunk must exceed during a jump window.
pub const JUMP_HEIGHT: f64 = 0.45;
pub const JUMP_WINDOW: f64 = 0.5;
/// Combined-task command period.
pub const COMMAND_PERIOD: f64 = 3.0;
/// Latent means are squashed into `+-LATENT_BOUND`.
const LATENT_BOUND: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Following,
    Jump,
    Combined,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "following" | "following-command" => Ok(Task::Following),
            "jump" | "jump-forward" => Ok(Task::Jump),
            "combined" => Ok(Task::Combined),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Following => "following",
            Task::Jump => "jump",
            Task::Combined => "combined",
        }
    }

    fn index(self) -> usize {
        match self {
            Task::Following => 0,
            Task::Jump => 1,
            Task::Combined => 2,
        }
    }
}

/// `exp(-4 (v_cmd - vx)^2)`.
pub fn speed_reward(v_cmd: f64, vx: f64) -> f64 {
    (-4.0 * (v_cmd - vx).powi(2)).exp()
}

/// `2 max(0, z - 0.45) / 0.15`, clamped to `[0, 2]`.
pub fn jump_bonus(root_z: f64) -> f64 {
    (2.0 * (root_z - JUMP_HEIGHT).max(0.0) / 0.15).clamp(0.0, 2.0)
}

/// Task reward for one step: speed tracking plus the height bonus while a
/// jump window is open.
pub fn task_reward(task: Task, state: &RobotState, command: &Command) -> f64 {
    let speed = speed_reward(command.speed, state.vx);
    match task {
        Task::Following => speed,
        Task::Jump | Task::Combined => speed + if command.in_window { jump_bonus(state.root_z) } else { 0.0 },
    }
}

/// The command in force at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    pub speed: f64,
    /// Seconds until the next jump window opens (0 inside a window, capped
    /// at [`COMMAND_PERIOD`] when none is scheduled).
    pub countdown: f64,
    pub in_window: bool,
}

/// Per-episode command timeline, a pure function of the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandSchedule {
    /// `(start time, speed)` pieces, sorted by time.
    pub speeds: Vec<(f64, f64)>,
    /// Jump-window start times.
    pub windows: Vec<f64>,
}

impl CommandSchedule {
    pub fn sample<R: Rng + ?Sized>(task: Task, duration: f64, speed_range: (f64, f64), rng: &mut R) -> Self {
        let draw = |rng: &mut R| rng.random_range(speed_range.0..=speed_range.1);
        match task {
            Task::Following => Self {
                speeds: vec![(0.0, draw(rng))],
                windows: Vec::new(),
            },
            Task::Jump => {
                let speed = draw(rng);
                let mut windows = Vec::new();
                let mut t = 1.0 + rng.random_range(0.0..1.0);
                while t + JUMP_WINDOW <= duration {
                    windows.push(t);
                    t += 2.0 + rng.random_range(0.0..1.0);
                }
                Self {
                    speeds: vec![(0.0, speed)],
                    windows,
                }
            }
            Task::Combined => {
                let mut speeds = Vec::new();
                let mut windows = Vec::new();
                let mut t = 0.0;
                while t < duration {
                    speeds.push((t, draw(rng)));
                    if rng.random_bool(0.5) {
                        let w = t + rng.random_range(0.5..COMMAND_PERIOD - JUMP_WINDOW);
                        if w + JUMP_WINDOW <= duration {
                            windows.push(w);
                        }
                    }
                    t += COMMAND_PERIOD;
                }
                Self { speeds, windows }
            }
        }
    }

    /// A fixed-speed schedule without jumps.
    pub fn constant(speed: f64) -> Self {
        Self {
            speeds: vec![(0.0, speed)],
            windows: Vec::new(),
        }
    }

    pub fn at(&self, time: f64) -> Command {
        let speed = self
            .speeds
            .iter()
            .take_while(|(t, _)| *t <= time + 1e-9)
            .last()
            .map(|(_, v)| *v)
            .unwrap_or(self.speeds[0].1);
        let in_window = self.windows.iter().any(|w| time >= *w && time < w + JUMP_WINDOW);
        let countdown = if in_window {
            0.0
        } else {
            self.windows
                .iter()
                .find(|w| **w > time)
                .map(|w| (w - time).min(COMMAND_PERIOD))
                .unwrap_or(COMMAND_PERIOD)
        };
        Command { speed, countdown, in_window }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    pub task: Task,
    pub seed: u64,
    pub prior_checkpoint: Option<PathBuf>,
    /// Replace the loaded prior with a freshly initialized one of the same
    /// shape (ablation).
    pub random_prior: bool,
    pub total_env_steps: usize,
    pub n_envs: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    /// Decay both learning rates linearly to zero over the run.
    pub lr_anneal: bool,
    pub ent_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub init_latent_std: f64,
    pub episode_seconds: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub eval_speeds: Vec<f64>,
    /// Episodes per eval speed.
    pub eval_episodes: usize,
    pub eval_seconds: f64,
    /// Eval speed error ignores this initial transient.
    pub eval_settle_seconds: f64,
    pub eval_every: usize,
    pub reset_noise: f64,
    pub single_thread: bool,
    pub geometry_file: Option<PathBuf>,
    pub sim: SimConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            task: Task::Following,
            seed: 0,
            prior_checkpoint: None,
            random_prior: false,
            total_env_steps: 1_000_000,
            n_envs: 16,
            horizon: 64,
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatches: 8,
            lr: 3e-4,
            lr_anneal: true,
            ent_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            hidden: vec![128, 128],
            init_latent_std: 0.5,
            episode_seconds: 8.0,
            speed_min: 0.0,
            speed_max: 1.2,
            eval_speeds: vec![0.3, 0.6, 1.0],
            eval_episodes: 4,
            eval_seconds: 6.0,
            eval_settle_seconds: 1.0,
            eval_every: 25,
            reset_noise: 0.05,
            single_thread: false,
            geometry_file: None,
            sim: SimConfig::default(),
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_envs == 0 || self.horizon == 0 || self.epochs == 0 || self.minibatches == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("n_envs, horizon, epochs, minibatches, eval_every and eval_episodes must be positive");
        }
        if self.minibatches > self.n_envs * self.horizon {
            return bad("more minibatches than transitions per update");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if self.eval_speeds.is_empty() || self.eval_speeds.iter().any(|v| !v.is_finite()) {
            return bad("eval_speeds must be a non-empty list of finite speeds");
        }
        if !(self.speed_min <= self.speed_max && self.speed_min >= 0.0) {
            return bad("speed range must satisfy 0 <= speed_min <= speed_max");
        }
        if !(self.episode_seconds > 0.0 && self.eval_seconds > self.eval_settle_seconds && self.eval_settle_seconds >= 0.0) {
            return bad("episode and evaluation durations must be positive");
        }
        if self.hidden.contains(&0) || !(self.init_latent_std > 0.0) || !(self.lr > 0.0) {
            return bad("hidden widths, init_latent_std and lr must be positive");
        }
        self.sim.validate()
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        if let Some(t) = kv.get::<String>("task")? {
            c.task = Task::parse(&t)?;
        }
        kv.apply("seed", &mut c.seed)?;
        if let Some(p) = kv.get::<PathBuf>("prior_checkpoint")? {
            c.prior_checkpoint = Some(p);
        }
        kv.apply("random_prior", &mut c.random_prior)?;
        kv.apply("total_env_steps", &mut c.total_env_steps)?;
        kv.apply("n_envs", &mut c.n_envs)?;
        kv.apply("horizon", &mut c.horizon)?;
        kv.apply("gamma", &mut c.gamma)?;
        kv.apply("lambda", &mut c.lambda)?;
        kv.apply("clip_eps", &mut c.clip_eps)?;
        kv.apply("epochs", &mut c.epochs)?;
        kv.apply("minibatches", &mut c.minibatches)?;
        kv.apply("lr", &mut c.lr)?;
        kv.apply("lr_anneal", &mut c.lr_anneal)?;
        kv.apply("ent_coef", &mut c.ent_coef)?;
        kv.apply("value_coef", &mut c.value_coef)?;
        kv.apply("max_grad_norm", &mut c.max_grad_norm)?;
        kv.apply_list("hidden", &mut c.hidden)?;
        kv.apply("init_latent_std", &mut c.init_latent_std)?;
        kv.apply("episode_seconds", &mut c.episode_seconds)?;
        kv.apply("speed_min", &mut c.speed_min)?;
        kv.apply("speed_max", &mut c.speed_max)?;
        kv.apply_list("eval_speeds", &mut c.eval_speeds)?;
        kv.apply("eval_episodes", &mut c.eval_episodes)?;
        kv.apply("eval_seconds", &mut c.eval_seconds)?;
        kv.apply("eval_settle_seconds", &mut c.eval_settle_seconds)?;
        kv.apply("eval_every", &mut c.eval_every)?;
        kv.apply("reset_noise", &mut c.reset_noise)?;
        kv.apply("single_thread", &mut c.single_thread)?;
        if let Some(g) = kv.get::<PathBuf>("geometry_file")? {
            c.geometry_file = Some(g);
        }
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

    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::default();
        w.put("task", self.task.as_str());
        w.put("seed", self.seed);
        if let Some(p) = &self.prior_checkpoint {
            w.put("prior_checkpoint", p.display());
        }
        w.put("random_prior", self.random_prior);
        w.put("total_env_steps", self.total_env_steps);
        w.put("n_envs", self.n_envs);
        w.put("horizon", self.horizon);
        w.put_f64("gamma", self.gamma);
        w.put_f64("lambda", self.lambda);
        w.put_f64("clip_eps", self.clip_eps);
        w.put("epochs", self.epochs);
        w.put("minibatches", self.minibatches);
        w.put_f64("lr", self.lr);
        w.put("lr_anneal", self.lr_anneal);
        w.put_f64("ent_coef", self.ent_coef);
        w.put_f64("value_coef", self.value_coef);
        w.put_f64("max_grad_norm", self.max_grad_norm);
        w.put_list("hidden", &self.hidden);
        w.put_f64("init_latent_std", self.init_latent_std);
        w.put_f64("episode_seconds", self.episode_seconds);
        w.put_f64("speed_min", self.speed_min);
        w.put_f64("speed_max", self.speed_max);
        w.put_list("eval_speeds", &self.eval_speeds);
        w.put("eval_episodes", self.eval_episodes);
        w.put_f64("eval_seconds", self.eval_seconds);
        w.put_f64("eval_settle_seconds", self.eval_settle_seconds);
        w.put("eval_every", self.eval_every);
        w.put_f64("reset_noise", self.reset_noise);
        w.put("single_thread", self.single_thread);
        if let Some(g) = &self.geometry_file {
            w.put("geometry_file", g.display());
        }
        write_sim(&mut w, &self.sim);
        w.finish()
    }
}

/// Width of the high-level observation for a prior.
pub fn observation_dim(prior: &PriorConfig) -> usize {
    prior.prop_out() + 6
}

/// `E_prop(s)` followed by speed command, scaled countdown, window flag and
/// a one-hot task id.
pub fn task_observations(prior: &MotionPrior, task: Task, states: &[RobotState], commands: &[Command]) -> Result<Array2<f64>> {
    let n = states.len();
    let mut prop = Array2::zeros((n, PROPRIO_DIM));
    for (i, s) in states.iter().enumerate() {
        prop.row_mut(i).as_slice_mut().expect("contiguous").copy_from_slice(&proprio_features(s));
    }
    let h = prior.prop_encoder.predict(&prop)?;
    let k = h.ncols();
    let mut obs = Array2::zeros((n, k + 6));
    for i in 0..n {
        for j in 0..k {
            obs[[i, j]] = h[[i, j]];
        }
        obs[[i, k]] = commands[i].speed;
        obs[[i, k + 1]] = commands[i].countdown / COMMAND_PERIOD;
        obs[[i, k + 2]] = commands[i].in_window as u8 as f64;
        obs[[i, k + 3 + task.index()]] = 1.0;
    }
    Ok(obs)
}

/// Gaussian policy over latent commands plus its critic.
#[derive(Debug, Clone, PartialEq)]
pub struct HighLevelPolicy {
    pub actor: Mlp,
    pub log_std: Vec<f64>,
    pub critic: Mlp,
    pub d_z: usize,
}

impl HighLevelPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, d_z: usize, hidden: &[usize], init_std: f64, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        let mut a = sizes.clone();
        a.push(d_z);
        let mut c = sizes;
        c.push(1);
        let mut actor = Mlp::new(&a, Activation::Elu, rng);
        actor.scale_output_layer(0.1);
        let mut critic = Mlp::new(&c, Activation::Elu, rng);
        critic.scale_output_layer(0.1);
        Self {
            actor,
            log_std: vec![init_std.ln(); d_z],
            critic,
            d_z,
        }
    }

    fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    /// Bounded latent means for a batch of observations.
    pub fn mean(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.actor.predict(obs)?.mapv(|v| LATENT_BOUND * v.tanh()))
    }

    /// Sample a latent for one observation row; with `rng = None` returns the mean.
    pub fn high_level_act<R: Rng + ?Sized>(&self, obs: &[f64], rng: Option<&mut R>) -> Result<Vec<f64>> {
        let o = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|_| Error::Shape { expected: obs.len(), got: 0 })?;
        let mut z = self.mean(&o)?.into_raw_vec_and_offset().0;
        if let Some(rng) = rng {
            for (v, l) in z.iter_mut().zip(self.clamped_log_std()) {
                let e: f64 = rng.sample(StandardNormal);
                *v += l.exp() * e;
            }
        }
        Ok(z)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.put_mlp("high.actor", &self.actor);
        ck.put_mlp("high.critic", &self.critic);
        ck.tensors.insert("high.log_std".into(), crate::nn::Tensor::vector(&self.log_std));
    }
}

/// Result of a deterministic evaluation at fixed speeds.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamEval {
    /// `(commanded speed, achieved mean speed, |error|)` per eval speed.
    pub per_speed: Vec<(f64, f64, f64)>,
    pub mean_speed_error: f64,
    /// Mean per-step speed term over all eval steps.
    pub mean_speed_term: f64,
    /// Fraction of jump windows with a both-feet-airborne step above the
    /// jump height; NaN when no windows were scheduled.
    pub jump_success: f64,
    /// Largest `|z|` emitted, in units of the prior's unit marginal std.
    pub max_abs_latent: f64,
    /// Episodes that ended by falling.
    pub falls: usize,
}

/// One row of the downstream metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamRow {
    pub update: usize,
    pub env_steps: usize,
    pub mean_reward: f64,
    pub episodes: usize,
    pub episode_return: f64,
    pub episode_length: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub latent_std: f64,
    pub eval: Option<DownstreamEval>,
}

pub const DOWNSTREAM_HEADER: &str = "update,env_steps,mean_reward,episodes,episode_return,episode_length,\
policy_loss,value_loss,latent_std,eval_speed_error,eval_speed_term,eval_jump_success,eval_max_abs_latent,eval_falls";

impl DownstreamRow {
    pub fn csv_row(&self) -> String {
        let f = |v: f64| if v.is_finite() { format!("{v}") } else { String::new() };
        let mut cells = vec![
            self.update.to_string(),
            self.env_steps.to_string(),
            f(self.mean_reward),
            self.episodes.to_string(),
            f(self.episode_return),
            f(self.episode_length),
            f(self.policy_loss),
            f(self.value_loss),
            f(self.latent_std),
        ];
        match &self.eval {
            Some(e) => cells.extend([
                f(e.mean_speed_error),
                f(e.mean_speed_term),
                f(e.jump_success),
                f(e.max_abs_latent),
                e.falls.to_string(),
            ]),
            None => cells.extend(std::iter::repeat_n(String::new(), 5)),
        }
        cells.join(",")
    }
}

#[derive(Debug, Clone)]
struct TaskEnv {
    rng: ChaCha8Rng,
    state: RobotState,
    schedule: CommandSchedule,
    steps: usize,
    ret: f64,
}

/// Fallen: trunk too low or tipped past 1 rad.
pub fn fallen(state: &RobotState) -> bool {
    state.root_z < 0.12 || wrap_angle(state.pitch).abs() > 1.0
}

fn standing_start(geometry: &RobotGeometry, noise: f64, rng: &mut ChaCha8Rng) -> RobotState {
    let pose = RefPose::new(0.0, geometry.standing_height(), 0.0, geometry.standing_joints(), geometry);
    reset_from_reference(&pose, &RefVelocity::default(), noise, geometry, rng)
}

/// High-level PPO over a frozen prior.
pub struct DownstreamTrainer {
    pub cfg: DownstreamConfig,
    prior: MotionPrior,
    pub policy: HighLevelPolicy,
    sim: PlanarSim,
    actor_opt: Adam,
    critic_opt: Adam,
    value_norm: ValueNormalizer,
    envs: Vec<TaskEnv>,
    rng: ChaCha8Rng,
    pub env_steps: usize,
    pub updates: usize,
}

struct Batch {
    obs: Array2<f64>,
    z: Array2<f64>,
    log_prob: Vec<f64>,
    values: Vec<f64>,
    next_values: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    episode_returns: Vec<f64>,
    episode_lengths: Vec<f64>,
}

impl DownstreamTrainer {
    /// Takes ownership of a prior that is only ever read from here on.
    pub fn new(cfg: DownstreamConfig, prior: MotionPrior) -> Result<Self> {
        cfg.validate()?;
        let geometry = match &cfg.geometry_file {
            Some(p) => RobotGeometry::load(p)?,
            None => RobotGeometry::default(),
        };
        let sim = PlanarSim::new(geometry, cfg.sim.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let prior = if cfg.random_prior {
            MotionPrior::new(prior.cfg.clone(), prior.n_clips(), &sim.geometry, &mut rng)?
        } else {
            prior
        };
        let obs_dim = observation_dim(&prior.cfg);
        let policy = HighLevelPolicy::new(obs_dim, prior.d_z(), &cfg.hidden, cfg.init_latent_std, &mut rng);
        let actor_opt = Adam::new(cfg.lr, &[policy.actor.num_params(), policy.d_z]);
        let critic_opt = Adam::new(cfg.lr, &[policy.critic.num_params()]);
        let mut envs = Vec::with_capacity(cfg.n_envs);
        for e in 0..cfg.n_envs {
            let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(7_919).wrapping_add(e as u64 + 11));
            let schedule = CommandSchedule::sample(cfg.task, cfg.episode_seconds, (cfg.speed_min, cfg.speed_max), &mut erng);
            let state = standing_start(&sim.geometry, cfg.reset_noise, &mut erng);
            envs.push(TaskEnv {
                rng: erng,
                state,
                schedule,
                steps: 0,
                ret: 0.0,
            });
        }
        Ok(Self {
            cfg,
            prior,
            policy,
            sim,
            actor_opt,
            critic_opt,
            value_norm: ValueNormalizer::default(),
            envs,
            rng,
            env_steps: 0,
            updates: 0,
        })
    }

    /// Load the prior from a training checkpoint; d_z must match `expected_d_z` when given.
    pub fn load_prior(path: impl AsRef<Path>, geometry: &RobotGeometry, expected_d_z: Option<usize>) -> Result<MotionPrior> {
        let ck = Checkpoint::load(path)?;
        let prior = MotionPrior::from_checkpoint(&ck, geometry)?;
        if let Some(d) = expected_d_z {
            if d != prior.d_z() {
                return Err(Error::Compatibility(format!("prior has d_z = {}, expected {d}", prior.d_z())));
            }
        }
        Ok(prior)
    }

    pub fn prior(&self) -> &MotionPrior {
        &self.prior
    }

    fn step_all(&self, states: &[RobotState], actions: &[[f64; 4]]) -> Vec<Result<RobotState>> {
        if self.cfg.single_thread {
            states.iter().zip(actions).map(|(s, a)| self.sim.step(s, a)).collect()
        } else {
            states.par_iter().zip(actions.par_iter()).map(|(s, a)| self.sim.step(s, a)).collect()
        }
    }

    /// Route latents through the frozen low-level policy at its mean.
    fn low_level(&self, states: &[RobotState], z: &Array2<f64>) -> Result<Vec<[f64; 4]>> {
        let mut prop = Array2::zeros((states.len(), PROPRIO_DIM));
        for (i, s) in states.iter().enumerate() {
            prop.row_mut(i).as_slice_mut().expect("contiguous").copy_from_slice(&proprio_features(s));
        }
        let mean = self.prior.action_mean_batch(&prop, z)?;
        Ok((0..states.len())
            .map(|r| self.prior.bounds.clamp(mean.row(r).as_slice().expect("contiguous")))
            .collect())
    }

    fn collect(&mut self) -> Result<Batch> {
        let (n, h, d) = (self.cfg.n_envs, self.cfg.horizon, self.policy.d_z);
        let dt = self.sim.config.control_dt;
        let max_steps = (self.cfg.episode_seconds / dt).round() as usize;
        let total = n * h;
        let obs_dim = observation_dim(&self.prior.cfg);
        let mut b = Batch {
            obs: Array2::zeros((total, obs_dim)),
            z: Array2::zeros((total, d)),
            log_prob: vec![0.0; total],
            values: vec![0.0; total],
            next_values: vec![0.0; total],
            rewards: vec![0.0; total],
            dones: vec![false; total],
            episode_returns: Vec::new(),
            episode_lengths: Vec::new(),
        };
        let mut terminal = vec![false; total];
        let log_std = self.policy.clamped_log_std();
        for k in 0..h {
            let states: Vec<RobotState> = self.envs.iter().map(|e| e.state).collect();
            let commands: Vec<Command> = self.envs.iter().map(|e| e.schedule.at(e.steps as f64 * dt)).collect();
            let obs = task_observations(&self.prior, self.cfg.task, &states, &commands)?;
            let mean = self.policy.mean(&obs)?;
            let values: Vec<f64> = self
                .policy
                .critic
                .predict(&obs)?
                .iter()
                .map(|v| self.value_norm.denormalize(*v))
                .collect();
            let mut z = mean.clone();
            for (e, env) in self.envs.iter_mut().enumerate() {
                let mut lp = 0.0;
                for j in 0..d {
                    let x: f64 = env.rng.sample(StandardNormal);
                    z[[e, j]] += log_std[j].exp() * x;
                    lp += -0.5 * x * x - log_std[j] - HALF_LN_2PI;
                }
                b.log_prob[e * h + k] = lp;
            }
            let actions = self.low_level(&states, &z)?;
            let stepped = self.step_all(&states, &actions);
            let mut truncated = Vec::new();
            for (e, res) in stepped.into_iter().enumerate() {
                let i = e * h + k;
                b.obs.row_mut(i).assign(&obs.row(e));
                b.z.row_mut(i).assign(&z.row(e));
                b.values[i] = values[e];
                let env = &mut self.envs[e];
                env.steps += 1;
                match res {
                    Ok(s) => {
                        let r = task_reward(self.cfg.task, &s, &commands[e]);
                        b.rewards[i] = r;
                        env.ret += r;
                        env.state = s;
                        if fallen(&s) {
                            terminal[i] = true;
                            b.dones[i] = true;
                        } else if env.steps >= max_steps {
                            b.dones[i] = true;
                            truncated.push(e);
                        }
                    }
                    Err(Error::Diverged { .. }) => {
                        terminal[i] = true;
                        b.dones[i] = true;
                    }
                    Err(err) => return Err(err),
                }
            }
            if !truncated.is_empty() {
                let ts: Vec<RobotState> = truncated.iter().map(|&e| self.envs[e].state).collect();
                let tc: Vec<Command> = truncated
                    .iter()
                    .map(|&e| self.envs[e].schedule.at(self.envs[e].steps as f64 * dt))
                    .collect();
                let tobs = task_observations(&self.prior, self.cfg.task, &ts, &tc)?;
                let tv = self.policy.critic.predict(&tobs)?;
                for (r, &e) in truncated.iter().enumerate() {
                    b.next_values[e * h + k] = self.value_norm.denormalize(tv[[r, 0]]);
                }
            }
            for e in 0..n {
                if b.dones[e * h + k] {
                    let env = &mut self.envs[e];
                    b.episode_returns.push(env.ret);
                    b.episode_lengths.push(env.steps as f64);
                    env.schedule = CommandSchedule::sample(self.cfg.task, self.cfg.episode_seconds, (self.cfg.speed_min, self.cfg.speed_max), &mut env.rng);
                    env.state = standing_start(&self.sim.geometry, self.cfg.reset_noise, &mut env.rng);
                    env.steps = 0;
                    env.ret = 0.0;
                }
            }
        }
        let states: Vec<RobotState> = self.envs.iter().map(|e| e.state).collect();
        let commands: Vec<Command> = self.envs.iter().map(|e| e.schedule.at(e.steps as f64 * dt)).collect();
        let obs = task_observations(&self.prior, self.cfg.task, &states, &commands)?;
        let last = self.policy.critic.predict(&obs)?;
        for e in 0..n {
            for k in 0..h {
                let i = e * h + k;
                if terminal[i] {
                    b.next_values[i] = 0.0;
                } else if b.dones[i] {
                } else if k + 1 < h {
                    b.next_values[i] = b.values[i + 1];
                } else {
                    b.next_values[i] = self.value_norm.denormalize(last[[e, 0]]);
                }
            }
        }
        Ok(b)
    }

    fn update(&mut self, b: &Batch) -> Result<(f64, f64)> {
        let (n, h) = (self.cfg.n_envs, self.cfg.horizon);
        let mut adv = Vec::with_capacity(n * h);
        let mut ret = Vec::with_capacity(n * h);
        for e in 0..n {
            let r = e * h..(e + 1) * h;
            let (a, rt) = gae(&b.rewards[r.clone()], &b.values[r.clone()], &b.next_values[r.clone()], &b.dones[r], self.cfg.gamma, self.cfg.lambda);
            adv.extend(a);
            ret.extend(rt);
        }
        normalize_advantages(&mut adv);
        self.value_norm.update(&ret);
        let targets: Vec<f64> = ret.iter().map(|r| self.value_norm.normalize(*r)).collect();
        let total = n * h;
        let mb = total / self.cfg.minibatches;
        let mut order: Vec<usize> = (0..total).collect();
        let (mut pl, mut vl, mut count) = (0.0, 0.0, 0.0);
        let d = self.policy.d_z;
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(mb).take(self.cfg.minibatches) {
                let bs = chunk.len() as f64;
                let obs = b.obs.select(ndarray::Axis(0), chunk);
                let z = b.z.select(ndarray::Axis(0), chunk);
                let (raw, tape) = self.policy.actor.forward(&obs)?;
                let ls = self.policy.clamped_log_std();
                let ls_live: Vec<bool> = self.policy.log_std.iter().map(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(l)).collect();
                let mut d_raw = Array2::zeros(raw.dim());
                let mut g_ls = vec![0.0; d];
                let mut surrogate = 0.0;
                for (r, &i) in chunk.iter().enumerate() {
                    let mut lp = 0.0;
                    for j in 0..d {
                        let m = LATENT_BOUND * raw[[r, j]].tanh();
                        let u = (z[[r, j]] - m) / ls[j].exp();
                        lp += -0.5 * u * u - ls[j] - HALF_LN_2PI;
                    }
                    let ratio = (lp - b.log_prob[i]).exp();
                    let (obj, live) = clipped_objective(ratio, adv[i], self.cfg.clip_eps);
                    surrogate += obj;
                    if live {
                        let g = -ratio * adv[i] / bs;
                        for j in 0..d {
                            let t = raw[[r, j]].tanh();
                            let m = LATENT_BOUND * t;
                            let var = (2.0 * ls[j]).exp();
                            let diff = z[[r, j]] - m;
                            d_raw[[r, j]] = g * diff / var * LATENT_BOUND * (1.0 - t * t);
                            if ls_live[j] {
                                g_ls[j] += g * (diff * diff / var - 1.0);
                            }
                        }
                    }
                }
                for j in 0..d {
                    if ls_live[j] {
                        g_ls[j] -= self.cfg.ent_coef;
                    }
                }
                let mut g_actor = vec![0.0; self.policy.actor.num_params()];
                self.policy.actor.backward(&tape, &d_raw, &mut g_actor)?;

                let (v, vtape) = self.policy.critic.forward(&obs)?;
                let mut dv = Array2::zeros((chunk.len(), 1));
                let mut value_loss = 0.0;
                for (r, &i) in chunk.iter().enumerate() {
                    let diff = v[[r, 0]] - targets[i];
                    value_loss += diff * diff / bs;
                    dv[[r, 0]] = 2.0 * self.cfg.value_coef * diff / bs;
                }
                let mut g_critic = vec![0.0; self.policy.critic.num_params()];
                self.policy.critic.backward(&vtape, &dv, &mut g_critic)?;
                let policy_loss = -surrogate / bs;
                if !(policy_loss.is_finite() && value_loss.is_finite()) {
                    return Err(Error::NonFiniteLoss(format!(
                        "downstream update {}: policy loss {policy_loss}, value loss {value_loss}; minibatch rows {chunk:?}",
                        self.updates + 1
                    )));
                }
                clip_grad_norm(&mut [&mut g_actor, &mut g_ls], self.cfg.max_grad_norm);
                self.actor_opt
                    .step(&mut [self.policy.actor.params_mut(), &mut self.policy.log_std], &[&g_actor, &g_ls])?;
                clip_grad_norm(&mut [&mut g_critic], self.cfg.max_grad_norm);
                self.critic_opt.step(&mut [self.policy.critic.params_mut()], &[&g_critic])?;
                pl += policy_loss;
                vl += value_loss;
                count += 1.0;
            }
        }
        Ok((pl / count, vl / count))
    }

    /// Deterministic episodes at each eval speed (and, for jump tasks, a
    /// fixed window schedule) from a noise-free standing start.
    pub fn evaluate(&self) -> Result<DownstreamEval> {
        let dt = self.sim.config.control_dt;
        let steps = (self.cfg.eval_seconds / dt).round() as usize;
        let settle = (self.cfg.eval_settle_seconds / dt).round() as usize;
        let reps = self.cfg.eval_episodes;
        let schedules: Vec<CommandSchedule> = self
            .cfg
            .eval_speeds
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, reps))
            .map(|v| {
                let mut s = CommandSchedule::constant(v);
                if self.cfg.task != Task::Following {
                    let mut t = 1.5;
                    while t + JUMP_WINDOW <= self.cfg.eval_seconds {
                        s.windows.push(t);
                        t += 2.5;
                    }
                }
                s
            })
            .collect();
        let m = schedules.len();
        // the first episode per speed starts noise-free, the rest from fixed perturbed stances
        let mut states: Vec<RobotState> = (0..m)
            .map(|i| {
                let k = i % reps;
                let noise = if k == 0 { 0.0 } else { self.cfg.reset_noise };
                standing_start(&self.sim.geometry, noise, &mut ChaCha8Rng::seed_from_u64(k as u64))
            })
            .collect();
        let mut alive = vec![true; m];
        let mut x_settle = vec![0.0; m];
        let mut x_end = vec![0.0; m];
        let mut end_step = vec![steps; m];
        let mut speed_terms = 0.0;
        let mut speed_count = 0.0;
        let mut max_abs = 0.0f64;
        let mut window_success: Vec<Vec<bool>> = schedules.iter().map(|s| vec![false; s.windows.len()]).collect();
        for k in 0..steps {
            let idx: Vec<usize> = (0..m).filter(|&i| alive[i]).collect();
            if idx.is_empty() {
                break;
            }
            let time = k as f64 * dt;
            let cur: Vec<RobotState> = idx.iter().map(|&i| states[i]).collect();
            let cmds: Vec<Command> = idx.iter().map(|&i| schedules[i].at(time)).collect();
            let obs = task_observations(&self.prior, self.cfg.task, &cur, &cmds)?;
            let z = self.policy.mean(&obs)?;
            max_abs = z.iter().fold(max_abs, |a, v| a.max(v.abs()));
            let actions = self.low_level(&cur, &z)?;
            let stepped = self.step_all(&cur, &actions);
            for (r, res) in stepped.into_iter().enumerate() {
                let i = idx[r];
                match res {
                    Ok(s) => {
                        states[i] = s;
                        speed_terms += speed_reward(cmds[r].speed, s.vx);
                        speed_count += 1.0;
                        if k + 1 == settle {
                            x_settle[i] = s.root_x;
                        }
                        x_end[i] = s.root_x;
                        if cmds[r].in_window && !s.foot_contact[0] && !s.foot_contact[1] && s.root_z > JUMP_HEIGHT {
                            if let Some(w) = schedules[i].windows.iter().position(|w| time >= *w && time < w + JUMP_WINDOW) {
                                window_success[i][w] = true;
                            }
                        }
                        if fallen(&s) {
                            alive[i] = false;
                            end_step[i] = k + 1;
                        }
                    }
                    Err(Error::Diverged { .. }) => {
                        alive[i] = false;
                        end_step[i] = k + 1;
                    }
                    Err(err) => return Err(err),
                }
            }
        }
        let per_episode: Vec<(f64, f64, f64)> = (0..m)
            .map(|i| {
                let v_cmd = schedules[i].speeds[0].1;
                let span = end_step[i].saturating_sub(settle);
                let achieved = if span == 0 { 0.0 } else { (x_end[i] - x_settle[i]) / (span as f64 * dt) };
                // a fall counts as zero progress for the remaining time
                let achieved = if end_step[i] < steps {
                    achieved * span as f64 / (steps - settle) as f64
                } else {
                    achieved
                };
                (v_cmd, achieved, (v_cmd - achieved).abs())
            })
            .collect();
        let per_speed: Vec<(f64, f64, f64)> = per_episode
            .chunks(reps)
            .map(|c| {
                let n = c.len() as f64;
                (c[0].0, c.iter().map(|e| e.1).sum::<f64>() / n, c.iter().map(|e| e.2).sum::<f64>() / n)
            })
            .collect();
        let m = per_speed.len();
        let windows: Vec<bool> = window_success.into_iter().flatten().collect();
        Ok(DownstreamEval {
            mean_speed_error: per_speed.iter().map(|p| p.2).sum::<f64>() / m.max(1) as f64,
            per_speed,
            mean_speed_term: if speed_count > 0.0 { speed_terms / speed_count } else { f64::NAN },
            jump_success: if windows.is_empty() {
                f64::NAN
            } else {
                windows.iter().filter(|w| **w).count() as f64 / windows.len() as f64
            },
            max_abs_latent: max_abs,
            falls: end_step.iter().filter(|s| **s < steps).count(),
        })
    }

    pub fn iterate(&mut self) -> Result<DownstreamRow> {
        let b = self.collect()?;
        let (policy_loss, value_loss) = self.update(&b)?;
        self.env_steps += b.rewards.len();
        self.updates += 1;
        Ok(DownstreamRow {
            update: self.updates,
            env_steps: self.env_steps,
            mean_reward: b.rewards.iter().sum::<f64>() / b.rewards.len() as f64,
            episodes: b.episode_returns.len(),
            episode_return: crate::eval::mean_std(&b.episode_returns).0,
            episode_length: crate::eval::mean_std(&b.episode_lengths).0,
            policy_loss,
            value_loss,
            latent_std: self.policy.clamped_log_std().iter().map(|l| l.exp()).sum::<f64>() / self.policy.d_z as f64,
            eval: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.policy.to_checkpoint(&mut ck);
        ck.meta.insert("task".into(), self.cfg.task.as_str().into());
        ck.meta.insert("d_z".into(), self.policy.d_z.to_string());
        ck.meta.insert("env_steps".into(), self.env_steps.to_string());
        ck.optimizers.insert("high.actor".into(), self.actor_opt.clone());
        ck.optimizers.insert("high.critic".into(), self.critic_opt.clone());
        ck
    }

    /// Train to `total_env_steps`, evaluating every `eval_every` updates and
    /// after the last one.
    pub fn train(&mut self, out_dir: Option<&Path>, mut progress: impl FnMut(&DownstreamRow)) -> Result<Vec<DownstreamRow>> {
        let mut sink = None;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("downstream_config.txt");
            std::fs::write(&p, self.cfg.to_kv_string()).map_err(|e| Error::io(&p, e))?;
            sink = Some(CsvSink::create(&dir.join("downstream_metrics.csv"), &schema_comment("downstream-metrics"), DOWNSTREAM_HEADER)?);
        }
        let per = self.cfg.n_envs * self.cfg.horizon;
        let total_updates = self.cfg.total_env_steps.div_ceil(per).max(1);
        let mut rows = Vec::new();
        while self.updates < total_updates {
            if self.cfg.lr_anneal {
                let lr = self.cfg.lr * (1.0 - self.updates as f64 / total_updates as f64);
                self.actor_opt.lr = lr;
                self.critic_opt.lr = lr;
            }
            let mut row = self.iterate()?;
            if self.updates % self.cfg.eval_every == 0 || self.updates == total_updates {
                row.eval = Some(self.evaluate()?);
            }
            if let Some(s) = sink.as_mut() {
                s.write_line(&row.csv_row())?;
            }
            progress(&row);
            rows.push(row);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join("highlevel.json"))?;
        }
        Ok(rows)
    }
}
