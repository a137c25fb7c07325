//! One least-squares discriminator per reference clip, trained to tell
//! reference transitions from policy transitions.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{wrap_angle, MotionClip, RefPose, RefVelocity};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Activation, Adam, Checkpoint, Mlp, RngState};
use crate::sim::RobotState;

pub const FEATURE_DIM: usize = 26;

/// Joint velocities enter the feature scaled by this factor.
const JOINT_VEL_SCALE: f64 = 0.1;

pub type TransitionFeature = [f64; FEATURE_DIM];

/// The state components a discriminator sees for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscFrame {
    pub joints: [f64; 4],
    pub joint_vels: [f64; 4],
    pub root_z: f64,
    pub pitch: f64,
    pub vx: f64,
    pub vz: f64,
}

impl DiscFrame {
    pub fn from_state(s: &RobotState) -> Self {
        Self {
            joints: s.joints,
            joint_vels: s.joint_vels,
            root_z: s.root_z,
            pitch: s.pitch,
            vx: s.vx,
            vz: s.vz,
        }
    }

    /// Reference frame with finite-difference velocities.
    pub fn from_reference(p: &RefPose, v: &RefVelocity) -> Self {
        Self {
            joints: p.joints,
            joint_vels: v.joint_vels,
            root_z: p.root_z,
            pitch: p.pitch,
            vx: v.vx,
            vz: v.vz,
        }
    }

    fn write(&self, out: &mut [f64]) {
        out[..4].copy_from_slice(&self.joints);
        for (o, v) in out[4..8].iter_mut().zip(&self.joint_vels) {
            *o = JOINT_VEL_SCALE * v;
        }
        out[8] = self.root_z;
        let p = wrap_angle(self.pitch);
        out[9] = p.sin();
        out[10] = p.cos();
        out[11] = self.vx;
        out[12] = self.vz;
    }
}

/// Concatenate the two frames' features; horizontal position never enters.
pub fn make_feature(s: &DiscFrame, s_next: &DiscFrame) -> TransitionFeature {
    let mut f = [0.0; FEATURE_DIM];
    s.write(&mut f[..13]);
    s_next.write(&mut f[13..]);
    f
}

/// All consecutive-frame transitions of a reference clip.
pub fn expert_features(clip: &MotionClip) -> Vec<TransitionFeature> {
    let frames: Vec<DiscFrame> = (0..clip.frames.len())
        .map(|t| DiscFrame::from_reference(&clip.frames[t], &clip.velocity(t)))
        .collect();
    frames.windows(2).map(|w| make_feature(&w[0], &w[1])).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Gradient-penalty weight on expert samples; 0 gives the plain
    /// least-squares objective.
    pub gp_weight: f64,
    pub batch_size: usize,
    pub steps_per_update: usize,
    pub replay_capacity: usize,
    pub max_grad_norm: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            lr: 1e-4,
            gp_weight: 5.0,
            batch_size: 128,
            steps_per_update: 8,
            replay_capacity: 20_000,
            max_grad_norm: 1.0,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.batch_size == 0 || self.replay_capacity == 0 {
            return Err(Error::Config("discriminator widths, batch and replay sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.gp_weight >= 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::Config("discriminator lr, gp_weight and max_grad_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut v = vec![FEATURE_DIM];
        v.extend_from_slice(&self.hidden);
        v.push(1);
        v
    }
}

/// Loss terms of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiscLoss {
    /// Least-squares part: `mean (D_e - 1)^2 + mean (D_p + 1)^2`.
    pub lsgan: f64,
    /// `gp_weight / 2 * mean |grad_x D|^2` over expert samples.
    pub penalty: f64,
    pub mean_expert: f64,
    pub mean_policy: f64,
}

impl DiscLoss {
    pub fn total(&self) -> f64 {
        self.lsgan + self.penalty
    }
}

fn rows_to_batch(rows: &[TransitionFeature]) -> Array2<f64> {
    let mut data = Vec::with_capacity(rows.len() * FEATURE_DIM);
    for r in rows {
        data.extend_from_slice(r);
    }
    Array2::from_shape_vec((rows.len(), FEATURE_DIM), data).expect("batch")
}

/// Evaluate the loss of `net` and, when `grads` is given, add its parameter
/// gradient. The penalty gradient uses a central difference along the input
/// gradient direction, which equals the exact second-order term up to
/// `O(h^2)`.
pub fn disc_loss(
    net: &Mlp,
    expert: &[TransitionFeature],
    policy: &[TransitionFeature],
    gp_weight: f64,
    grads: Option<&mut [f64]>,
) -> Result<DiscLoss> {
    if expert.is_empty() || policy.is_empty() {
        return Err(Error::Usage("discriminator loss needs non-empty expert and policy batches".into()));
    }
    let xe = rows_to_batch(expert);
    let xp = rows_to_batch(policy);
    let (ne, np) = (expert.len() as f64, policy.len() as f64);
    let (de, tape_e) = net.forward(&xe)?;
    let (dp, tape_p) = net.forward(&xp)?;
    let lsgan = de.iter().map(|d| (d - 1.0).powi(2)).sum::<f64>() / ne + dp.iter().map(|d| (d + 1.0).powi(2)).sum::<f64>() / np;

    // input gradients of D on expert samples
    let mut scratch = vec![0.0; net.num_params()];
    let gx = net.backward(&tape_e, &Array2::ones((expert.len(), 1)), &mut scratch)?;
    let penalty = 0.5 * gp_weight * gx.iter().map(|g| g * g).sum::<f64>() / ne;

    let out = DiscLoss {
        lsgan,
        penalty,
        mean_expert: de.mean().unwrap_or(0.0),
        mean_policy: dp.mean().unwrap_or(0.0),
    };
    if let Some(grads) = grads {
        net.backward(&tape_e, &de.mapv(|d| 2.0 * (d - 1.0) / ne), grads)?;
        net.backward(&tape_p, &dp.mapv(|d| 2.0 * (d + 1.0) / np), grads)?;
        if gp_weight > 0.0 {
            let norm = gx.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-12);
            let h = 1e-4 * (ne.sqrt() / norm).min(1e4);
            let mut up = vec![0.0; grads.len()];
            let mut down = vec![0.0; grads.len()];
            let ones = Array2::ones((expert.len(), 1));
            let (_, t_up) = net.forward(&(&xe + &(&gx * h)))?;
            net.backward(&t_up, &ones, &mut up)?;
            let (_, t_down) = net.forward(&(&xe - &(&gx * h)))?;
            net.backward(&t_down, &ones, &mut down)?;
            let scale = gp_weight / ne / (2.0 * h);
            for ((g, u), d) in grads.iter_mut().zip(&up).zip(&down) {
                *g += scale * (u - d);
            }
        }
    }
    Ok(out)
}

/// Per-clip statistics from one bank update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiscStats {
    pub updated: bool,
    pub loss: f64,
    pub mean_expert: f64,
    pub mean_policy: f64,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub net: Mlp,
    adam: Adam,
    rng: ChaCha8Rng,
    expert: Vec<TransitionFeature>,
    replay: VecDeque<TransitionFeature>,
}

impl Discriminator {
    pub fn new(cfg: &DiscConfig, expert: Vec<TransitionFeature>, seed: u64) -> Result<Self> {
        if expert.is_empty() {
            return Err(Error::Config("discriminator needs expert transitions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&cfg.sizes(), Activation::Tanh, &mut rng);
        let adam = Adam::new(cfg.lr, &[net.num_params()]);
        Ok(Self {
            net,
            adam,
            rng,
            expert,
            replay: VecDeque::new(),
        })
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn score(&self, features: &[TransitionFeature]) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.net.predict(&rows_to_batch(features))?.into_raw_vec_and_offset().0)
    }

    fn push_policy(&mut self, features: &[TransitionFeature], capacity: usize) {
        for f in features {
            if self.replay.len() == capacity {
                self.replay.pop_front();
            }
            self.replay.push_back(*f);
        }
    }

    fn sample<'a>(rng: &mut ChaCha8Rng, pool: impl Fn(usize) -> &'a TransitionFeature, len: usize, n: usize) -> Vec<TransitionFeature> {
        (0..n).map(|_| *pool(rng.random_range(0..len))).collect()
    }

    /// Take `steps` Adam steps on fresh minibatches from the expert set and
    /// the policy replay.
    pub fn train_steps(&mut self, cfg: &DiscConfig, steps: usize) -> Result<DiscStats> {
        if self.replay.is_empty() {
            return Err(Error::Usage("policy replay is empty".into()));
        }
        let mut stats = DiscStats { updated: true, ..Default::default() };
        let mut grads = vec![0.0; self.net.num_params()];
        for _ in 0..steps {
            let expert = &self.expert;
            let replay = &self.replay;
            let eb = Self::sample(&mut self.rng, |i| &expert[i], expert.len(), cfg.batch_size);
            let pb = Self::sample(&mut self.rng, |i| &replay[i], replay.len(), cfg.batch_size);
            grads.iter_mut().for_each(|g| *g = 0.0);
            let l = disc_loss(&self.net, &eb, &pb, cfg.gp_weight, Some(&mut grads))?;
            if !l.total().is_finite() {
                return Err(Error::NonFiniteLoss(format!("discriminator loss {l:?}")));
            }
            clip_grad_norm(&mut [&mut grads], cfg.max_grad_norm);
            self.adam.step(&mut [self.net.params_mut()], &[&grads])?;
            stats.loss = l.total();
            stats.mean_expert = l.mean_expert;
            stats.mean_policy = l.mean_policy;
        }
        Ok(stats)
    }
}

/// One discriminator per clip, each with its own optimizer, RNG stream,
/// expert set and policy replay.
#[derive(Debug, Clone)]
pub struct DiscriminatorBank {
    pub cfg: DiscConfig,
    pub discs: Vec<Discriminator>,
}

impl DiscriminatorBank {
    /// Clip `i` gets its own stream derived from `(seed, i)`.
    pub fn new(cfg: DiscConfig, clips: &[MotionClip], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let discs = clips
            .iter()
            .enumerate()
            .map(|(i, c)| Discriminator::new(&cfg, expert_features(c), clip_seed(seed, i)))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, discs })
    }

    /// Build from explicit expert sets (used for toy problems).
    pub fn from_expert_sets(cfg: DiscConfig, sets: Vec<Vec<TransitionFeature>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let discs = sets
            .into_iter()
            .enumerate()
            .map(|(i, e)| Discriminator::new(&cfg, e, clip_seed(seed, i)))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, discs })
    }

    pub fn len(&self) -> usize {
        self.discs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discs.is_empty()
    }

    pub fn score(&self, clip_id: usize, features: &[TransitionFeature]) -> Result<Vec<f64>> {
        self.discs
            .get(clip_id)
            .ok_or(Error::Index { index: clip_id, max: self.discs.len().saturating_sub(1) })?
            .score(features)
    }

    /// Append new policy transitions (grouped by clip) to the replays and
    /// train each discriminator that received data. Clips without new data
    /// are left untouched.
    pub fn update_bank(&mut self, transitions: &[Vec<TransitionFeature>], parallel: bool) -> Result<Vec<DiscStats>> {
        if transitions.len() != self.discs.len() {
            return Err(Error::Config(format!(
                "transitions grouped for {} clips, bank has {}",
                transitions.len(),
                self.discs.len()
            )));
        }
        let cfg = &self.cfg;
        let work = |(d, t): (&mut Discriminator, &Vec<TransitionFeature>)| -> Result<DiscStats> {
            if t.is_empty() {
                return Ok(DiscStats::default());
            }
            d.push_policy(t, cfg.replay_capacity);
            d.train_steps(cfg, cfg.steps_per_update)
        };
        if parallel {
            self.discs.par_iter_mut().zip(transitions.par_iter()).map(work).collect()
        } else {
            self.discs.iter_mut().zip(transitions.iter()).map(work).collect()
        }
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        for (i, d) in self.discs.iter().enumerate() {
            ck.put_mlp(&format!("disc.{i}"), &d.net);
            ck.optimizers.insert(format!("disc.{i}"), d.adam.clone());
            ck.meta.insert(format!("disc.{i}.rng"), serde_json::to_string(&RngState::capture(&d.rng)).expect("rng state"));
        }
    }

    /// Restore networks, optimizers and RNG streams saved by
    /// [`to_checkpoint`](Self::to_checkpoint). Replays start empty.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let sizes = self.cfg.sizes();
        for (i, d) in self.discs.iter_mut().enumerate() {
            d.net = ck.get_mlp(&format!("disc.{i}"), &sizes, Activation::Tanh)?;
            if let Some(a) = ck.optimizers.get(&format!("disc.{i}")) {
                d.adam = a.clone();
            }
            if let Some(s) = ck.meta.get(&format!("disc.{i}.rng")) {
                let state: RngState = serde_json::from_str(s)?;
                d.rng = state.restore()?;
            }
            d.replay.clear();
        }
        Ok(())
    }
}

fn clip_seed(seed: u64, clip: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (clip as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}
