//! Lock-stepped environments and rollout collection.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::Trainer;
use crate::dataset::{extract_segment, MotionClip};
use crate::discriminator::{make_feature, DiscFrame, TransitionFeature};
use crate::error::{Error, Result};
use crate::eval::{step_errors, EpisodeRecord, ErrorAccumulator};
use crate::prior::{proprio_features, segment_features, MotionPrior, ACTION_DIM, PROPRIO_DIM, SEGMENT_DIM};
use crate::rewards::{total_reward, RewardBreakdown};
use crate::sim::{check_termination, reset_from_reference, PlanarSim, RobotState, Termination};

/// Uniform start index in `[0, T - margin]` (0 for short clips), where `T`
/// is the clip's last frame index.
pub fn sample_start<R: Rng + ?Sized>(clip: &MotionClip, margin: usize, rng: &mut R) -> usize {
    let max = clip.last_index().saturating_sub(margin);
    rng.random_range(0..=max)
}

/// One environment: a simulated robot tracking a clip from some frame.
#[derive(Debug, Clone)]
pub struct Env {
    pub rng: ChaCha8Rng,
    pub clip: usize,
    /// Reference frame index matching `state`.
    pub t: usize,
    pub state: RobotState,
    pub z_prev: Vec<f64>,
    pub episode_steps: usize,
    pub episode_return: f64,
    reset_noise: f64,
    start_margin: usize,
}

impl Env {
    pub fn new(seed: u64, clips: &[MotionClip], sim: &PlanarSim, reset_noise: f64, start_margin: usize, d_z: usize) -> Self {
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            clip: 0,
            t: 0,
            state: reset_from_reference(&clips[0].frames[0], &clips[0].velocity(0), 0.0, &sim.geometry, &mut ChaCha8Rng::seed_from_u64(0)),
            z_prev: vec![0.0; d_z],
            episode_steps: 0,
            episode_return: 0.0,
            reset_noise,
            start_margin,
        };
        env.reset(clips, sim);
        env
    }

    /// Uniform clip, uniform start, noisy reference initialization.
    pub fn reset(&mut self, clips: &[MotionClip], sim: &PlanarSim) {
        self.clip = self.rng.random_range(0..clips.len());
        let clip = &clips[self.clip];
        self.t = sample_start(clip, self.start_margin, &mut self.rng);
        self.state = reset_from_reference(&clip.frames[self.t], &clip.velocity(self.t), self.reset_noise, &sim.geometry, &mut self.rng);
        self.z_prev.iter_mut().for_each(|z| *z = 0.0);
        self.episode_steps = 0;
        self.episode_return = 0.0;
    }
}

/// Aggregates over one rollout batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutStats {
    pub mean_reward: f64,
    /// Episodes that ended inside this batch.
    pub episodes: usize,
    pub episode_return: f64,
    pub episode_length: f64,
    pub r_ori: f64,
    pub r_pos_xy: f64,
    pub r_pos_z: f64,
    pub r_joint: f64,
    pub r_adv: f64,
    pub sim_resets: usize,
}

/// Transitions laid out env-major: index `e * horizon + k`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub horizon: usize,
    pub clip_id: Vec<usize>,
    pub t: Vec<usize>,
    pub states: Vec<RobotState>,
    pub segments: Array2<f64>,
    pub proprio: Array2<f64>,
    /// Unit noise of each latent draw.
    pub eps_z: Array2<f64>,
    pub z_prev: Array2<f64>,
    /// Encoder means, the critic's latent input.
    pub mu: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_prob: Vec<f64>,
    pub values: Vec<f64>,
    /// Value of the successor state; 0 after termination.
    pub next_values: Vec<f64>,
    pub rewards: Vec<RewardBreakdown>,
    pub dones: Vec<bool>,
    pub terminal: Vec<bool>,
    /// Discriminator feature of each transition, absent after divergence.
    pub disc_features: Vec<Option<TransitionFeature>>,
    pub stats: RolloutStats,
}

impl RolloutBuffer {
    fn new(n_envs: usize, horizon: usize, d_z: usize) -> Self {
        let n = n_envs * horizon;
        Self {
            n_envs,
            horizon,
            clip_id: vec![0; n],
            t: vec![0; n],
            states: Vec::with_capacity(n),
            segments: Array2::zeros((n, SEGMENT_DIM)),
            proprio: Array2::zeros((n, PROPRIO_DIM)),
            eps_z: Array2::zeros((n, d_z)),
            z_prev: Array2::zeros((n, d_z)),
            mu: Array2::zeros((n, d_z)),
            actions: Array2::zeros((n, ACTION_DIM)),
            log_prob: vec![0.0; n],
            values: vec![0.0; n],
            next_values: vec![0.0; n],
            rewards: vec![RewardBreakdown::default(); n],
            dones: vec![false; n],
            terminal: vec![false; n],
            disc_features: vec![None; n],
            stats: RolloutStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_prob.is_empty()
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Observation matrices for a set of (clip, frame, state) triples.
fn observe(clips: &[MotionClip], items: &[(usize, usize, &RobotState)]) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = items.len();
    let mut seg = Array2::zeros((n, SEGMENT_DIM));
    let mut prop = Array2::zeros((n, PROPRIO_DIM));
    for (i, (c, t, s)) in items.iter().enumerate() {
        let f = segment_features(&extract_segment(&clips[*c], *c, *t)?);
        seg.row_mut(i).as_slice_mut().expect("contiguous").copy_from_slice(&f);
        prop.row_mut(i).as_slice_mut().expect("contiguous").copy_from_slice(&proprio_features(s));
    }
    Ok((seg, prop))
}

/// Critic values (denormalized) at the encoder mean.
fn values_at(prior: &MotionPrior, norm: &super::ValueNormalizer, prop: &Array2<f64>, mu: &Array2<f64>, clips: &[usize]) -> Result<Vec<f64>> {
    Ok(prior
        .value_batch(prop, mu, clips)?
        .into_iter()
        .map(|v| norm.denormalize(v))
        .collect())
}

impl Trainer {
    fn step_all(&self, states: &[RobotState], actions: &[[f64; 4]]) -> Vec<Result<RobotState>> {
        let sim = &self.sim;
        if self.cfg.single_thread {
            states.iter().zip(actions).map(|(s, a)| sim.step(s, a)).collect()
        } else {
            states.par_iter().zip(actions.par_iter()).map(|(s, a)| sim.step(s, a)).collect()
        }
    }

    /// Discriminator scores for transitions grouped by clip, in input order.
    fn disc_scores(&self, items: &[(usize, TransitionFeature)]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; items.len()];
        let Some(bank) = &self.bank else { return Ok(out) };
        for c in 0..self.clips.len() {
            let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].0 == c).collect();
            if idx.is_empty() {
                continue;
            }
            let feats: Vec<TransitionFeature> = idx.iter().map(|&i| items[i].1).collect();
            for (i, d) in idx.iter().zip(bank.score(c, &feats)?) {
                out[*i] = d;
            }
        }
        Ok(out)
    }

    /// Step every environment `horizon` times with the current snapshot.
    pub fn collect_rollouts(&mut self) -> Result<RolloutBuffer> {
        let (n, h, d) = (self.cfg.n_envs, self.cfg.horizon, self.cfg.prior.d_z);
        let mut buf = RolloutBuffer::new(n, h, d);
        buf.states = vec![self.envs[0].state; n * h];
        let std = self.prior.action_std();
        let log_std: Vec<f64> = std.iter().map(|s| s.ln()).collect();
        let mut ep_returns = Vec::new();
        let mut ep_lengths = Vec::new();
        let mut sim_resets = 0;

        for k in 0..h {
            let items: Vec<(usize, usize, &RobotState)> = self.envs.iter().map(|e| (e.clip, e.t, &e.state)).collect();
            let (seg, prop) = observe(&self.clips, &items)?;
            let clip_ids: Vec<usize> = self.envs.iter().map(|e| e.clip).collect();
            let (mu, log_sigma) = self.prior.encode_batch(&seg)?;
            let mut eps = Array2::zeros((n, d));
            let mut z = mu.clone();
            for (e, env) in self.envs.iter_mut().enumerate() {
                for j in 0..d {
                    let x: f64 = env.rng.sample(StandardNormal);
                    eps[[e, j]] = x;
                    z[[e, j]] += log_sigma[[e, j]].exp() * x;
                }
            }
            let mean = self.prior.action_mean_batch(&prop, &z)?;
            let values = values_at(&self.prior, &self.value_norm, &prop, &mu, &clip_ids)?;
            let mut actions = vec![[0.0; 4]; n];
            let mut clamped = vec![[0.0; 4]; n];
            let mut log_probs = vec![0.0; n];
            for (e, env) in self.envs.iter_mut().enumerate() {
                let mut lp = 0.0;
                for j in 0..ACTION_DIM {
                    let x: f64 = env.rng.sample(StandardNormal);
                    actions[e][j] = mean[[e, j]] + std[j] * x;
                    lp += -0.5 * x * x - log_std[j] - HALF_LN_2PI;
                }
                log_probs[e] = lp;
                clamped[e] = self.prior.bounds.clamp(&actions[e]);
            }
            let states: Vec<RobotState> = self.envs.iter().map(|e| e.state).collect();
            let stepped = self.step_all(&states, &clamped);

            let mut next_states = Vec::with_capacity(n);
            let mut feats = Vec::new();
            for (e, res) in stepped.into_iter().enumerate() {
                match res {
                    Ok(s) => {
                        let f = make_feature(&DiscFrame::from_state(&states[e]), &DiscFrame::from_state(&s));
                        feats.push((clip_ids[e], f));
                        next_states.push(Some((s, f)));
                    }
                    Err(Error::Diverged { .. }) => next_states.push(None),
                    Err(err) => return Err(err),
                }
            }
            let scores = self.disc_scores(&feats)?;
            let mut score_iter = scores.into_iter();

            let mut truncated = Vec::new();
            for e in 0..n {
                let i = e * h + k;
                let env_clip = clip_ids[e];
                let t = self.envs[e].t;
                buf.clip_id[i] = env_clip;
                buf.t[i] = t;
                buf.states[i] = states[e];
                buf.segments.row_mut(i).assign(&seg.row(e));
                buf.proprio.row_mut(i).assign(&prop.row(e));
                buf.eps_z.row_mut(i).assign(&eps.row(e));
                buf.mu.row_mut(i).assign(&mu.row(e));
                for j in 0..d {
                    buf.z_prev[[i, j]] = self.envs[e].z_prev[j];
                }
                for j in 0..ACTION_DIM {
                    buf.actions[[i, j]] = actions[e][j];
                }
                buf.log_prob[i] = log_probs[e];
                buf.values[i] = values[e];

                let clip = &self.clips[env_clip];
                let env = &mut self.envs[e];
                match next_states[e] {
                    None => {
                        sim_resets += 1;
                        buf.dones[i] = true;
                        buf.terminal[i] = true;
                        buf.rewards[i] = RewardBreakdown { terminated: true, ..Default::default() };
                    }
                    Some((s, f)) => {
                        let d_out = score_iter.next().expect("one score per transition");
                        let reference = &clip.frames[t + 1];
                        let mut r = total_reward(
                            &s,
                            reference,
                            d_out,
                            self.mean_adv[env_clip],
                            &self.cfg.weights,
                            self.cfg.mode,
                            &self.sim.geometry,
                        )?;
                        let terminated = matches!(check_termination(&s, reference, &self.sim.config), Termination::Terminate(_));
                        r.terminated = terminated;
                        buf.rewards[i] = r;
                        buf.disc_features[i] = Some(f);
                        buf.terminal[i] = terminated;
                        buf.dones[i] = terminated || t + 1 >= clip.last_index();
                        env.state = s;
                        env.t = t + 1;
                        if buf.dones[i] && !terminated {
                            truncated.push(e);
                        }
                    }
                }
                env.episode_return += buf.rewards[i].total;
                env.episode_steps += 1;
                for j in 0..d {
                    env.z_prev[j] = z[[e, j]];
                }
            }

            // bootstrap values for clip-end truncations, at the final state
            if !truncated.is_empty() {
                let items: Vec<(usize, usize, &RobotState)> =
                    truncated.iter().map(|&e| (self.envs[e].clip, self.envs[e].t, &self.envs[e].state)).collect();
                let (tseg, tprop) = observe(&self.clips, &items)?;
                let (tmu, _) = self.prior.encode_batch(&tseg)?;
                let tclips: Vec<usize> = truncated.iter().map(|&e| self.envs[e].clip).collect();
                let tv = values_at(&self.prior, &self.value_norm, &tprop, &tmu, &tclips)?;
                for (&e, v) in truncated.iter().zip(tv) {
                    buf.next_values[e * h + k] = v;
                }
            }
            for e in 0..n {
                if buf.dones[e * h + k] {
                    let env = &mut self.envs[e];
                    ep_returns.push(env.episode_return);
                    ep_lengths.push(env.episode_steps as f64);
                    env.reset(&self.clips, &self.sim);
                }
            }
        }

        // successor values inside the batch and at its end
        let items: Vec<(usize, usize, &RobotState)> = self.envs.iter().map(|e| (e.clip, e.t, &e.state)).collect();
        let (seg, prop) = observe(&self.clips, &items)?;
        let (mu, _) = self.prior.encode_batch(&seg)?;
        let clip_ids: Vec<usize> = self.envs.iter().map(|e| e.clip).collect();
        let last_values = values_at(&self.prior, &self.value_norm, &prop, &mu, &clip_ids)?;
        for e in 0..n {
            for k in 0..h {
                let i = e * h + k;
                if buf.terminal[i] {
                    buf.next_values[i] = 0.0;
                } else if buf.dones[i] {
                    // truncation value already stored
                } else if k + 1 < h {
                    buf.next_values[i] = buf.values[i + 1];
                } else {
                    buf.next_values[i] = last_values[e];
                }
            }
        }

        let count = buf.len() as f64;
        let mean_of = |f: &dyn Fn(&RewardBreakdown) -> f64| buf.rewards.iter().map(f).sum::<f64>() / count;
        buf.stats = RolloutStats {
            mean_reward: mean_of(&|r| r.total),
            episodes: ep_returns.len(),
            episode_return: crate::eval::mean_std(&ep_returns).0,
            episode_length: crate::eval::mean_std(&ep_lengths).0,
            r_ori: mean_of(&|r| r.r_ori),
            r_pos_xy: mean_of(&|r| r.r_pos_xy),
            r_pos_z: mean_of(&|r| r.r_pos_z),
            r_joint: mean_of(&|r| r.r_joint),
            r_adv: mean_of(&|r| r.r_adv),
            sim_resets,
        };
        Ok(buf)
    }

    /// Deterministic evaluation: per clip, `episodes` noise-free episodes with
    /// starts spread evenly over the valid range, latent at the encoder mean
    /// and actions at the policy mean.
    pub fn evaluate(&self, episodes: usize) -> Result<Vec<EpisodeRecord>> {
        let mut starts = Vec::new();
        for (c, clip) in self.clips.iter().enumerate() {
            let max = clip.last_index().saturating_sub(self.cfg.start_margin);
            for k in 0..episodes {
                let s = if episodes == 1 { 0 } else { (k * max + (episodes - 1) / 2) / (episodes - 1) };
                starts.push((c, s));
            }
        }
        let g = &self.sim.geometry;
        let mut live: Vec<(usize, usize, usize, RobotState)> = starts
            .iter()
            .map(|&(c, s)| {
                let clip = &self.clips[c];
                let state = reset_from_reference(&clip.frames[s], &clip.velocity(s), 0.0, g, &mut ChaCha8Rng::seed_from_u64(0));
                (c, s, s, state)
            })
            .collect();
        let mut acc = vec![ErrorAccumulator::default(); starts.len()];
        let mut returns = vec![0.0; starts.len()];
        let mut lengths = vec![0usize; starts.len()];
        let mut reached = vec![false; starts.len()];
        let mut active: Vec<usize> = (0..starts.len()).collect();
        while !active.is_empty() {
            let items: Vec<(usize, usize, &RobotState)> = active.iter().map(|&i| (live[i].0, live[i].2, &live[i].3)).collect();
            let (seg, prop) = observe(&self.clips, &items)?;
            let (mu, _) = self.prior.encode_batch(&seg)?;
            let mean = self.prior.action_mean_batch(&prop, &mu)?;
            let actions: Vec<[f64; 4]> = (0..active.len())
                .map(|r| self.prior.bounds.clamp(mean.row(r).as_slice().expect("contiguous")))
                .collect();
            let states: Vec<RobotState> = active.iter().map(|&i| live[i].3).collect();
            let stepped = self.step_all(&states, &actions);
            let mut feats = Vec::new();
            let mut results = Vec::with_capacity(active.len());
            for (r, res) in stepped.into_iter().enumerate() {
                match res {
                    Ok(s) => {
                        let f = make_feature(&DiscFrame::from_state(&states[r]), &DiscFrame::from_state(&s));
                        feats.push((live[active[r]].0, f));
                        results.push(Some(s));
                    }
                    Err(Error::Diverged { .. }) => results.push(None),
                    Err(err) => return Err(err),
                }
            }
            let scores = self.disc_scores(&feats)?;
            let mut score_iter = scores.into_iter();
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let Some(s) = results[r] else { continue };
                let (c, _, t, _) = live[i];
                let clip = &self.clips[c];
                let reference = &clip.frames[t + 1];
                let d_out = score_iter.next().expect("score");
                let rw = total_reward(&s, reference, d_out, self.mean_adv[c], &self.cfg.weights, self.cfg.mode, g)?;
                returns[i] += rw.total;
                lengths[i] += 1;
                acc[i].push(&step_errors(&s, reference, g));
                live[i].2 = t + 1;
                live[i].3 = s;
                let terminated = matches!(check_termination(&s, reference, &self.sim.config), Termination::Terminate(_));
                if terminated {
                    continue;
                }
                if t + 1 >= clip.last_index() {
                    reached[i] = true;
                    continue;
                }
                still.push(i);
            }
            active = still;
        }
        Ok(starts
            .iter()
            .enumerate()
            .map(|(i, &(c, s))| EpisodeRecord {
                mode: self.cfg.mode.as_str().into(),
                seed: self.cfg.seed,
                update: self.updates,
                clip: self.clips[c].name.clone(),
                start: s,
                length: lengths[i],
                reached_end: reached[i],
                episode_return: returns[i],
                errors: acc[i].mean(),
            })
            .collect())
    }
}
