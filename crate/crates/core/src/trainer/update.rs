//! The PPO update over one rollout buffer.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::ppo::{clipped_objective, gae, normalize_advantages};
use super::{RolloutBuffer, Trainer};
use crate::error::{Error, Result};
use crate::nn::clip_grad_norm;
use crate::prior::ActorGrads;

/// Means over all minibatches of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Mean AR-KL term per sample (already scaled by beta).
    pub ar_kl: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

fn gather(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

impl Trainer {
    /// Advantages and returns for the whole buffer, per environment row.
    pub fn advantages(&self, buf: &RolloutBuffer) -> (Vec<f64>, Vec<f64>) {
        let (n, h) = (buf.n_envs, buf.horizon);
        let mut adv = Vec::with_capacity(n * h);
        let mut ret = Vec::with_capacity(n * h);
        for e in 0..n {
            let r = e * h..(e + 1) * h;
            let rewards: Vec<f64> = buf.rewards[r.clone()].iter().map(|b| b.total).collect();
            let (a, rt) = gae(&rewards, &buf.values[r.clone()], &buf.next_values[r.clone()], &buf.dones[r], self.cfg.gamma, self.cfg.lambda);
            adv.extend(a);
            ret.extend(rt);
        }
        (adv, ret)
    }

    /// Clipped-surrogate epochs over shuffled minibatches, one Adam step for
    /// the actor group and one for the critic group per minibatch.
    pub fn ppo_update(&mut self, buf: &RolloutBuffer) -> Result<UpdateStats> {
        let (mut adv, returns) = self.advantages(buf);
        normalize_advantages(&mut adv);
        self.value_norm.update(&returns);
        let targets: Vec<f64> = returns.iter().map(|r| self.value_norm.normalize(*r)).collect();

        let total = buf.len();
        let mb = total / self.cfg.minibatches;
        let mut order: Vec<usize> = (0..total).collect();
        let mut stats = UpdateStats::default();
        let mut batches = 0usize;
        let eps = self.cfg.clip_eps;
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(mb).take(self.cfg.minibatches) {
                let b = chunk.len() as f64;
                let seg = gather(&buf.segments, chunk);
                let prop = gather(&buf.proprio, chunk);
                let eps_z = gather(&buf.eps_z, chunk);
                let actions = gather(&buf.actions, chunk);
                let z_prev = gather(&buf.z_prev, chunk);
                let mu_old = gather(&buf.mu, chunk);
                let clips: Vec<usize> = chunk.iter().map(|&i| buf.clip_id[i]).collect();

                // actor
                let pass = self.prior.actor_forward(&seg, &prop, &eps_z, &actions)?;
                let mut d_logp = vec![0.0; chunk.len()];
                let mut surrogate = 0.0;
                let mut approx_kl = 0.0;
                let mut clipped = 0usize;
                for (r, &i) in chunk.iter().enumerate() {
                    let log_ratio = pass.log_prob[r] - buf.log_prob[i];
                    let ratio = log_ratio.exp();
                    let (obj, live) = clipped_objective(ratio, adv[i], eps);
                    surrogate += obj;
                    approx_kl += -log_ratio;
                    if !live {
                        clipped += 1;
                    } else {
                        d_logp[r] = -ratio * adv[i] / b;
                    }
                }
                let entropy = self.prior.action_entropy();
                let mut grads = ActorGrads::zeros(&self.prior);
                let kl_sum = self
                    .prior
                    .actor_backward(&pass, &d_logp, -self.cfg.ent_coef, &z_prev, 1.0 / b, &mut grads)?;
                let policy_loss = -surrogate / b;
                let loss = policy_loss - self.cfg.ent_coef * entropy + kl_sum / b;

                // critic
                let mut critic_grads = vec![0.0; self.prior.critic.num_params()];
                let mut embed_grads = vec![0.0; self.prior.embeddings.params().len()];
                let vc = self.cfg.value_coef;
                let values = self.prior.critic_backward(
                    &prop,
                    &mu_old,
                    &clips,
                    |r, v| 2.0 * vc * (v - targets[chunk[r]]) / b,
                    &mut critic_grads,
                    &mut embed_grads,
                )?;
                let value_loss = values
                    .iter()
                    .zip(chunk)
                    .map(|(v, &i)| (v - targets[i]).powi(2))
                    .sum::<f64>()
                    / b;

                if !(loss.is_finite() && value_loss.is_finite()) {
                    return Err(Error::NonFiniteLoss(format!(
                        "update {}: policy loss {policy_loss}, value loss {value_loss}, ar-kl {}, entropy {entropy}; \
                         minibatch rows {:?}",
                        self.updates + 1,
                        kl_sum / b,
                        chunk
                    )));
                }

                clip_grad_norm(&mut grads.slices_mut(), self.cfg.max_grad_norm);
                let [g_enc, g_prop, g_pol, g_ls] = grads.slices_mut();
                self.actor_opt.step(
                    &mut [
                        self.prior.encoder.params_mut(),
                        self.prior.prop_encoder.params_mut(),
                        self.prior.policy.params_mut(),
                        &mut self.prior.action_log_std,
                    ],
                    &[g_enc, g_prop, g_pol, g_ls],
                )?;
                clip_grad_norm(&mut [&mut critic_grads, &mut embed_grads], self.cfg.max_grad_norm);
                self.critic_opt.step(
                    &mut [self.prior.critic.params_mut(), self.prior.embeddings.params_mut()],
                    &[&critic_grads, &embed_grads],
                )?;

                stats.policy_loss += policy_loss;
                stats.value_loss += value_loss;
                stats.ar_kl += kl_sum / b;
                stats.entropy += entropy;
                stats.approx_kl += approx_kl / b;
                stats.clip_frac += clipped as f64 / b;
                batches += 1;
            }
        }
        let k = 1.0 / batches.max(1) as f64;
        stats.policy_loss *= k;
        stats.value_loss *= k;
        stats.ar_kl *= k;
        stats.entropy *= k;
        stats.approx_kl *= k;
        stats.clip_frac *= k;
        Ok(stats)
    }
}
