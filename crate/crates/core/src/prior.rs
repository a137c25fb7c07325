//! The motion prior: reference-motion encoder with an autoregressive latent
//! bottleneck, proprioception encoder, low-level policy and critic.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{wrap_angle, MotionSegment, RobotGeometry};
use crate::error::{Error, Result};
use crate::nn::{clamp_log_std, Activation, Checkpoint, Mlp, Tape, LOG_STD_MAX, LOG_STD_MIN};
use crate::sim::RobotState;

/// Width of [`proprio_features`].
pub const PROPRIO_DIM: usize = 20;
/// Width of [`segment_features`].
pub const SEGMENT_DIM: usize = 32;
pub const ACTION_DIM: usize = 4;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub d_z: usize,
    pub resample_every: usize,
    pub encoder_hidden: Vec<usize>,
    /// Hidden and output widths of the proprioception encoder.
    pub prop_layers: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub init_action_std: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            beta: 1e-3,
            d_z: 16,
            resample_every: 1,
            encoder_hidden: vec![256, 256],
            prop_layers: vec![128, 64],
            policy_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            embed_dim: 8,
            init_action_std: 0.2,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.d_z == 0 || self.resample_every == 0 || self.embed_dim == 0 || self.prop_layers.is_empty() {
            return bad("d_z, resample_every, embed_dim and prop_layers must be non-zero".into());
        }
        let widths = self
            .encoder_hidden
            .iter()
            .chain(&self.prop_layers)
            .chain(&self.policy_hidden)
            .chain(&self.critic_hidden);
        if widths.copied().any(|w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.init_action_std > 0.0 && self.init_action_std.is_finite()) {
            return bad(format!("init_action_std must be positive, got {}", self.init_action_std));
        }
        Ok(())
    }

    /// Variance of the autoregressive prior's innovation.
    pub fn prior_var(&self) -> f64 {
        1.0 - self.alpha * self.alpha
    }

    fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut v = vec![input];
        v.extend_from_slice(hidden);
        v.push(output);
        v
    }

    pub fn encoder_sizes(&self) -> Vec<usize> {
        Self::sizes(SEGMENT_DIM, &self.encoder_hidden, 2 * self.d_z)
    }

    pub fn prop_sizes(&self) -> Vec<usize> {
        let mut v = vec![PROPRIO_DIM];
        v.extend_from_slice(&self.prop_layers);
        v
    }

    pub fn prop_out(&self) -> usize {
        *self.prop_layers.last().expect("validated")
    }

    pub fn policy_sizes(&self) -> Vec<usize> {
        Self::sizes(self.prop_out() + self.d_z, &self.policy_hidden, ACTION_DIM)
    }

    pub fn critic_sizes(&self) -> Vec<usize> {
        Self::sizes(PROPRIO_DIM + self.d_z + self.embed_dim, &self.critic_hidden, 1)
    }

    pub(crate) fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let list = |v: &[usize]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(" ");
        meta.insert("prior.alpha".into(), format!("{:?}", self.alpha));
        meta.insert("prior.beta".into(), format!("{:?}", self.beta));
        meta.insert("prior.d_z".into(), self.d_z.to_string());
        meta.insert("prior.resample_every".into(), self.resample_every.to_string());
        meta.insert("prior.encoder_hidden".into(), list(&self.encoder_hidden));
        meta.insert("prior.prop_layers".into(), list(&self.prop_layers));
        meta.insert("prior.policy_hidden".into(), list(&self.policy_hidden));
        meta.insert("prior.critic_hidden".into(), list(&self.critic_hidden));
        meta.insert("prior.embed_dim".into(), self.embed_dim.to_string());
        meta.insert("prior.init_action_std".into(), format!("{:?}", self.init_action_std));
    }

    pub(crate) fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            meta.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint meta lacks '{key}'")))
        }
        fn num<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
            get(meta, key)?
                .parse()
                .map_err(|_| Error::Compatibility(format!("checkpoint meta '{key}' is malformed")))
        }
        fn list(meta: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
            get(meta, key)?
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| Error::Compatibility(format!("checkpoint meta '{key}' is malformed"))))
                .collect()
        }
        let cfg = Self {
            alpha: num(meta, "prior.alpha")?,
            beta: num(meta, "prior.beta")?,
            d_z: num(meta, "prior.d_z")?,
            resample_every: num(meta, "prior.resample_every")?,
            encoder_hidden: list(meta, "prior.encoder_hidden")?,
            prop_layers: list(meta, "prior.prop_layers")?,
            policy_hidden: list(meta, "prior.policy_hidden")?,
            critic_hidden: list(meta, "prior.critic_hidden")?,
            embed_dim: num(meta, "prior.embed_dim")?,
            init_action_std: num(meta, "prior.init_action_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A latent command together with the Gaussian it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCommand {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z_prev: Vec<f64>,
    /// Unit noise used for the draw; replaying it reproduces `z`.
    pub eps: Vec<f64>,
}

impl LatentCommand {
    /// The command at an episode start before any draw: zeros everywhere.
    pub fn zeros(d_z: usize) -> Self {
        Self {
            z: vec![0.0; d_z],
            mu: vec![0.0; d_z],
            sigma: vec![1.0; d_z],
            z_prev: vec![0.0; d_z],
            eps: vec![0.0; d_z],
        }
    }
}

/// `beta * KL(N(mu, sigma^2) || N(alpha z_prev, 1 - alpha^2))`, summed over
/// dimensions.
pub fn ar_kl_loss(mu: &[f64], sigma: &[f64], z_prev: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    if sigma.len() != mu.len() {
        return Err(Error::Shape { expected: mu.len(), got: sigma.len() });
    }
    if z_prev.len() != mu.len() {
        return Err(Error::Shape { expected: mu.len(), got: z_prev.len() });
    }
    let var_p = 1.0 - alpha * alpha;
    let kl: f64 = mu
        .iter()
        .zip(sigma)
        .zip(z_prev)
        .map(|((m, s), zp)| {
            let d = m - alpha * zp;
            0.5 * var_p.ln() - s.ln() + (s * s + d * d) / (2.0 * var_p) - 0.5
        })
        .sum();
    Ok(beta * kl)
}

/// Partial derivatives of [`ar_kl_loss`] with respect to `mu` and `ln sigma`.
pub fn ar_kl_grad(mu: &[f64], sigma: &[f64], z_prev: &[f64], alpha: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let var_p = 1.0 - alpha * alpha;
    let d_mu = mu.iter().zip(z_prev).map(|(m, zp)| beta * (m - alpha * zp) / var_p).collect();
    let d_ls = sigma.iter().map(|s| beta * (s * s / var_p - 1.0)).collect();
    (d_mu, d_ls)
}

/// Draw the next latent command. On steps that are not multiples of
/// `resample_every` the previous sample is held.
pub fn next_latent<R: Rng + ?Sized>(
    mu: &[f64],
    sigma: &[f64],
    z_prev: &[f64],
    step_index: usize,
    cfg: &PriorConfig,
    rng: &mut R,
) -> LatentCommand {
    if step_index % cfg.resample_every != 0 {
        return LatentCommand {
            z: z_prev.to_vec(),
            mu: mu.to_vec(),
            sigma: sigma.to_vec(),
            z_prev: z_prev.to_vec(),
            eps: vec![0.0; mu.len()],
        };
    }
    let eps: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    let z = mu.iter().zip(sigma).zip(&eps).map(|((m, s), e)| m + s * e).collect();
    LatentCommand {
        z,
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
        z_prev: z_prev.to_vec(),
        eps,
    }
}

/// Simulate the latent chain under the prior alone, starting from its
/// stationary marginal.
pub fn sample_prior_chain<R: Rng + ?Sized>(alpha: f64, steps: usize, rng: &mut R) -> Vec<f64> {
    let innov = (1.0 - alpha * alpha).sqrt();
    let mut z: f64 = rng.sample(StandardNormal);
    (0..steps)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            z = alpha * z + innov * e;
            z
        })
        .collect()
}

/// Proprioceptive observation of the robot's own state.
pub fn proprio_features(state: &RobotState) -> [f64; PROPRIO_DIM] {
    let (sp, cp) = state.pitch.sin_cos();
    let mut f = [0.0; PROPRIO_DIM];
    f[0] = state.root_z;
    f[1] = sp;
    f[2] = cp;
    f[3] = state.vx;
    f[4] = state.vz;
    f[5] = 0.1 * state.pitch_rate;
    f[6..10].copy_from_slice(&state.joints);
    for (o, v) in f[10..14].iter_mut().zip(&state.joint_vels) {
        *o = 0.1 * v;
    }
    f[14] = state.foot_contact[0] as u8 as f64;
    f[15] = state.foot_contact[1] as u8 as f64;
    f[16..20].copy_from_slice(&state.last_action);
    f
}

/// Encoder input: per future frame the horizontal offset from the first
/// segment frame, height, pitch as sin/cos and the four joints.
pub fn segment_features(segment: &MotionSegment) -> [f64; SEGMENT_DIM] {
    let x0 = segment.frames[0].root_x;
    let mut f = [0.0; SEGMENT_DIM];
    for (chunk, pose) in f.chunks_exact_mut(8).zip(&segment.frames) {
        let p = wrap_angle(pose.pitch);
        chunk[0] = pose.root_x - x0;
        chunk[1] = pose.root_z;
        chunk[2] = p.sin();
        chunk[3] = p.cos();
        chunk[4..8].copy_from_slice(&pose.joints);
    }
    f
}

/// One learnable vector per clip, fed only to the critic.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionEmbeddingTable {
    dim: usize,
    data: Vec<f64>,
}

impl MotionEmbeddingTable {
    pub fn new<R: Rng + ?Sized>(n_clips: usize, dim: usize, rng: &mut R) -> Self {
        let data = (0..n_clips * dim).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, clip_id: usize) -> Result<&[f64]> {
        if clip_id >= self.len() {
            return Err(Error::Index { index: clip_id, max: self.len().saturating_sub(1) });
        }
        Ok(&self.data[clip_id * self.dim..(clip_id + 1) * self.dim])
    }

    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Linear-in-tanh map from an unbounded output into the joint-limit box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionBounds {
    pub center: [f64; 4],
    pub half_range: [f64; 4],
}

impl ActionBounds {
    pub fn from_geometry(geometry: &RobotGeometry) -> Self {
        let mut center = [0.0; 4];
        let mut half_range = [0.0; 4];
        for (j, lim) in geometry.joint_limits.iter().enumerate() {
            center[j] = 0.5 * (lim[0] + lim[1]);
            half_range[j] = 0.5 * (lim[1] - lim[0]);
        }
        Self { center, half_range }
    }

    pub fn squash(&self, raw: f64, j: usize) -> f64 {
        self.center[j] + self.half_range[j] * raw.tanh()
    }

    pub fn clamp(&self, action: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for j in 0..4 {
            out[j] = action[j].clamp(self.center[j] - self.half_range[j], self.center[j] + self.half_range[j]);
        }
        out
    }
}

/// Encoder, proprioception encoder, policy head with a state-independent
/// log-std, and the critic with its clip embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPrior {
    pub cfg: PriorConfig,
    pub encoder: Mlp,
    pub prop_encoder: Mlp,
    pub policy: Mlp,
    pub action_log_std: Vec<f64>,
    pub critic: Mlp,
    pub embeddings: MotionEmbeddingTable,
    pub bounds: ActionBounds,
}

/// Gradient buffers for the actor side (encoder, E_prop, policy, log-std).
#[derive(Debug, Clone, PartialEq)]
pub struct ActorGrads {
    pub encoder: Vec<f64>,
    pub prop_encoder: Vec<f64>,
    pub policy: Vec<f64>,
    pub action_log_std: Vec<f64>,
}

impl ActorGrads {
    pub fn zeros(prior: &MotionPrior) -> Self {
        Self {
            encoder: vec![0.0; prior.encoder.num_params()],
            prop_encoder: vec![0.0; prior.prop_encoder.num_params()],
            policy: vec![0.0; prior.policy.num_params()],
            action_log_std: vec![0.0; ACTION_DIM],
        }
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.encoder, &mut self.prop_encoder, &mut self.policy, &mut self.action_log_std]
    }
}

/// Batched actor forward pass kept for the reverse sweep.
#[derive(Debug, Clone)]
pub struct ActorPass {
    pub mu: Array2<f64>,
    /// Clamped log-std of the latent.
    pub log_sigma: Array2<f64>,
    /// Whether each log-std entry was inside the clamp range.
    sigma_live: Array2<bool>,
    pub z: Array2<f64>,
    eps: Array2<f64>,
    raw: Array2<f64>,
    pub mean: Array2<f64>,
    actions: Array2<f64>,
    pub log_prob: Vec<f64>,
    enc_tape: Tape,
    prop_tape: Tape,
    pol_tape: Tape,
}

impl MotionPrior {
    pub fn new<R: Rng + ?Sized>(cfg: PriorConfig, n_clips: usize, geometry: &RobotGeometry, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if n_clips == 0 {
            return Err(Error::Config("the prior needs at least one clip".into()));
        }
        let mut encoder = Mlp::new(&cfg.encoder_sizes(), Activation::Elu, rng);
        encoder.scale_output_layer(0.1);
        let prop_encoder = Mlp::new(&cfg.prop_sizes(), Activation::Elu, rng);
        let mut policy = Mlp::new(&cfg.policy_sizes(), Activation::Elu, rng);
        policy.scale_output_layer(0.01);
        let mut critic = Mlp::new(&cfg.critic_sizes(), Activation::Elu, rng);
        critic.scale_output_layer(0.1);
        let embeddings = MotionEmbeddingTable::new(n_clips, cfg.embed_dim, rng);
        Ok(Self {
            action_log_std: vec![cfg.init_action_std.ln(); ACTION_DIM],
            cfg,
            encoder,
            prop_encoder,
            policy,
            critic,
            embeddings,
            bounds: ActionBounds::from_geometry(geometry),
        })
    }

    pub fn d_z(&self) -> usize {
        self.cfg.d_z
    }

    pub fn n_clips(&self) -> usize {
        self.embeddings.len()
    }

    /// Encoder outputs `(mu, clamped log sigma)` for a batch of segment
    /// feature rows.
    pub fn encode_batch(&self, segments: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.encoder.predict(segments)?;
        let d = self.cfg.d_z;
        let mu = out.slice(s![.., ..d]).to_owned();
        let ls = out.slice(s![.., d..]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mu, ls))
    }

    /// `(mu, sigma)` for one segment.
    pub fn encode_reference(&self, segment: &MotionSegment) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = segment_features(segment);
        let (mu, ls) = self.encode_batch(&Array2::from_shape_vec((1, SEGMENT_DIM), f.to_vec()).expect("row"))?;
        Ok((mu.into_raw_vec_and_offset().0, ls.mapv(f64::exp).into_raw_vec_and_offset().0))
    }

    fn policy_input(&self, prop_rows: &Array2<f64>, z: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
        if z.ncols() != self.cfg.d_z {
            return Err(Error::Shape { expected: self.cfg.d_z, got: z.ncols() });
        }
        let (h, tape) = self.prop_encoder.forward(prop_rows)?;
        let input = ndarray::concatenate(Axis(1), &[h.view(), z.view()]).map_err(|_| Error::Shape {
            expected: h.nrows(),
            got: z.nrows(),
        })?;
        Ok((input, tape))
    }

    fn squash_rows(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut mean = raw.clone();
        for mut row in mean.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.bounds.squash(*v, j);
            }
        }
        mean
    }

    /// Action means for a batch of proprioceptive rows and latents.
    pub fn action_mean_batch(&self, prop_rows: &Array2<f64>, z: &Array2<f64>) -> Result<Array2<f64>> {
        let (input, _) = self.policy_input(prop_rows, z)?;
        Ok(self.squash_rows(&self.policy.predict(&input)?))
    }

    /// Action mean and per-joint std for one state.
    pub fn act(&self, z: &[f64], state: &RobotState) -> Result<([f64; 4], [f64; 4])> {
        let prop = Array2::from_shape_vec((1, PROPRIO_DIM), proprio_features(state).to_vec()).expect("row");
        let zr = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        let m = self.action_mean_batch(&prop, &zr)?;
        let mut mean = [0.0; 4];
        mean.copy_from_slice(m.as_slice().expect("contiguous"));
        Ok((mean, self.action_std()))
    }

    pub fn action_std(&self) -> [f64; 4] {
        let mut s = [0.0; 4];
        for (o, l) in s.iter_mut().zip(&self.action_log_std) {
            *o = l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
        }
        s
    }

    fn critic_input(&self, prop_rows: &Array2<f64>, z: &Array2<f64>, clip_ids: &[usize]) -> Result<Array2<f64>> {
        let n = prop_rows.nrows();
        if z.nrows() != n || clip_ids.len() != n {
            return Err(Error::Shape { expected: n, got: z.nrows().min(clip_ids.len()) });
        }
        let width = PROPRIO_DIM + self.cfg.d_z + self.cfg.embed_dim;
        let mut input = Array2::zeros((n, width));
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("contiguous");
            row[..PROPRIO_DIM].copy_from_slice(prop_rows.row(i).as_slice().expect("contiguous"));
            row[PROPRIO_DIM..PROPRIO_DIM + self.cfg.d_z].copy_from_slice(z.row(i).as_slice().expect("contiguous"));
            row[PROPRIO_DIM + self.cfg.d_z..].copy_from_slice(self.embeddings.row(clip_ids[i])?);
        }
        Ok(input)
    }

    pub fn value_batch(&self, prop_rows: &Array2<f64>, z: &Array2<f64>, clip_ids: &[usize]) -> Result<Vec<f64>> {
        let input = self.critic_input(prop_rows, z, clip_ids)?;
        Ok(self.critic.predict(&input)?.into_raw_vec_and_offset().0)
    }

    pub fn critic_value(&self, state: &RobotState, z: &[f64], clip_id: usize) -> Result<f64> {
        let prop = Array2::from_shape_vec((1, PROPRIO_DIM), proprio_features(state).to_vec()).expect("row");
        let zr = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        Ok(self.value_batch(&prop, &zr, &[clip_id])?[0])
    }

    /// Value predictions and the gradient of `sum_i w_i * V_i` with respect
    /// to critic parameters and embeddings, accumulated into the buffers.
    pub fn critic_backward(
        &self,
        prop_rows: &Array2<f64>,
        z: &Array2<f64>,
        clip_ids: &[usize],
        value_grad: impl Fn(usize, f64) -> f64,
        critic_grads: &mut [f64],
        embed_grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        let input = self.critic_input(prop_rows, z, clip_ids)?;
        let (out, tape) = self.critic.forward(&input)?;
        let values = out.into_raw_vec_and_offset().0;
        let g: Vec<f64> = values.iter().enumerate().map(|(i, v)| value_grad(i, *v)).collect();
        let g = Array2::from_shape_vec((g.len(), 1), g).expect("column");
        let din = self.critic.backward(&tape, &g, critic_grads)?;
        let off = PROPRIO_DIM + self.cfg.d_z;
        let e = self.cfg.embed_dim;
        for (i, &c) in clip_ids.iter().enumerate() {
            for k in 0..e {
                embed_grads[c * e + k] += din[[i, off + k]];
            }
        }
        Ok(values)
    }

    /// Forward pass of the whole actor for a batch: latent from the encoder
    /// at the stored unit noise, action mean, and log-probability of the
    /// stored actions.
    pub fn actor_forward(
        &self,
        segments: &Array2<f64>,
        prop_rows: &Array2<f64>,
        eps: &Array2<f64>,
        actions: &Array2<f64>,
    ) -> Result<ActorPass> {
        let d = self.cfg.d_z;
        let (enc_out, enc_tape) = self.encoder.forward(segments)?;
        if eps.dim() != (segments.nrows(), d) {
            return Err(Error::Shape { expected: d, got: eps.ncols() });
        }
        if actions.dim() != (segments.nrows(), ACTION_DIM) {
            return Err(Error::Shape { expected: ACTION_DIM, got: actions.ncols() });
        }
        let mu = enc_out.slice(s![.., ..d]).to_owned();
        let raw_ls = enc_out.slice(s![.., d..]);
        let clamped = raw_ls.mapv(clamp_log_std);
        let log_sigma = clamped.mapv(|(v, _)| v);
        let sigma_live = clamped.mapv(|(_, live)| live);
        let z = &mu + &(log_sigma.mapv(f64::exp) * eps);
        let (input, prop_tape) = self.policy_input(prop_rows, &z)?;
        let (raw, pol_tape) = self.policy.forward(&input)?;
        let mean = self.squash_rows(&raw);
        let ls: Vec<f64> = self.action_log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let log_prob = mean
            .rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(m, a)| {
                m.iter()
                    .zip(a.iter())
                    .zip(&ls)
                    .map(|((m, a), l)| {
                        let u = (a - m) / l.exp();
                        -0.5 * u * u - l - HALF_LN_2PI
                    })
                    .sum()
            })
            .collect();
        Ok(ActorPass {
            mu,
            log_sigma,
            sigma_live,
            z,
            eps: eps.clone(),
            raw,
            mean,
            actions: actions.clone(),
            log_prob,
            enc_tape,
            prop_tape,
            pol_tape,
        })
    }

    /// Entropy of the action distribution.
    pub fn action_entropy(&self) -> f64 {
        self.action_log_std
            .iter()
            .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX) + 0.5 + HALF_LN_2PI)
            .sum()
    }

    /// Reverse sweep for the objective
    /// `sum_i d_logp[i] * logp_i + d_entropy * H + kl_scale * sum_i L_AR,i`,
    /// accumulating into `grads`. Returns the summed AR-KL loss.
    pub fn actor_backward(
        &self,
        pass: &ActorPass,
        d_logp: &[f64],
        d_entropy: f64,
        z_prev: &Array2<f64>,
        kl_scale: f64,
        grads: &mut ActorGrads,
    ) -> Result<f64> {
        let n = pass.mean.nrows();
        let d = self.cfg.d_z;
        if d_logp.len() != n {
            return Err(Error::Shape { expected: n, got: d_logp.len() });
        }
        if z_prev.dim() != (n, d) {
            return Err(Error::Shape { expected: d, got: z_prev.ncols() });
        }
        let ls: Vec<f64> = self.action_log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let ls_live: Vec<bool> = self.action_log_std.iter().map(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(l)).collect();

        // through the Gaussian log-density and the tanh squash
        let mut d_raw = Array2::zeros((n, ACTION_DIM));
        for i in 0..n {
            for j in 0..ACTION_DIM {
                let var = (2.0 * ls[j]).exp();
                let diff = pass.actions[[i, j]] - pass.mean[[i, j]];
                let d_mean = d_logp[i] * diff / var;
                let t = pass.raw[[i, j]].tanh();
                d_raw[[i, j]] = d_mean * self.bounds.half_range[j] * (1.0 - t * t);
                if ls_live[j] {
                    grads.action_log_std[j] += d_logp[i] * (diff * diff / var - 1.0);
                }
            }
        }
        for j in 0..ACTION_DIM {
            if ls_live[j] {
                grads.action_log_std[j] += d_entropy;
            }
        }
        let d_input = self.policy.backward(&pass.pol_tape, &d_raw, &mut grads.policy)?;
        let h_dim = self.cfg.prop_out();
        let d_h = d_input.slice(s![.., ..h_dim]).to_owned();
        self.prop_encoder.backward(&pass.prop_tape, &d_h, &mut grads.prop_encoder)?;
        let d_z = d_input.slice(s![.., h_dim..]);

        let (alpha, beta) = (self.cfg.alpha, self.cfg.beta);
        let var_p = self.cfg.prior_var();
        let mut kl_total = 0.0;
        let mut d_enc = Array2::zeros((n, 2 * d));
        for i in 0..n {
            for k in 0..d {
                let mu = pass.mu[[i, k]];
                let ls = pass.log_sigma[[i, k]];
                let sigma = ls.exp();
                let diff = mu - alpha * z_prev[[i, k]];
                kl_total += beta * (0.5 * var_p.ln() - ls + (sigma * sigma + diff * diff) / (2.0 * var_p) - 0.5);
                let g_mu = d_z[[i, k]] + kl_scale * beta * diff / var_p;
                let g_ls = d_z[[i, k]] * sigma * pass.eps[[i, k]] + kl_scale * beta * (sigma * sigma / var_p - 1.0);
                d_enc[[i, k]] = g_mu;
                if pass.sigma_live[[i, k]] {
                    d_enc[[i, d + k]] = g_ls;
                }
            }
        }
        self.encoder.backward(&pass.enc_tape, &d_enc, &mut grads.encoder)?;
        Ok(kl_total)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        self.cfg.to_meta(&mut ck.meta);
        ck.put_mlp("encoder", &self.encoder);
        ck.put_mlp("prop_encoder", &self.prop_encoder);
        ck.put_mlp("policy", &self.policy);
        ck.put_mlp("critic", &self.critic);
        ck.tensors.insert("action_log_std".into(), crate::nn::Tensor::vector(&self.action_log_std));
        ck.tensors.insert(
            "embeddings".into(),
            crate::nn::Tensor {
                shape: vec![self.embeddings.len(), self.embeddings.dim()],
                data: self.embeddings.params().to_vec(),
            },
        );
    }

    pub fn from_checkpoint(ck: &Checkpoint, geometry: &RobotGeometry) -> Result<Self> {
        let cfg = PriorConfig::from_meta(&ck.meta)?;
        let log_std = ck.tensor("action_log_std")?;
        if log_std.data.len() != ACTION_DIM {
            return Err(Error::Compatibility("action_log_std has the wrong length".into()));
        }
        let emb = ck.tensor("embeddings")?;
        if emb.shape.len() != 2 || emb.shape[1] != cfg.embed_dim || emb.data.len() != emb.shape[0] * emb.shape[1] {
            return Err(Error::Compatibility(format!("embedding table has shape {:?}", emb.shape)));
        }
        Ok(Self {
            encoder: ck.get_mlp("encoder", &cfg.encoder_sizes(), Activation::Elu)?,
            prop_encoder: ck.get_mlp("prop_encoder", &cfg.prop_sizes(), Activation::Elu)?,
            policy: ck.get_mlp("policy", &cfg.policy_sizes(), Activation::Elu)?,
            critic: ck.get_mlp("critic", &cfg.critic_sizes(), Activation::Elu)?,
            action_log_std: log_std.data.clone(),
            embeddings: MotionEmbeddingTable { dim: cfg.embed_dim, data: emb.data.clone() },
            bounds: ActionBounds::from_geometry(geometry),
            cfg,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataset::{extract_segment, generate_synthetic_clip, SynthKind, SynthParams};
    use crate::nn::{finite_difference, relative_error};

    fn small_cfg() -> PriorConfig {
        PriorConfig {
            d_z: 3,
            encoder_hidden: vec![6],
            prop_layers: vec![7, 5],
            policy_hidden: vec![6],
            critic_hidden: vec![5],
            embed_dim: 2,
            ..Default::default()
        }
    }

    fn standing_state() -> RobotState {
        let g = RobotGeometry::default();
        RobotState {
            root_x: 0.0,
            root_z: g.standing_height(),
            pitch: 0.0,
            vx: 0.1,
            vz: 0.0,
            pitch_rate: 0.0,
            joints: g.standing_joints(),
            joint_vels: [0.0; 4],
            foot_contact: [true; 2],
            last_action: g.standing_joints(),
            time: 0.0,
            anchors: [None; 2],
        }
    }

    #[test]
    fn kl_closed_form_examples() {
        let a: f64 = 0.95;
        let var = 1.0 - a * a;
        let z_prev = [0.4, -1.0];
        let mu = [a * 0.4, -a];
        let s = [var.sqrt(); 2];
        assert!(ar_kl_loss(&mu, &s, &z_prev, a, 1.0).unwrap().abs() <= 1e-12);
        let v = ar_kl_loss(&[0.5], &[0.0975f64.sqrt()], &[0.0], a, 1.0).unwrap();
        assert!((v - 0.25 / (2.0 * 0.0975)).abs() < 1e-9);
        assert!(ar_kl_loss(&[0.5], &[0.1], &[0.0, 1.0], a, 1.0).is_err());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let (mu, sigma, zp) = ([0.3, -0.2], [0.4, 0.2], [0.1, 0.5]);
        let (gm, gl) = ar_kl_grad(&mu, &sigma, &zp, 0.95, 0.7);
        let fd_mu = finite_difference(&mu, 1e-6, |m| ar_kl_loss(m, &sigma, &zp, 0.95, 0.7).unwrap());
        let ls: Vec<f64> = sigma.iter().map(|s| s.ln()).collect();
        let fd_ls = finite_difference(&ls, 1e-6, |l| {
            let s: Vec<f64> = l.iter().map(|v| v.exp()).collect();
            ar_kl_loss(&mu, &s, &zp, 0.95, 0.7).unwrap()
        });
        for (a, b) in gm.iter().zip(&fd_mu).chain(gl.iter().zip(&fd_ls)) {
            assert!(relative_error(*a, *b, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn prior_chain_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chain = sample_prior_chain(0.95, 100_000, &mut rng);
        let mean = chain.iter().sum::<f64>() / chain.len() as f64;
        let var = chain.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / chain.len() as f64;
        assert!((0.97..=1.03).contains(&var), "variance {var}");
    }

    #[test]
    fn next_latent_respects_noise_and_holding() {
        let cfg = PriorConfig { resample_every: 2, ..small_cfg() };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = next_latent(&[1.0, 2.0, 3.0], &[1e-3; 3], &[0.0; 3], 0, &cfg, &mut r1);
        let b = next_latent(&[1.0, 2.0, 3.0], &[1e-3; 3], &[0.0; 3], 0, &cfg, &mut r2);
        assert_eq!(a, b);
        assert!(a.z.iter().zip(&a.mu).all(|(z, m)| (z - m).abs() < 0.01));
        let held = next_latent(&[1.0, 2.0, 3.0], &[1.0; 3], &a.z, 1, &cfg, &mut r1);
        assert_eq!(held.z, a.z);
    }

    #[test]
    fn next_latent_sample_mean() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mu, sigma) = ([0.5, -1.0, 2.0], [0.3, 1.0, 0.05]);
        let n = 100_000;
        let mut sum = [0.0; 3];
        for i in 0..n {
            let l = next_latent(&mu, &sigma, &[0.0; 3], i, &cfg, &mut rng);
            for k in 0..3 {
                sum[k] += l.z[k];
            }
        }
        for k in 0..3 {
            let m = sum[k] / n as f64;
            assert!((m - mu[k]).abs() < 3.0 * sigma[k] / (n as f64).sqrt());
        }
    }

    #[test]
    fn encoder_is_pure_and_separates_clips() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = MotionPrior::new(PriorConfig::default(), 2, &g, &mut rng).unwrap();
        let stand = generate_synthetic_clip(SynthKind::Stand, &SynthParams::defaults(SynthKind::Stand), &g).unwrap();
        let flip = generate_synthetic_clip(SynthKind::Backflip, &SynthParams::defaults(SynthKind::Backflip), &g).unwrap();
        let s1 = extract_segment(&stand, 0, 10).unwrap();
        let mid = flip.frames.len() / 2;
        let s2 = extract_segment(&flip, 1, mid).unwrap();
        let (m1, sd1) = prior.encode_reference(&s1).unwrap();
        let (m1b, _) = prior.encode_reference(&s1).unwrap();
        assert_eq!(m1, m1b);
        assert!(sd1.iter().all(|s| *s > 0.0));
        let (m2, _) = prior.encode_reference(&s2).unwrap();
        let dist: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn segment_features_are_translation_invariant() {
        let g = RobotGeometry::default();
        let walk = generate_synthetic_clip(SynthKind::Walk, &SynthParams::defaults(SynthKind::Walk), &g).unwrap();
        let mut shifted = walk.clone();
        for f in &mut shifted.frames {
            f.root_x += 5.0;
            f.recompute_feet(&g);
        }
        let a = segment_features(&extract_segment(&walk, 0, 20).unwrap());
        let b = segment_features(&extract_segment(&shifted, 0, 20).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn action_mean_within_limits_and_continuous_in_z() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut prior = MotionPrior::new(small_cfg(), 1, &g, &mut rng).unwrap();
        prior.policy.scale_output_layer(1e3);
        let state = standing_state();
        for _ in 0..3 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (m0, _) = prior.act(&z, &state).unwrap();
            for (j, v) in m0.iter().enumerate() {
                assert!(*v >= g.joint_limits[j][0] && *v <= g.joint_limits[j][1]);
            }
            let mut prev = f64::INFINITY;
            for delta in [1e-2, 1e-4, 1e-6] {
                let zd: Vec<f64> = z.iter().map(|v| v + delta).collect();
                let (m1, _) = prior.act(&zd, &state).unwrap();
                let change: f64 = m0.iter().zip(&m1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(change <= prev + 1e-15);
                prev = change;
            }
            assert!(prev < 1e-2);
        }
    }

    #[test]
    fn fresh_policy_outputs_standing_pose() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prior = MotionPrior::new(PriorConfig::default(), 1, &g, &mut rng).unwrap();
        let (m, std) = prior.act(&[0.0; 16], &standing_state()).unwrap();
        for (a, b) in m.iter().zip(&g.standing_joints()) {
            assert!((a - b).abs() < 0.1);
        }
        assert!((std[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn critic_embeddings_distinguish_clips() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prior = MotionPrior::new(small_cfg(), 2, &g, &mut rng).unwrap();
        let s = standing_state();
        let a = prior.critic_value(&s, &[0.1, 0.2, 0.3], 0).unwrap();
        let b = prior.critic_value(&s, &[0.1, 0.2, 0.3], 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, prior.critic_value(&s, &[0.1, 0.2, 0.3], 0).unwrap());
        assert!(matches!(prior.critic_value(&s, &[0.1, 0.2, 0.3], 2), Err(Error::Index { .. })));
    }

    #[test]
    fn critic_embedding_gradient_matches_finite_differences() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prior = MotionPrior::new(small_cfg(), 3, &g, &mut rng).unwrap();
        let prop = Array2::from_shape_fn((4, PROPRIO_DIM), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let z = Array2::from_shape_fn((4, 3), |(i, j)| ((i + 2 * j) as f64 * 0.5).cos());
        let clips = [0, 2, 2, 1];
        let mut cg = vec![0.0; prior.critic.num_params()];
        let mut eg = vec![0.0; prior.embeddings.params().len()];
        prior.critic_backward(&prop, &z, &clips, |i, _| 1.0 + i as f64, &mut cg, &mut eg).unwrap();
        let fd = finite_difference(prior.embeddings.params(), 1e-6, |p| {
            let mut q = prior.clone();
            q.embeddings.params_mut().copy_from_slice(p);
            q.value_batch(&prop, &z, &clips).unwrap().iter().enumerate().map(|(i, v)| (1.0 + i as f64) * v).sum()
        });
        for (a, b) in eg.iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-6) < 1e-5, "{a} vs {b}");
        }
    }

    /// Scalar objective matching what `actor_backward` differentiates.
    fn actor_objective(prior: &MotionPrior, batch: &(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>), w: &[f64]) -> f64 {
        let (seg, prop, eps, act, zp) = batch;
        let pass = prior.actor_forward(seg, prop, eps, act).unwrap();
        let mut f: f64 = pass.log_prob.iter().zip(w).map(|(l, w)| l * w).sum();
        f += 0.3 * prior.action_entropy();
        for i in 0..seg.nrows() {
            let mu = pass.mu.row(i).to_vec();
            let sigma: Vec<f64> = pass.log_sigma.row(i).iter().map(|l| l.exp()).collect();
            f += 2.0 * ar_kl_loss(&mu, &sigma, &zp.row(i).to_vec(), prior.cfg.alpha, prior.cfg.beta).unwrap();
        }
        f
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = PriorConfig { beta: 0.2, ..small_cfg() };
        let mut prior = MotionPrior::new(cfg, 1, &g, &mut rng).unwrap();
        prior.policy.scale_output_layer(30.0);
        prior.encoder.scale_output_layer(5.0);
        let n = 5;
        let seg = Array2::from_shape_fn((n, SEGMENT_DIM), |(i, j)| ((i * 31 + j) as f64 * 0.21).sin());
        let prop = Array2::from_shape_fn((n, PROPRIO_DIM), |(i, j)| ((i * 13 + j) as f64 * 0.43).cos());
        let eps = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 3 + j) as f64 * 1.7).sin());
        let act = Array2::from_shape_fn((n, ACTION_DIM), |(i, j)| g.standing_joints()[j] + 0.3 * ((i + j) as f64).sin());
        let zp = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 5 + j) as f64 * 0.9).cos());
        let w: Vec<f64> = (0..n).map(|i| 0.5 - 0.2 * i as f64).collect();
        let batch = (seg, prop, eps, act, zp);
        let pass = prior.actor_forward(&batch.0, &batch.1, &batch.2, &batch.3).unwrap();
        let mut grads = ActorGrads::zeros(&prior);
        prior.actor_backward(&pass, &w, 0.3, &batch.4, 2.0, &mut grads).unwrap();

        let check = |analytic: &[f64], fd: Vec<f64>, name: &str| {
            for (k, (a, b)) in analytic.iter().zip(&fd).enumerate() {
                assert!(relative_error(*a, *b, 1e-6) < 1e-4, "{name}[{k}]: {a} vs {b}");
            }
        };
        let fd = finite_difference(prior.encoder.params(), 1e-6, |p| {
            let mut q = prior.clone();
            q.encoder.params_mut().copy_from_slice(p);
            actor_objective(&q, &batch, &w)
        });
        check(&grads.encoder, fd, "encoder");
        let fd = finite_difference(prior.prop_encoder.params(), 1e-6, |p| {
            let mut q = prior.clone();
            q.prop_encoder.params_mut().copy_from_slice(p);
            actor_objective(&q, &batch, &w)
        });
        check(&grads.prop_encoder, fd, "prop_encoder");
        let fd = finite_difference(prior.policy.params(), 1e-6, |p| {
            let mut q = prior.clone();
            q.policy.params_mut().copy_from_slice(p);
            actor_objective(&q, &batch, &w)
        });
        check(&grads.policy, fd, "policy");
        let fd = finite_difference(&prior.action_log_std, 1e-6, |p| {
            let mut q = prior.clone();
            q.action_log_std.copy_from_slice(p);
            actor_objective(&q, &batch, &w)
        });
        check(&grads.action_log_std, fd, "log_std");
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prior = MotionPrior::new(small_cfg(), 2, &g, &mut rng).unwrap();
        let mut ck = Checkpoint::default();
        prior.to_checkpoint(&mut ck);
        let back = MotionPrior::from_checkpoint(&ck, &g).unwrap();
        assert_eq!(back, prior);
    }
}
