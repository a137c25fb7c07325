//! Oracles and fixtures shared by the integration tests and the acceptance
//! suite. Everything here is computed independently of the library's own
//! numerics.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use motion_prior::discriminator::{DiscConfig, TransitionFeature, FEATURE_DIM};
use motion_prior::prior::{ActorGrads, MotionPrior, PriorConfig, ACTION_DIM, PROPRIO_DIM, SEGMENT_DIM};
use motion_prior::trainer::TrainConfig;

/// Network widths used for every training run in the test suites.
pub fn small_prior() -> PriorConfig {
    PriorConfig {
        encoder_hidden: vec![64, 64],
        prop_layers: vec![64, 32],
        policy_hidden: vec![128, 128],
        critic_hidden: vec![128, 128],
        ..Default::default()
    }
}

pub fn small_disc() -> DiscConfig {
    DiscConfig { hidden: vec![64, 64], ..Default::default() }
}

pub fn small_train(clips: &[&str], steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        total_env_steps: steps,
        clips: clips.iter().map(|c| c.to_string()).collect(),
        prior: small_prior(),
        disc: small_disc(),
        eval_every: 1_000_000,
        ..Default::default()
    }
}

/// The same settings as a key = value config file.
pub fn small_train_file(clips: &[&str], steps: usize) -> String {
    format!(
        "# test configuration\n\
         clips = {}\n\
         total_env_steps = {steps}\n\
         eval_every = 10\n\
         eval_episodes = 2\n\
         prior.encoder_hidden = 64, 64\n\
         prior.prop_layers = 64, 32\n\
         prior.policy_hidden = 128, 128\n\
         prior.critic_hidden = 128, 128\n\
         disc.hidden = 64, 64\n",
        clips.join(", ")
    )
}

/// Central difference of `f` with respect to coordinate `i` of `params`.
pub fn central_difference(params: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    p[i] = params[i] + h;
    let up = f(&p);
    p[i] = params[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Every index when `limit` covers the group, otherwise an evenly spread
/// subset that always includes the first and last parameter.
pub fn probe_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    (0..limit).map(|k| k * (n - 1) / (limit - 1)).collect()
}

/// Worst relative error of `analytic` against central differences of `f`
/// over the probed coordinates.
pub fn worst_gradient_error(params: &[f64], analytic: &[f64], limit: usize, f: impl Fn(&[f64]) -> f64) -> (f64, usize) {
    let idx = probe_indices(params.len(), limit);
    let worst = idx
        .iter()
        .map(|&i| rel_err(analytic[i], central_difference(params, i, 1e-5, &f)))
        .fold(0.0, f64::max);
    (worst, idx.len())
}

/// Monte-Carlo estimate of `KL(N(mu, sigma^2) || N(alpha z_prev, 1 - alpha^2))`
/// summed over dimensions: mean and standard error of `log q(z) - log p(z)`.
pub fn mc_ar_kl(mu: &[f64], sigma: &[f64], z_prev: &[f64], alpha: f64, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = (1.0 - alpha * alpha).sqrt();
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut lr = 0.0;
        for d in 0..mu.len() {
            let e: f64 = rng.sample(StandardNormal);
            let z = mu[d] + sigma[d] * e;
            let u = (z - alpha * z_prev[d]) / sp;
            lr += -0.5 * e * e - sigma[d].ln() + 0.5 * u * u + sp.ln();
        }
        sum += lr;
        sq += lr * lr;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Isotropic Gaussian cloud of transition features.
pub fn feature_cloud(center: f64, spread: f64, n: usize, rng: &mut impl Rng) -> Vec<TransitionFeature> {
    (0..n)
        .map(|_| {
            let mut f = [0.0; FEATURE_DIM];
            for v in f.iter_mut() {
                *v = center + spread * rng.sample::<f64, _>(StandardNormal);
            }
            f
        })
        .collect()
}

/// A random actor batch: segments, proprioception, latent noise, actions
/// and previous latents.
pub struct ActorBatch {
    pub seg: Array2<f64>,
    pub prop: Array2<f64>,
    pub eps: Array2<f64>,
    pub actions: Array2<f64>,
    pub z_prev: Array2<f64>,
    pub weights: Vec<f64>,
}

pub fn actor_batch(prior: &MotionPrior, n: usize, seed: u64) -> ActorBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = prior.d_z();
    let mut gauss = |r: usize, c: usize, s: f64| Array2::from_shape_fn((r, c), |_| s * rng.sample::<f64, _>(StandardNormal));
    let seg = gauss(n, SEGMENT_DIM, 0.5);
    let prop = gauss(n, PROPRIO_DIM, 0.5);
    let eps = gauss(n, d, 1.0);
    let z_prev = gauss(n, d, 1.0);
    let noise = gauss(n, ACTION_DIM, 0.2);
    let (c, h) = (prior.bounds.center, prior.bounds.half_range);
    // strictly inside the bounds so the squashed log-density stays finite
    let actions = Array2::from_shape_fn((n, ACTION_DIM), |(i, j)| c[j] + (noise[[i, j]]).clamp(-0.9 * h[j], 0.9 * h[j]));
    let weights = (0..n).map(|i| 0.7 - 0.3 * i as f64).collect();
    ActorBatch { seg, prop, eps, actions, z_prev, weights }
}

/// The scalar the actor reverse sweep differentiates, rebuilt from public
/// forward quantities: weighted log-probabilities, an entropy bonus and the
/// scaled AR-KL written out in closed form.
pub fn actor_objective(prior: &MotionPrior, b: &ActorBatch, d_entropy: f64, kl_scale: f64) -> f64 {
    let pass = prior.actor_forward(&b.seg, &b.prop, &b.eps, &b.actions).unwrap();
    let mut f: f64 = pass.log_prob.iter().zip(&b.weights).map(|(l, w)| l * w).sum();
    f += d_entropy * prior.action_entropy();
    let (alpha, beta) = (prior.cfg.alpha, prior.cfg.beta);
    let vp = 1.0 - alpha * alpha;
    for i in 0..b.seg.nrows() {
        for d in 0..prior.d_z() {
            let m = pass.mu[[i, d]];
            let ls = pass.log_sigma[[i, d]];
            let diff = m - alpha * b.z_prev[[i, d]];
            f += kl_scale * beta * (0.5 * vp.ln() - ls + ((2.0 * ls).exp() + diff * diff) / (2.0 * vp) - 0.5);
        }
    }
    f
}

pub fn actor_gradients(prior: &MotionPrior, b: &ActorBatch, d_entropy: f64, kl_scale: f64) -> ActorGrads {
    let pass = prior.actor_forward(&b.seg, &b.prop, &b.eps, &b.actions).unwrap();
    let mut g = ActorGrads::zeros(prior);
    prior.actor_backward(&pass, &b.weights, d_entropy, &b.z_prev, kl_scale, &mut g).unwrap();
    g
}

/// Pearson chi-square statistic and its upper-tail p-value for counts
/// against a uniform expectation.
pub fn chi_square_uniform(counts: &[usize]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    (stat, 1.0 - dist.cdf(stat))
}
