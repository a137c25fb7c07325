//! Advantage estimation and the clipped surrogate.

use serde::{Deserialize, Serialize};

/// Generalized advantage estimation over one environment's sequence.
///
/// `next_values[t]` is the value of the state reached after step `t`, already
/// zeroed when that state is terminal. `dones[t]` cuts the recursion at an
/// episode boundary (termination or truncation).
pub fn gae(rewards: &[f64], values: &[f64], next_values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(
        values.len() == n && next_values.len() == n && dones.len() == n,
        "gae inputs must have equal lengths"
    );
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        let carry = if dones[t] { 0.0 } else { gamma * lambda * running };
        running = delta + carry;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shift and scale to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    for a in adv.iter_mut() {
        *a = (*a - mean) * scale;
    }
}

/// Per-sample clipped objective `min(rho A, clip(rho, 1-eps, 1+eps) A)` and
/// whether the unclipped branch carries the gradient.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// Running statistics of value targets; the critic regresses normalized
/// returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueNormalizer {
    pub mean: f64,
    pub var: f64,
    pub initialized: bool,
    pub rate: f64,
}

impl Default for ValueNormalizer {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            initialized: false,
            rate: 0.05,
        }
    }
}

impl ValueNormalizer {
    pub fn std(&self) -> f64 {
        self.var.sqrt().max(1e-3)
    }

    pub fn update(&mut self, targets: &[f64]) {
        if targets.is_empty() {
            return;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        if self.initialized {
            self.mean += self.rate * (mean - self.mean);
            self.var += self.rate * (var - self.var);
        } else {
            self.mean = mean;
            self.var = var.max(1e-6);
            self.initialized = true;
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std() + self.mean
    }
}
