//! Train one discriminator on two separable Gaussian feature clouds and
//! watch the least-squares scores move to +1 (expert) and -1 (policy).
//!
//! ```text
//! cargo run --release --example discriminator_toy -- [updates] [seed]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use motion_prior::discriminator::{DiscConfig, DiscriminatorBank, TransitionFeature, FEATURE_DIM};

fn cloud(center: f64, n: usize, rng: &mut impl Rng) -> Vec<TransitionFeature> {
    (0..n)
        .map(|_| {
            let mut f = [0.0; FEATURE_DIM];
            for v in f.iter_mut() {
                *v = center + 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
            f
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn main() -> motion_prior::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let updates: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let cfg = DiscConfig { hidden: vec![64, 64], ..Default::default() };
    let mut bank = DiscriminatorBank::from_expert_sets(cfg, vec![cloud(0.5, 4096, &mut rng)], seed)?;
    let held_expert = cloud(0.5, 1000, &mut rng);
    let held_policy = cloud(-0.5, 1000, &mut rng);

    for u in 1..=updates {
        let stats = bank.update_bank(&[cloud(-0.5, 128, &mut rng)], false)?;
        if u % 50 == 0 || u == updates {
            let de = mean(&bank.score(0, &held_expert)?);
            let dp = mean(&bank.score(0, &held_policy)?);
            println!("update {u:4}  loss {:.4}  held-out D(expert) {de:+.3}  D(policy) {dp:+.3}", stats[0].loss);
        }
    }
    Ok(())
}
