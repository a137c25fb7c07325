mod common;

use motion_prior::discriminator::{disc_loss, DiscConfig};
use motion_prior::dataset::RobotGeometry;
use motion_prior::nn::{Activation, Mlp};
use motion_prior::prior::{MotionPrior, PriorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn tiny() -> PriorConfig {
    PriorConfig {
        d_z: 3,
        beta: 0.5,
        encoder_hidden: vec![8, 8],
        prop_layers: vec![8, 6],
        policy_hidden: vec![8, 8],
        critic_hidden: vec![8],
        ..Default::default()
    }
}

#[test]
fn actor_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut prior = MotionPrior::new(tiny(), 1, &RobotGeometry::default(), &mut rng).unwrap();
    prior.policy.scale_output_layer(30.0);
    prior.encoder.scale_output_layer(5.0);
    let batch = actor_batch(&prior, 3, 5);
    let g = actor_gradients(&prior, &batch, 0.1, 1.0);
    let objective = |q: &MotionPrior| actor_objective(q, &batch, 0.1, 1.0);
    let (e, _) = worst_gradient_error(prior.encoder.params(), &g.encoder, usize::MAX, |p| {
        let mut q = prior.clone();
        q.encoder.params_mut().copy_from_slice(p);
        objective(&q)
    });
    assert!(e < 1e-4, "encoder {e}");
    let (e, _) = worst_gradient_error(prior.policy.params(), &g.policy, usize::MAX, |p| {
        let mut q = prior.clone();
        q.policy.params_mut().copy_from_slice(p);
        objective(&q)
    });
    assert!(e < 1e-4, "policy {e}");
    let (e, _) = worst_gradient_error(&prior.action_log_std, &g.action_log_std, usize::MAX, |p| {
        let mut q = prior.clone();
        q.action_log_std.copy_from_slice(p);
        objective(&q)
    });
    assert!(e < 1e-4, "log-std {e}");
}

#[test]
fn discriminator_gradient_includes_the_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DiscConfig { hidden: vec![12, 12], ..Default::default() };
    let net = Mlp::new(&cfg.sizes(), Activation::Tanh, &mut rng);
    let expert = feature_cloud(0.2, 0.7, 5, &mut rng);
    let policy = feature_cloud(-0.2, 0.7, 4, &mut rng);
    for gp in [0.0, 10.0] {
        let mut grads = vec![0.0; net.num_params()];
        disc_loss(&net, &expert, &policy, gp, Some(&mut grads)).unwrap();
        let (e, _) = worst_gradient_error(net.params(), &grads, usize::MAX, |p| {
            let n = Mlp::from_params(net.sizes(), Activation::Tanh, p.to_vec()).unwrap();
            disc_loss(&n, &expert, &policy, gp, None).unwrap().total()
        });
        assert!(e < 1e-4, "gp {gp}: {e}");
    }
}
