mod common;

use common::*;

const TOL: f64 = 1e-4;

#[test]
fn flow_matching_loss_gradient() {
    for seed in 0..3 {
        assert!(fm_error(seed) < TOL);
    }
}

#[test]
fn penalised_critic_gradient() {
    for seed in 0..3 {
        assert!(critic_error(seed) < TOL);
    }
}

#[test]
fn normalised_actor_gradient() {
    for seed in 0..3 {
        assert!(actor_error(seed) < TOL);
    }
}

#[test]
fn behavior_cloning_gradients() {
    for seed in 0..3 {
        let (g, c, d) = (gaussian_error(seed), cvae_error(seed), ddpm_error(seed));
        assert!(g < TOL && c < TOL && d < TOL, "gaussian {g:e} cvae {c:e} ddpm {d:e}");
    }
}
