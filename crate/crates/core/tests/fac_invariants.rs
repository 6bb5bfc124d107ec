use fac_core::baselines::{fql_config, train_fql};
use fac_core::envs::{bandit_true_q, BanditEnv, OfflineDataset, BANDIT_STATE};
use fac_core::experiments::bandit::bandit_dataset;
use fac_core::fac::*;
use fac_core::flowmatch::ProxyConfig;
use fac_core::nn::{AdamState, Tape};
use fac_core::rng::{normal_matrix, seeded};
use fac_core::{Mlp, Tensor};
use rand::Rng;

fn tiny_cfg() -> FacConfig {
    FacConfig {
        gamma: 0.0,
        steps: 15,
        batch_size: 16,
        actor_hidden: vec![8],
        critic_hidden: vec![8],
        proxy: ProxyConfig { hidden: vec![8], flow_steps: 3, train_steps: 10, batch_size: 16, lr: 1e-3 },
        log_every: 5,
        ..FacConfig::default()
    }
}

fn same_net(a: &Mlp, b: &Mlp) -> bool {
    a.params().iter().zip(b.params()).all(|(x, y)| x.values() == y.values())
}

fn targets(rng: &mut impl Rng, n: usize, d_a: usize, weights: Vec<f64>) -> CriticTargets {
    CriticTargets {
        penalty_actions: Tensor::matrix(n, d_a, (0..n * d_a).map(|_| rng.random_range(-1.0..1.0)).collect()),
        weights,
        targets: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Plain TD loss on both critics, recorded independently of the library.
fn td_grads(critics: &CriticPair, s: &Tensor, a: &Tensor, y: &[f64]) -> [Vec<Tensor>; 2] {
    let mut tape = Tape::new();
    let p = [critics.online[0].bind(&mut tape), critics.online[1].bind(&mut tape)];
    let av = tape.leaf(a.clone());
    let yv = tape.leaf(Tensor::matrix(y.len(), 1, y.to_vec()));
    let mut total = None;
    for i in 0..2 {
        let sv = tape.leaf(s.clone());
        let x = tape.concat_cols(&[sv, av]);
        let q = critics.online[i].forward_tape(&mut tape, &p[i], x).unwrap();
        let d = tape.sub(q, yv);
        let sq = tape.square(d);
        let li = tape.mean(sq);
        total = Some(match total {
            None => li,
            Some(acc) => tape.add(acc, li),
        });
    }
    let g = tape.backward(total.unwrap()).unwrap();
    [g.wrt_all(&p[0]), g.wrt_all(&p[1])]
}

#[test]
fn fql_is_fac_with_zero_alpha_bitwise() {
    let data = bandit_dataset(120, 5).unwrap();
    let cfg = FacConfig { alpha: 0.0, ..tiny_cfg() };
    let a = train_offline(&data, &cfg, &mut seeded(9)).unwrap();
    let b = train_fql(&data, &FacConfig { alpha: 0.5, ..tiny_cfg() }, &mut seeded(9)).unwrap();
    assert_eq!(fql_config(&tiny_cfg()).alpha, 0.0);
    assert!(same_net(&a.agent.actor.net, &b.agent.actor.net));
    for i in 0..2 {
        assert!(same_net(&a.agent.critics.online[i], &b.agent.critics.online[i]));
        assert!(same_net(&a.agent.critics.target[i], &b.agent.critics.target[i]));
    }
    assert_eq!(a.metrics, b.metrics);
    assert!(a.metrics.iter().all(|m| m.mean_w == 0.0));
}

#[test]
fn unpenalised_critic_gradient_is_plain_td_bitwise() {
    let mut rng = seeded(3);
    let critics = CriticPair::new(2, 2, &[16, 16], Aggregation::Min, &mut rng).unwrap();
    let (s, a) = (normal_matrix(&mut rng, 12, 2), normal_matrix(&mut rng, 12, 2));
    let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    let t = targets(&mut rng, 12, 2, w);
    let (_, g) = critic_loss_grad(&critics, &s, &a, &t, 0.0).unwrap();
    let want = td_grads(&critics, &s, &a, &t.targets);
    for i in 0..2 {
        for (x, y) in g[i].iter().zip(&want[i]) {
            assert_eq!(x.values(), y.values());
        }
    }
    // Zero weights switch the penalty off even when alpha is positive.
    let t0 = CriticTargets { weights: vec![0.0; 12], ..t };
    let (_, g0) = critic_loss_grad(&critics, &s, &a, &t0, 2.0).unwrap();
    for i in 0..2 {
        for (x, y) in g0[i].iter().zip(&want[i]) {
            assert_eq!(x.values(), y.values());
        }
    }
}

fn cosine(a: &[Tensor], b: &[Tensor]) -> f64 {
    let dot: f64 = a.iter().zip(b).flat_map(|(x, y)| x.values().iter().zip(y.values()).map(|(p, q)| p * q)).sum();
    let na: f64 = a.iter().flat_map(|x| x.values()).map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().flat_map(|x| x.values()).map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn normalised_actor_direction_ignores_critic_scale() {
    for seed in 0..5 {
        let mut rng = seeded(seed);
        let actor = OneStepActor::new(2, 2, &[16, 16], &mut rng).unwrap();
        let critics = CriticPair::new(2, 2, &[16, 16], Aggregation::Mean, &mut rng).unwrap();
        let mut scaled = critics.clone();
        for net in scaled.online.iter_mut() {
            let last = net.params().len() - 2;
            for p in &mut net.params_mut()[last..] {
                *p = p.map(|v| 10.0 * v);
            }
        }
        let s = normal_matrix(&mut rng, 32, 2);
        let z = normal_matrix(&mut rng, 32, 2);
        let pa = normal_matrix(&mut rng, 32, 2).map(|v| 0.5 * v);
        let q1 = critics.q_mean(&s, &actor.act(&s, &z).unwrap()).unwrap();
        let q10 = scaled.q_mean(&s, &actor.act(&s, &z).unwrap()).unwrap();
        for (x, y) in q1.iter().zip(&q10) {
            assert!((y - 10.0 * x).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        let (_, g1, _) = actor_loss_grad(&actor, &critics, &s, &z, &pa, 0.1, true, None).unwrap();
        let (_, g10, _) = actor_loss_grad(&actor, &scaled, &s, &z, &pa, 0.1, true, None).unwrap();
        assert!(cosine(&g1, &g10) >= 0.999);
    }
}

#[test]
fn bowl_critic_pulls_actions_to_origin() {
    let mut rng = seeded(4);
    let mut critics = CriticPair::new(1, 2, &[32, 32], Aggregation::Mean, &mut rng).unwrap();
    let mut opts = [AdamState::new(critics.online[0].params(), 3e-3), AdamState::new(critics.online[1].params(), 3e-3)];
    let s = Tensor::zeros(&[64, 1]);
    for _ in 0..1500 {
        let a = Tensor::matrix(64, 2, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = (0..64).map(|r| -a.row_slice(r).iter().map(|v| v * v).sum::<f64>()).collect();
        let t = CriticTargets { penalty_actions: a.clone(), weights: vec![0.0; 64], targets: y };
        let (_, g) = critic_loss_grad(&critics, &s, &a, &t, 0.0).unwrap();
        for i in 0..2 {
            opts[i].step(critics.online[i].params_mut(), &g[i]).unwrap();
        }
    }
    let mut actor = OneStepActor::new(1, 2, &[16], &mut rng).unwrap();
    let last = actor.net.params().len() - 1;
    actor.net.params_mut()[last] = Tensor::matrix(1, 2, vec![0.6, -0.5]);
    let z = normal_matrix(&mut rng, 64, 2).map(|v| 0.1 * v);
    let spread = |act: &OneStepActor| act.act(&s, &z).unwrap().values().iter().map(|v| v * v).sum::<f64>() / 64.0;
    let before = spread(&actor);
    let mut opt = AdamState::new(actor.net.params(), 1e-2);
    for _ in 0..20 {
        let (_, g, _) = actor_loss_grad(&actor, &critics, &s, &z, &z, 0.0, true, None).unwrap();
        opt.step(actor.net.params_mut(), &g).unwrap();
    }
    assert!(spread(&actor) < 0.5 * before, "{} vs {before}", spread(&actor));
}

#[test]
fn min_target_never_exceeds_mean_target() {
    let mut rng = seeded(8);
    let min = CriticPair::new(1, 1, &[8], Aggregation::Min, &mut rng).unwrap();
    let mean = CriticPair { aggregation: Aggregation::Mean, ..min.clone() };
    let s = normal_matrix(&mut rng, 50, 1);
    let a = normal_matrix(&mut rng, 50, 1);
    let lo = min.target_value(&s, &a).unwrap();
    let hi = mean.target_value(&s, &a).unwrap();
    assert!(lo.iter().zip(&hi).all(|(l, h)| l <= h));
    assert!(lo.iter().zip(&hi).any(|(l, h)| l < h));
}

#[test]
fn batch_adaptive_threshold_zeroes_dataset_actions() {
    let mut rng = seeded(2);
    let col: Vec<f64> = (0..40).map(|_| rng.random_range(-6.0..2.0)).collect();
    let eps = epsilon_threshold(EpsScheme::BatchAdaptive, Some(&col), Some(&col)).unwrap();
    assert!(col.iter().zip(&eps).all(|(b, e)| penalty_weight(*b, *e) == 0.0));
}

fn finetune_setup(n: usize, cfg: &FacConfig) -> (OfflineRun, OfflineDataset) {
    let data = bandit_dataset(n, 1).unwrap();
    let run = train_offline(&data, cfg, &mut seeded(3)).unwrap();
    (run, data)
}

#[test]
fn replay_grows_by_collected_transitions() {
    let cfg = tiny_cfg();
    let (run, data) = finetune_setup(100, &cfg);
    let online = OnlineConfig { steps: 12, env_steps: 7 };
    let out = train_online_finetune(run.agent, run.proxy, &mut BanditEnv::default(), data.clone(), &cfg, &online, &mut seeded(4)).unwrap();
    assert_eq!(out.collected, 7);
    assert_eq!(out.replay.len(), data.len() + 7);
    assert!(!out.replay.has_densities());
    for t in &out.replay.records()[data.len()..] {
        assert_eq!(t.state, BANDIT_STATE.to_vec());
        assert!(t.action[0].abs() <= 1.0 && t.terminal);
    }
    assert_eq!(out.metrics.iter().map(|m| m.step).collect::<Vec<_>>(), vec![5, 10, 12]);
}

#[test]
fn zero_env_budget_keeps_replay_fixed() {
    let cfg = tiny_cfg();
    let (run, data) = finetune_setup(100, &cfg);
    let online = OnlineConfig { steps: 6, env_steps: 0 };
    let out = train_online_finetune(run.agent, run.proxy, &mut BanditEnv::default(), data.clone(), &cfg, &online, &mut seeded(4)).unwrap();
    assert_eq!(out.collected, 0);
    assert_eq!(out.replay.records().len(), data.len());
    for (a, b) in out.replay.records().iter().zip(data.records()) {
        assert_eq!((&a.state, &a.action, a.reward), (&b.state, &b.action, b.reward));
    }
}

#[test]
fn offline_metrics_are_monotone_and_finite() {
    let cfg = tiny_cfg();
    let data = bandit_dataset(100, 2).unwrap();
    let run = train_offline(&data, &cfg, &mut seeded(1)).unwrap();
    let steps: Vec<usize> = run.metrics.iter().map(|m| m.step).collect();
    assert_eq!(steps, vec![5, 10, 15]);
    assert!(run.metrics.iter().all(|m| m.critic_loss.is_finite() && m.actor_loss.is_finite() && (0.0..=1.0).contains(&m.mean_w)));
    assert_eq!(run.data.log_densities().unwrap().len(), data.len());
    assert!(bandit_true_q(-0.5) > bandit_true_q(0.5));
}
