mod common;

use common::fd_relative_error;
use fac_core::baselines::*;
use fac_core::bczoo::{BcConfig, GaussianBc};
use fac_core::experiments::bandit::bandit_dataset;
use fac_core::fac::{Aggregation, CriticPair};
use fac_core::rng::{normal_matrix, seeded};
use fac_core::Tensor;
use rand::Rng;

fn uniform(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::matrix(n, 1, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn normal_logpdf(x: f64, m: f64, sd: f64) -> f64 {
    -0.5 * ((x - m) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[test]
fn cql_critic_gradient_matches_finite_differences() {
    let mut rng = seeded(1);
    let critics = CriticPair::new(1, 1, &[12, 12], Aggregation::Min, &mut rng).unwrap();
    let s = normal_matrix(&mut rng, 10, 1);
    let (a, pa) = (uniform(&mut rng, 10), uniform(&mut rng, 10));
    let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let alpha = 0.4;
    let (_, g) = cql_critic_loss_grad(&critics, &s, &a, &pa, &y, alpha).unwrap();
    for i in 0..2 {
        let err = fd_relative_error(&critics.online[i], &g[i], |net| {
            let mut c = critics.clone();
            c.online[i] = net.clone();
            let q = c.q(i, &s, &a).unwrap();
            let qp = c.q(i, &s, &pa).unwrap();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let td: Vec<f64> = q.iter().zip(&y).map(|(q, y)| (q - y).powi(2)).collect();
            alpha * (mean(&qp) - mean(&q)) + mean(&td)
        });
        assert!(err < 1e-4, "critic {i}: {err:e}");
    }
}

#[test]
fn svr_critic_gradient_matches_finite_differences() {
    let mut rng = seeded(2);
    let critics = CriticPair::new(1, 1, &[12, 12], Aggregation::Min, &mut rng).unwrap();
    let s = normal_matrix(&mut rng, 10, 1);
    let (a, za) = (uniform(&mut rng, 10), uniform(&mut rng, 10));
    let ratios: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..3.0)).collect();
    let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (q_min, alpha) = (-1.5, 0.6);
    let (_, g) = svr_critic_loss_grad(&critics, &s, &a, &za, &ratios, &y, q_min, alpha, 1e4).unwrap();
    for i in 0..2 {
        let err = fd_relative_error(&critics.online[i], &g[i], |net| {
            let mut c = critics.clone();
            c.online[i] = net.clone();
            let q = c.q(i, &s, &a).unwrap();
            let qz = c.q(i, &s, &za).unwrap();
            let n = 10.0;
            let ez = qz.iter().map(|v| (v - q_min).powi(2)).sum::<f64>() / n;
            let ed = q.iter().zip(&ratios).map(|(v, r)| r * (v - q_min).powi(2)).sum::<f64>() / n;
            let td = q.iter().zip(&y).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / n;
            alpha * (ez - ed) + td
        });
        assert!(err < 1e-4, "critic {i}: {err:e}");
    }
}

#[test]
fn importance_ratio_is_widened_policy_over_proxy() {
    let mut rng = seeded(3);
    let actor = GaussianActor::new(1, 1, &[8], &mut rng).unwrap();
    let proxy = GaussianBc::new(1, 1, &[8], &mut rng).unwrap();
    let s = normal_matrix(&mut rng, 20, 1);
    let a = uniform(&mut rng, 20);
    let k = 2.5;
    let got = is_log_ratios(&actor, &proxy, &s, &a, k).unwrap();
    let (m, l) = actor.params_at(&s).unwrap();
    let (pm, pl) = proxy.params_at(&s).unwrap();
    for r in 0..20 {
        let x = a.values()[r];
        let want = normal_logpdf(x, m.values()[r], k * l.values()[r].exp()) - normal_logpdf(x, pm.values()[r], pl.values()[r].exp());
        assert!((got[r] - want).abs() < 1e-10);
    }
}

#[test]
fn short_baseline_runs_stay_finite() {
    let data = bandit_dataset(150, 0).unwrap();
    let cql = CqlConfig { steps: 20, batch_size: 16, actor_hidden: vec![8], critic_hidden: vec![8], log_every: 10, ..CqlConfig::default() };
    let run = train_cql(&data, &cql, &mut seeded(0)).unwrap();
    assert_eq!(run.metrics.len(), 2);
    assert!(run.metrics.iter().all(|m| m.critic_loss.is_finite() && m.actor_loss.is_finite()));

    let svr = SvrConfig {
        steps: 20,
        batch_size: 16,
        actor_hidden: vec![8],
        critic_hidden: vec![8],
        proxy: BcConfig { hidden: vec![8], train_steps: 20, batch_size: 16, lr: 1e-3 },
        log_every: 10,
        ..SvrConfig::default()
    };
    let run = train_svr(&data, &svr, &mut seeded(0)).unwrap();
    let rmin = data.records().iter().map(|t| t.reward).fold(f64::INFINITY, f64::min);
    assert_eq!(run.q_min, rmin);
    assert!(run.is_ratio_max.is_finite() && run.is_ratio_max > 0.0);
    assert!(run.metrics.iter().all(|m| (0.0..=1.0).contains(&m.clipped_frac)));
}

