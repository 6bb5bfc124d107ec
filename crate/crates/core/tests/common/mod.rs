//! Central finite-difference gradient checks shared by the gradient tests
//! and the acceptance harness.
#![allow(dead_code)]

use fac_core::bczoo::{cvae_loss, cvae_loss_grad, ddpm_loss_grad, gaussian_logpdf, gaussian_nll_grad, CvaeBc, CvaeNoise, DdpmBc, DdpmNoise, GaussianBc};
use fac_core::fac::{actor_loss_grad, critic_loss_grad, Aggregation, CriticPair, CriticTargets, OneStepActor};
use fac_core::flowmatch::{fm_loss, fm_loss_grad, FmNoise, VelocityProxy};
use fac_core::rng::{normal_matrix, seeded};
use fac_core::{Mlp, Tensor};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
pub const WIDTH: usize = 16;

/// `||g - g_fd|| / max(||g||, ||g_fd||)` over all parameters of `net`,
/// where `loss` re-evaluates the objective for a perturbed copy.
pub fn fd_relative_error(net: &Mlp, analytic: &[Tensor], loss: impl Fn(&Mlp) -> f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nf = 0.0;
    for (k, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = net.clone();
            plus.params_mut()[k].values_mut()[j] += FD_STEP;
            let mut minus = net.clone();
            minus.params_mut()[k].values_mut()[j] -= FD_STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            let a = g.values()[j];
            diff += (a - fd).powi(2);
            na += a * a;
            nf += fd * fd;
        }
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-300)
}

fn uniform(rng: &mut impl Rng, n: usize, d: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(lo..hi)).collect())
}

pub fn fm_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let proxy = VelocityProxy::new(2, 2, &[WIDTH, WIDTH], 10, &mut rng).unwrap();
    let s = normal_matrix(&mut rng, 8, 2);
    let a = uniform(&mut rng, 8, 2, -1.0, 1.0);
    let noise = FmNoise::sample(&mut rng, 8, 2);
    let (_, g) = fm_loss_grad(&proxy, &s, &a, &noise).unwrap();
    fd_relative_error(&proxy.net, &g, |net| {
        let p = VelocityProxy::from_net(net.clone(), 2, 2, 10).unwrap();
        fm_loss(&p, &s, &a, &noise).unwrap()
    })
}

/// Both critics, with the density-weighted penalty active.
pub fn critic_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let critics = CriticPair::new(2, 2, &[WIDTH, WIDTH], Aggregation::Min, &mut rng).unwrap();
    let n = 8;
    let s = normal_matrix(&mut rng, n, 2);
    let a = uniform(&mut rng, n, 2, -1.0, 1.0);
    let t = CriticTargets {
        penalty_actions: uniform(&mut rng, n, 2, -1.0, 1.0),
        weights: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        targets: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let alpha = 0.7;
    let (_, g) = critic_loss_grad(&critics, &s, &a, &t, alpha).unwrap();
    // Each critic's parameters only enter its own term.
    (0..2)
        .map(|i| {
            fd_relative_error(&critics.online[i], &g[i], |net| {
                let mut c = critics.clone();
                c.online[i] = net.clone();
                let q = c.q(i, &s, &a).unwrap();
                let qp = c.q(i, &s, &t.penalty_actions).unwrap();
                let td = q.iter().zip(&t.targets).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / n as f64;
                let pen = qp.iter().zip(&t.weights).map(|(q, w)| w * q).sum::<f64>() / n as f64;
                alpha * pen + td
            })
        })
        .fold(0.0, f64::max)
}

pub fn actor_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let actor = OneStepActor::new(2, 2, &[WIDTH, WIDTH], &mut rng).unwrap();
    let critics = CriticPair::new(2, 2, &[WIDTH, WIDTH], Aggregation::Mean, &mut rng).unwrap();
    let n = 8;
    let s = normal_matrix(&mut rng, n, 2);
    let z = normal_matrix(&mut rng, n, 2);
    let pa = uniform(&mut rng, n, 2, -1.0, 1.0);
    let (lambda, scale) = (0.3, 0.8);
    let (_, g, _) = actor_loss_grad(&actor, &critics, &s, &z, &pa, lambda, true, Some(scale)).unwrap();
    fd_relative_error(&actor.net, &g, |net| {
        let act = OneStepActor::from_net(net.clone(), 2).unwrap();
        let raw = act.act_raw(&s, &z).unwrap();
        let clipped = raw.map(|v| v.clamp(-1.0, 1.0));
        let q = critics.q_mean(&s, &clipped).unwrap();
        let distill = (0..n).map(|r| raw.row_slice(r).iter().zip(pa.row_slice(r)).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).sum::<f64>() / n as f64;
        -scale * q.iter().sum::<f64>() / n as f64 + lambda * distill
    })
}

pub fn gaussian_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let model = GaussianBc::new(2, 2, &[WIDTH, WIDTH], &mut rng).unwrap();
    let s = normal_matrix(&mut rng, 8, 2);
    let a = uniform(&mut rng, 8, 2, -1.0, 1.0);
    let (_, g) = gaussian_nll_grad(&model, &s, &a).unwrap();
    fd_relative_error(&model.net, &g, |net| {
        let m = GaussianBc::from_net(net.clone()).unwrap();
        -gaussian_logpdf(&m, &s, &a).unwrap().iter().sum::<f64>() / 8.0
    })
}

/// Encoder and decoder, fixed reparameterisation noise.
pub fn cvae_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let model = CvaeBc::new(2, 2, &[WIDTH, WIDTH], &mut rng).unwrap();
    let s = normal_matrix(&mut rng, 8, 2);
    let a = uniform(&mut rng, 8, 2, -1.0, 1.0);
    let noise = CvaeNoise::sample(&model, 8, &mut rng);
    let (_, ge, gd) = cvae_loss_grad(&model, &s, &a, &noise).unwrap();
    let enc = fd_relative_error(&model.encoder, &ge, |net| {
        let mut m = model.clone();
        m.encoder = net.clone();
        cvae_loss(&m, &s, &a, &noise).unwrap()
    });
    let dec = fd_relative_error(&model.decoder, &gd, |net| {
        let mut m = model.clone();
        m.decoder = net.clone();
        cvae_loss(&m, &s, &a, &noise).unwrap()
    });
    enc.max(dec)
}

/// The noise-prediction loss, recomputed from `predict_eps` for the oracle.
pub fn ddpm_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let model = DdpmBc::new(2, 2, &[WIDTH, WIDTH], 20, &mut rng).unwrap();
    let n = 8;
    let s = normal_matrix(&mut rng, n, 2);
    let a = uniform(&mut rng, n, 2, -1.0, 1.0);
    let noise = DdpmNoise::sample(&model, n, &mut rng);
    let (_, g) = ddpm_loss_grad(&model, &s, &a, &noise).unwrap();
    fd_relative_error(&model.net, &g, |net| {
        let mut m = model.clone();
        m.net = net.clone();
        let mut total = 0.0;
        for r in 0..n {
            let t = noise.t[r];
            let ab = m.schedule.alpha_bar[t - 1];
            let e = noise.eps.row_slice(r);
            let x: Vec<f64> = a.row_slice(r).iter().zip(e).map(|(ai, ei)| ab.sqrt() * ai + (1.0 - ab).sqrt() * ei).collect();
            let pred = m.predict_eps(&Tensor::matrix(1, 2, s.row_slice(r).to_vec()), &Tensor::matrix(1, 2, x), t).unwrap();
            total += pred.values().iter().zip(e).map(|(p, ei)| (ei - p).powi(2)).sum::<f64>();
        }
        total / n as f64
    })
}

/// Every loss with its worst relative error over a few seeds.
pub fn all_gradient_errors() -> Vec<(&'static str, f64)> {
    let checks: [(&str, fn(u64) -> f64); 6] = [
        ("flow-matching", fm_error),
        ("critic", critic_error),
        ("actor", actor_error),
        ("gaussian-mle", gaussian_error),
        ("cvae-elbo", cvae_error),
        ("ddpm", ddpm_error),
    ];
    checks.iter().map(|(name, f)| (*name, (0..3).map(f).fold(0.0, f64::max))).collect()
}

