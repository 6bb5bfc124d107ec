use rand::Rng;

use super::{BcConfig, ACTION_BOUND, HALF_LN_2PI};
use crate::envs::OfflineDataset;
use crate::error::{ensure, Error, Result};
use crate::nn::{Mlp, Tape, Tensor, Trainable};
use crate::rng::{batch_indices, normal_matrix};

pub const DDPM_BETA_MIN: f64 = 0.1;
pub const DDPM_BETA_MAX: f64 = 10.0;
/// Noise trajectories averaged by [`ddpm_elbo`].
pub const DDPM_ELBO_DRAWS: usize = 10;

/// Variance-preserving schedule. Index `t - 1` holds step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DdpmSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior variance; zero at `t = 1`.
    pub beta_tilde: Vec<f64>,
}

impl DdpmSchedule {
    pub fn new(n: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        ensure!(n >= 1, Config, "diffusion needs at least one step");
        ensure!(beta_min > 0.0 && beta_max >= beta_min, Config, "need 0 < beta_min <= beta_max");
        let nf = n as f64;
        let beta: Vec<f64> = (1..=n)
            .map(|t| 1.0 - (-beta_min / nf - (beta_max - beta_min) * (2.0 * t as f64 - 1.0) / (2.0 * nf * nf)).exp())
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..n)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar, beta_tilde })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }
}

/// Epsilon-prediction network over `[s, a_t, t / N]`.
#[derive(Clone, Debug)]
pub struct DdpmBc {
    pub net: Mlp,
    pub schedule: DdpmSchedule,
    d_s: usize,
    d_a: usize,
}

impl DdpmBc {
    pub fn new<R: Rng + ?Sized>(d_s: usize, d_a: usize, hidden: &[usize], steps: usize, rng: &mut R) -> Result<Self> {
        let schedule = DdpmSchedule::new(steps, DDPM_BETA_MIN, DDPM_BETA_MAX)?;
        Ok(Self { net: Mlp::with_hidden(d_s + d_a + 1, hidden, d_a, false, rng)?, schedule, d_s, d_a })
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    fn check(&self, s: &Tensor, a: &Tensor) -> Result<()> {
        ensure!(s.cols() == self.d_s && a.cols() == self.d_a, Dimension, "diffusion input widths ({}, {})", s.cols(), a.cols());
        ensure!(s.rows() == a.rows(), Dimension, "state/action row mismatch");
        Ok(())
    }

    fn time_col(&self, ts: impl Iterator<Item = usize>) -> Tensor {
        let v: Vec<f64> = ts.map(|t| t as f64 / self.steps() as f64).collect();
        Tensor::matrix(v.len(), 1, v)
    }

    pub fn predict_eps(&self, s: &Tensor, x: &Tensor, t: usize) -> Result<Tensor> {
        self.check(s, x)?;
        let tc = self.time_col(std::iter::repeat_n(t, x.rows()));
        self.net.forward(&Tensor::concat_cols(&[s, x, &tc]))
    }

    /// `mu_theta(s, x_t, t) = (x_t - beta_t / sqrt(1 - abar_t) eps_theta) / sqrt(alpha_t)`.
    pub fn model_mean(&self, s: &Tensor, x: &Tensor, t: usize) -> Result<Tensor> {
        let eps = self.predict_eps(s, x, t)?;
        let sc = &self.schedule;
        let (b, a, ab) = (sc.beta[t - 1], sc.alpha[t - 1], sc.alpha_bar[t - 1]);
        let k = b / (1.0 - ab).sqrt();
        Ok(x.zip_map(&eps, |xi, ei| (xi - k * ei) / a.sqrt()))
    }
}

/// Per-row step indices in `1..=N` and the matching Gaussian noise.
#[derive(Clone, Debug)]
pub struct DdpmNoise {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl DdpmNoise {
    pub fn sample<R: Rng + ?Sized>(model: &DdpmBc, n: usize, rng: &mut R) -> Self {
        let t = (0..n).map(|_| rng.random_range(1..=model.steps())).collect();
        Self { t, eps: normal_matrix(rng, n, model.d_a) }
    }
}

/// Mean over rows of `||eps - eps_theta(sqrt(abar_t) a + sqrt(1 - abar_t) eps, s, t)||^2`.
pub fn ddpm_loss_grad(model: &DdpmBc, states: &Tensor, actions: &Tensor, noise: &DdpmNoise) -> Result<(f64, Vec<Tensor>)> {
    model.check(states, actions)?;
    ensure!(actions.rows() > 0, Contract, "empty batch");
    ensure!(noise.eps.same_shape(actions) && noise.t.len() == actions.rows(), Dimension, "noise shape");
    ensure!(noise.t.iter().all(|&t| (1..=model.steps()).contains(&t)), Contract, "diffusion step out of range");
    let mut xt = actions.clone();
    for r in 0..actions.rows() {
        let ab = model.schedule.alpha_bar[noise.t[r] - 1];
        for c in 0..actions.cols() {
            xt.set(r, c, ab.sqrt() * actions.at(r, c) + (1.0 - ab).sqrt() * noise.eps.at(r, c));
        }
    }
    let tc = model.time_col(noise.t.iter().copied());
    let mut tape = Tape::new();
    let p = model.net.bind(&mut tape);
    let x = tape.leaf(Tensor::concat_cols(&[states, &xt, &tc]));
    let pred = model.net.forward_tape(&mut tape, &p, x)?;
    let e = tape.leaf(noise.eps.clone());
    let d = tape.sub(e, pred);
    let sq = tape.square(d);
    let rs = tape.row_sum(sq);
    let loss = tape.mean(rs);
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), g.wrt_all(&p)))
}

pub fn ddpm_loss<R: Rng + ?Sized>(model: &DdpmBc, states: &Tensor, actions: &Tensor, rng: &mut R) -> Result<f64> {
    let noise = DdpmNoise::sample(model, actions.rows(), rng);
    Ok(ddpm_loss_grad(model, states, actions, &noise)?.0)
}

/// Runs the reverse chain from `a_T`. Noise `sqrt(beta_t) eps` is injected at
/// every step except `t = 1` when `inject_noise` is set.
pub fn ddpm_sample_from<R: Rng + ?Sized>(model: &DdpmBc, states: &Tensor, a_t: &Tensor, inject_noise: bool, rng: &mut R) -> Result<Tensor> {
    model.check(states, a_t)?;
    let sc = &model.schedule;
    let mut x = a_t.clone();
    for t in (1..=model.steps()).rev() {
        let eps = model.predict_eps(states, &x, t)?;
        let (b, a, ab) = (sc.beta[t - 1], sc.alpha[t - 1], sc.alpha_bar[t - 1]);
        let k = b / (a * (1.0 - ab)).sqrt();
        x = x.zip_map(&eps, |xi, ei| xi / a.sqrt() - k * ei);
        if inject_noise && t > 1 {
            let z = normal_matrix(rng, x.rows(), x.cols());
            x = x.zip_map(&z, |xi, zi| xi + b.sqrt() * zi);
        }
    }
    Ok(x.map(|v| v.clamp(-ACTION_BOUND, ACTION_BOUND)))
}

pub fn ddpm_sample<R: Rng + ?Sized>(model: &DdpmBc, states: &Tensor, rng: &mut R) -> Result<Tensor> {
    let a_t = normal_matrix(rng, states.rows(), model.d_a);
    ddpm_sample_from(model, states, &a_t, true, rng)
}

/// Variational bound averaged over `draws` forward trajectories, per row.
///
/// The decoder term at `t = 1` uses variance `beta_1`, since the posterior
/// variance vanishes there.
pub fn ddpm_elbo<R: Rng + ?Sized>(model: &DdpmBc, states: &Tensor, actions: &Tensor, draws: usize, rng: &mut R) -> Result<Vec<f64>> {
    model.check(states, actions)?;
    ensure!(draws >= 1, Contract, "ELBO needs at least one trajectory");
    let sc = &model.schedule;
    let (n, d) = (actions.rows(), model.d_a);
    let nsteps = model.steps();
    let ab_t = sc.alpha_bar[nsteps - 1];
    let mut total = vec![0.0; n];
    for _ in 0..draws {
        let mut traj = Vec::with_capacity(nsteps);
        let mut x = actions.clone();
        for t in 1..=nsteps {
            let z = normal_matrix(rng, n, d);
            let (a, b) = (sc.alpha[t - 1], sc.beta[t - 1]);
            x = x.zip_map(&z, |xi, zi| a.sqrt() * xi + b.sqrt() * zi);
            traj.push(x.clone());
        }
        // t = 1 reconstruction.
        let var1 = sc.beta[0];
        let mu1 = model.model_mean(states, &traj[0], 1)?;
        for r in 0..n {
            let sq: f64 = actions.row_slice(r).iter().zip(mu1.row_slice(r)).map(|(a, m)| (a - m).powi(2)).sum();
            total[r] += -(d as f64) * (HALF_LN_2PI + 0.5 * var1.ln()) - sq / (2.0 * var1);
        }
        for t in 2..=nsteps {
            let (b, a, ab, abp, bt) = (sc.beta[t - 1], sc.alpha[t - 1], sc.alpha_bar[t - 1], sc.alpha_bar_prev(t), sc.beta_tilde[t - 1]);
            let c0 = abp.sqrt() * b / (1.0 - ab);
            let ct = a.sqrt() * (1.0 - abp) / (1.0 - ab);
            let xt = &traj[t - 1];
            let mu = model.model_mean(states, xt, t)?;
            for r in 0..n {
                let sq: f64 = (0..d)
                    .map(|c| {
                        let post = c0 * actions.at(r, c) + ct * xt.at(r, c);
                        (post - mu.at(r, c)).powi(2)
                    })
                    .sum();
                total[r] -= sq / (2.0 * bt);
            }
        }
        for (r, acc) in total.iter_mut().enumerate() {
            let a2: f64 = actions.row_slice(r).iter().map(|v| v * v).sum();
            *acc -= 0.5 * (ab_t * a2 - d as f64 * (ab_t + (1.0 - ab_t).ln()));
        }
    }
    Ok(total.into_iter().map(|v| v / draws as f64).collect())
}

pub fn ddpm_fit<R: Rng + ?Sized>(data: &OfflineDataset, steps: usize, cfg: &BcConfig, rng: &mut R) -> Result<(DdpmBc, Vec<f64>)> {
    let mut model = DdpmBc::new(data.d_s(), data.d_a(), &cfg.hidden, steps, rng)?;
    let mut tr = Trainable::new(model.net.clone(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.train_steps);
    for _ in 0..cfg.train_steps {
        let b = data.batch(&batch_indices(rng, data.len(), cfg.batch_size));
        model.net = tr.net.clone();
        let noise = DdpmNoise::sample(&model, b.actions.rows(), rng);
        let (loss, g) = ddpm_loss_grad(&model, &b.states, &b.actions, &noise)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("diffusion loss became {loss}")));
        }
        tr.apply(&g)?;
        trace.push(loss);
    }
    model.net = tr.net;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_model(d_s: usize, d_a: usize, steps: usize) -> DdpmBc {
        let mut rng = seeded(0);
        let mut m = DdpmBc::new(d_s, d_a, &[8], steps, &mut rng).unwrap();
        for p in m.net.params_mut() {
            *p = p.map(|_| 0.0);
        }
        m
    }

    #[test]
    fn schedule_invariants() {
        for n in [1, 5, 10, 50] {
            let s = DdpmSchedule::new(n, DDPM_BETA_MIN, DDPM_BETA_MAX).unwrap();
            let mut prod = 1.0;
            for t in 0..n {
                assert!(s.beta[t] > 0.0 && s.beta[t] < 1.0);
                prod *= s.alpha[t];
                assert!((s.alpha_bar[t] - prod).abs() < 1e-12);
                if t > 0 {
                    assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
                    assert_eq!(s.beta_tilde[t], (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t]);
                }
            }
            assert_eq!(s.beta_tilde[0], 0.0);
        }
        // beta_1 for N = 10 from the closed form.
        let s = DdpmSchedule::new(10, 0.1, 10.0).unwrap();
        assert!((s.beta[0] - (1.0 - (-0.01f64 - 9.9 / 200.0).exp())).abs() < 1e-15);
    }

    #[test]
    fn zero_predictor_shrinks_geometrically() {
        let m = zero_model(1, 2, 7);
        let mut rng = seeded(1);
        let s = normal_matrix(&mut rng, 3, 1);
        let a_t = normal_matrix(&mut rng, 3, 2).map(|v| v * 0.01);
        let out = ddpm_sample_from(&m, &s, &a_t, false, &mut rng).unwrap();
        let k: f64 = m.schedule.alpha.iter().map(|a| 1.0 / a.sqrt()).product();
        for (o, x) in out.values().iter().zip(a_t.values()) {
            assert!((o - (x * k).clamp(-1.0, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        // With a = 0 the noised input is sqrt(1 - abar) eps; at N = 1 a
        // linear head can recover eps exactly.
        let mut rng = seeded(2);
        let mut m = DdpmBc::new(1, 1, &[], 1, &mut rng).unwrap();
        let ab: f64 = m.schedule.alpha_bar[0];
        // input = [s, x, t/N]; eps = x / sqrt(1 - abar).
        m.net.set_params(vec![Tensor::matrix(3, 1, vec![0.0, 1.0 / (1.0 - ab).sqrt(), 0.0]), Tensor::matrix(1, 1, vec![0.0])]).unwrap();
        let s = normal_matrix(&mut rng, 4, 1);
        let a = Tensor::zeros(&[4, 1]);
        let noise = DdpmNoise::sample(&m, 4, &mut rng);
        assert!(ddpm_loss_grad(&m, &s, &a, &noise).unwrap().0 < 1e-24);
    }

    #[test]
    fn loss_matches_recomputation() {
        let mut rng = seeded(3);
        let m = DdpmBc::new(2, 2, &[6], 10, &mut rng).unwrap();
        let s = normal_matrix(&mut rng, 5, 2);
        let a = normal_matrix(&mut rng, 5, 2);
        let noise = DdpmNoise::sample(&m, 5, &mut rng);
        let got = ddpm_loss_grad(&m, &s, &a, &noise).unwrap().0;
        let mut want = 0.0;
        for r in 0..5 {
            let t = noise.t[r];
            let ab = m.schedule.alpha_bar[t - 1];
            let x: Vec<f64> = (0..2).map(|c| ab.sqrt() * a.at(r, c) + (1.0 - ab).sqrt() * noise.eps.at(r, c)).collect();
            let e = m.predict_eps(&s.gather_rows(&[r]), &Tensor::matrix(1, 2, x), t).unwrap();
            want += (0..2).map(|c| (noise.eps.at(r, c) - e.at(0, c)).powi(2)).sum::<f64>();
        }
        assert!((got - want / 5.0).abs() < 1e-12);
    }

    #[test]
    fn prior_term_vanishes_as_signal_is_destroyed() {
        // The endpoint keeps abar_T = exp(-(beta_min + beta_max) / 2) of the
        // signal whatever N is; a large beta_max sends it to zero.
        let prior = |ab: f64, a2: f64, d: f64| 0.5 * (ab * a2 - d * (ab + (1.0 - ab).ln()));
        let base = DdpmSchedule::new(50, DDPM_BETA_MIN, DDPM_BETA_MAX).unwrap();
        let ab = *base.alpha_bar.last().unwrap();
        assert!((ab - (-(DDPM_BETA_MIN + DDPM_BETA_MAX) / 2.0f64).exp()).abs() < 1e-12);
        // Same quantity from the general Gaussian KL with variance 1 - abar.
        let (m2, v) = (ab * 0.5, 1.0 - ab);
        let kl = 0.5 * (2.0 * v + m2 - 2.0 - 2.0 * v.ln());
        assert!((prior(ab, 0.5, 2.0) - kl).abs() < 1e-14);
        let hot = DdpmSchedule::new(50, DDPM_BETA_MIN, 60.0).unwrap();
        assert!(prior(*hot.alpha_bar.last().unwrap(), 0.5, 2.0).abs() < 1e-12);
    }
}
