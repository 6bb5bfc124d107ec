use rand::Rng;

use super::{diag_logpdf_row, record_diag_logpdf, split_head, BcConfig, ACTION_BOUND, LOG_STD_MAX, LOG_STD_MIN};
use crate::envs::OfflineDataset;
use crate::error::{ensure, Error, Result};
use crate::nn::{AdamState, Mlp, Tape, Tensor, Var};
use crate::rng::{batch_indices, normal_matrix};

/// Latent draws averaged by [`cvae_elbo`] for the reconstruction term.
pub const CVAE_ELBO_SAMPLES: usize = 10;

/// Conditional VAE with Gaussian encoder `q(z | s, a)` and Gaussian decoder
/// `p(a | s, z)`; the prior is `N(0, I)`.
#[derive(Clone, Debug)]
pub struct CvaeBc {
    pub encoder: Mlp,
    pub decoder: Mlp,
    d_s: usize,
    d_a: usize,
    d_z: usize,
}

/// Reparameterisation noise for one loss evaluation.
#[derive(Clone, Debug)]
pub struct CvaeNoise {
    pub eps: Tensor,
}

impl CvaeNoise {
    pub fn sample<R: Rng + ?Sized>(model: &CvaeBc, n: usize, rng: &mut R) -> Self {
        Self { eps: normal_matrix(rng, n, model.d_z) }
    }
}

impl CvaeBc {
    /// Latent width defaults to `2 * d_a`.
    pub fn new<R: Rng + ?Sized>(d_s: usize, d_a: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Self::with_latent(d_s, d_a, 2 * d_a, hidden, rng)
    }

    pub fn with_latent<R: Rng + ?Sized>(d_s: usize, d_a: usize, d_z: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        ensure!(d_z >= 1, Config, "latent width must be positive");
        let encoder = Mlp::with_hidden(d_s + d_a, hidden, 2 * d_z, false, rng)?;
        let decoder = Mlp::with_hidden(d_s + d_z, hidden, 2 * d_a, false, rng)?;
        Ok(Self { encoder, decoder, d_s, d_a, d_z })
    }

    pub fn latent_dim(&self) -> usize {
        self.d_z
    }

    fn check(&self, s: &Tensor, a: &Tensor) -> Result<()> {
        ensure!(s.cols() == self.d_s && a.cols() == self.d_a, Dimension, "CVAE input widths ({}, {})", s.cols(), a.cols());
        ensure!(s.rows() == a.rows(), Dimension, "state/action row mismatch");
        Ok(())
    }

    fn encode(&self, s: &Tensor, a: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.encoder.forward(&Tensor::concat_cols(&[s, a]))?;
        Ok(split(&h, self.d_z))
    }

    fn decode(&self, s: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.decoder.forward(&Tensor::concat_cols(&[s, z]))?;
        Ok(split(&h, self.d_a))
    }
}

fn split(h: &Tensor, d: usize) -> (Tensor, Tensor) {
    (h.slice_cols(0, d), h.slice_cols(d, 2 * d).map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)))
}

/// `KL(N(mu, diag(sigma^2)) || N(0, I))` for one row.
pub fn gaussian_kl(mu: &[f64], logstd: &[f64]) -> f64 {
    mu.iter().zip(logstd).map(|(m, l)| 0.5 * ((2.0 * l).exp() + m * m - 1.0 - 2.0 * l)).sum()
}

fn record_loss(tape: &mut Tape, model: &CvaeBc, enc: &[Var], dec: &[Var], s: &Tensor, a: &Tensor, noise: &CvaeNoise) -> Result<Var> {
    let sv = tape.leaf(s.clone());
    let av = tape.leaf(a.clone());
    let ein = tape.concat_cols(&[sv, av]);
    let eh = model.encoder.forward_tape(tape, enc, ein)?;
    let (mu, ls) = split_head(tape, eh, model.d_z);
    let std = tape.exp(ls);
    let e = tape.leaf(noise.eps.clone());
    let se = tape.mul(std, e);
    let z = tape.add(mu, se);
    let din = tape.concat_cols(&[sv, z]);
    let dh = model.decoder.forward_tape(tape, dec, din)?;
    let (am, al) = split_head(tape, dh, model.d_a);
    let recon = record_diag_logpdf(tape, av, am, al);
    // KL = 0.5 * sum(exp(2 ls) + mu^2 - 1 - 2 ls)
    let ls2 = tape.scale(ls, 2.0);
    let var = tape.exp(ls2);
    let mu2 = tape.square(mu);
    let t = tape.add(var, mu2);
    let t = tape.sub(t, ls2);
    let t = tape.add_scalar(t, -1.0);
    let kl = tape.row_sum(t);
    let kl = tape.scale(kl, 0.5);
    let elbo = tape.sub(recon, kl);
    let m = tape.mean(elbo);
    Ok(tape.scale(m, -1.0))
}

/// Negative single-sample ELBO averaged over the batch.
pub fn cvae_loss(model: &CvaeBc, states: &Tensor, actions: &Tensor, noise: &CvaeNoise) -> Result<f64> {
    Ok(cvae_loss_grad(model, states, actions, noise)?.0)
}

/// Loss with gradients for the encoder then the decoder parameters.
pub fn cvae_loss_grad(model: &CvaeBc, states: &Tensor, actions: &Tensor, noise: &CvaeNoise) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    model.check(states, actions)?;
    ensure!(actions.rows() > 0, Contract, "empty batch");
    ensure!(noise.eps.rows() == actions.rows() && noise.eps.cols() == model.d_z, Dimension, "latent noise shape");
    let mut tape = Tape::new();
    let enc = model.encoder.bind(&mut tape);
    let dec = model.decoder.bind(&mut tape);
    let loss = record_loss(&mut tape, model, &enc, &dec, states, actions, noise)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), g.wrt_all(&enc), g.wrt_all(&dec)))
}

/// Decodes prior draws; the decoder mean is the action.
pub fn cvae_sample<R: Rng + ?Sized>(model: &CvaeBc, states: &Tensor, rng: &mut R) -> Result<Tensor> {
    ensure!(states.cols() == model.d_s, Dimension, "state width {}", states.cols());
    let z = normal_matrix(rng, states.rows(), model.d_z);
    let (m, _) = model.decode(states, &z)?;
    Ok(m.map(|v| v.clamp(-ACTION_BOUND, ACTION_BOUND)))
}

/// Monte-Carlo reconstruction term over `n_mc` posterior draws minus the
/// closed-form KL, per row.
pub fn cvae_elbo<R: Rng + ?Sized>(model: &CvaeBc, states: &Tensor, actions: &Tensor, n_mc: usize, rng: &mut R) -> Result<Vec<f64>> {
    model.check(states, actions)?;
    ensure!(n_mc >= 1, Contract, "ELBO needs at least one latent sample");
    let (mu, ls) = model.encode(states, actions)?;
    let n = actions.rows();
    let mut recon = vec![0.0; n];
    for _ in 0..n_mc {
        let eps = normal_matrix(rng, n, model.d_z);
        let mut z = mu.clone();
        for (i, zi) in z.values_mut().iter_mut().enumerate() {
            *zi += ls.values()[i].exp() * eps.values()[i];
        }
        let (am, al) = model.decode(states, &z)?;
        for (r, acc) in recon.iter_mut().enumerate() {
            *acc += diag_logpdf_row(actions.row_slice(r), am.row_slice(r), al.row_slice(r));
        }
    }
    Ok((0..n).map(|r| recon[r] / n_mc as f64 - gaussian_kl(mu.row_slice(r), ls.row_slice(r))).collect())
}

pub fn cvae_fit<R: Rng + ?Sized>(data: &OfflineDataset, cfg: &BcConfig, rng: &mut R) -> Result<(CvaeBc, Vec<f64>)> {
    let mut model = CvaeBc::new(data.d_s(), data.d_a(), &cfg.hidden, rng)?;
    let mut enc_opt = AdamState::new(model.encoder.params(), cfg.lr);
    let mut dec_opt = AdamState::new(model.decoder.params(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.train_steps);
    for _ in 0..cfg.train_steps {
        let b = data.batch(&batch_indices(rng, data.len(), cfg.batch_size));
        let noise = CvaeNoise::sample(&model, b.actions.rows(), rng);
        let (loss, ge, gd) = cvae_loss_grad(&model, &b.states, &b.actions, &noise)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("CVAE loss became {loss}")));
        }
        enc_opt.step(model.encoder.params_mut(), &ge)?;
        dec_opt.step(model.decoder.params_mut(), &gd)?;
        trace.push(loss);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn kl_closed_form() {
        assert_eq!(gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((gaussian_kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_elbo_pieces() {
        let mut rng = seeded(3);
        let m = CvaeBc::new(2, 2, &[8], &mut rng).unwrap();
        assert_eq!(m.latent_dim(), 4);
        let s = normal_matrix(&mut rng, 3, 2);
        let a = normal_matrix(&mut rng, 3, 2);
        let noise = CvaeNoise::sample(&m, 3, &mut rng);
        let loss = cvae_loss(&m, &s, &a, &noise).unwrap();
        let (mu, ls) = m.encode(&s, &a).unwrap();
        let mut z = mu.clone();
        for (i, zi) in z.values_mut().iter_mut().enumerate() {
            *zi += ls.values()[i].exp() * noise.eps.values()[i];
        }
        let (am, al) = m.decode(&s, &z).unwrap();
        let want: f64 = -(0..3)
            .map(|r| diag_logpdf_row(a.row_slice(r), am.row_slice(r), al.row_slice(r)) - gaussian_kl(mu.row_slice(r), ls.row_slice(r)))
            .sum::<f64>()
            / 3.0;
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }
}
