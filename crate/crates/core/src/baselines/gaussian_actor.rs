use std::f64::consts::PI;

use rand::Rng;

use crate::error::{ensure, Result};
use crate::fac::ACTION_LIMIT;
use crate::nn::{Mlp, Tape, Tensor, Var};
use crate::rng::normal_matrix;

/// Keeps the policy standard deviation at or above 0.01.
pub const LOG_STD_FLOOR: f64 = -4.605_170_185_988_091;
const LOG_STD_CEIL: f64 = 2.0;

/// Reparameterised diagonal Gaussian policy `a = mu(s) + sigma(s) * eps`.
#[derive(Clone, Debug)]
pub struct GaussianActor {
    pub net: Mlp,
    d_a: usize,
}

/// Tape handles for one reparameterised draw.
pub struct GaussianDraw {
    pub mean: Var,
    pub log_std: Var,
    /// Unclamped sample.
    pub raw: Var,
    /// Sample clamped to the action box.
    pub action: Var,
    /// `n x 1` log-density of the unclamped sample.
    pub log_prob: Var,
}

impl GaussianActor {
    pub fn new<R: Rng + ?Sized>(d_s: usize, d_a: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Self { net: Mlp::with_hidden(d_s, hidden, 2 * d_a, false, rng)?, d_a })
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    /// Mean and clamped log-std per row.
    pub fn params_at(&self, s: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.net.forward(s)?;
        Ok((h.slice_cols(0, self.d_a), h.slice_cols(self.d_a, 2 * self.d_a).map(|v| v.clamp(LOG_STD_FLOOR, LOG_STD_CEIL))))
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &Tensor, rng: &mut R) -> Result<Tensor> {
        let (m, l) = self.params_at(s)?;
        let eps = normal_matrix(rng, m.rows(), self.d_a);
        let mut out = m;
        for (i, o) in out.values_mut().iter_mut().enumerate() {
            *o = (*o + l.values()[i].exp() * eps.values()[i]).clamp(-ACTION_LIMIT, ACTION_LIMIT);
        }
        Ok(out)
    }

    /// Records a reparameterised draw with noise `eps`.
    pub fn record(&self, tape: &mut Tape, params: &[Var], s: &Tensor, eps: &Tensor) -> Result<GaussianDraw> {
        ensure!(eps.cols() == self.d_a && eps.rows() == s.rows(), Dimension, "policy noise shape");
        let x = tape.leaf(s.clone());
        let h = self.net.forward_tape(tape, params, x)?;
        let mean = tape.slice_cols(h, 0, self.d_a);
        let ls_raw = tape.slice_cols(h, self.d_a, 2 * self.d_a);
        let log_std = tape.clamp(ls_raw, LOG_STD_FLOOR, LOG_STD_CEIL);
        let std = tape.exp(log_std);
        let e = tape.leaf(eps.clone());
        let se = tape.mul(std, e);
        let raw = tape.add(mean, se);
        let action = tape.clamp(raw, -ACTION_LIMIT, ACTION_LIMIT);
        // log N(raw; mean, std) = -eps^2/2 - log std - log(2 pi)/2, summed.
        let sum_ls = tape.row_sum(log_std);
        let neg = tape.scale(sum_ls, -1.0);
        let quad: Vec<f64> = (0..eps.rows()).map(|r| -0.5 * eps.row_slice(r).iter().map(|v| v * v).sum::<f64>()).collect();
        let q = tape.leaf(Tensor::matrix(eps.rows(), 1, quad));
        let lp = tape.add(neg, q);
        let log_prob = tape.add_scalar(lp, -0.5 * self.d_a as f64 * (2.0 * PI).ln());
        Ok(GaussianDraw { mean, log_std, raw, action, log_prob })
    }
}
