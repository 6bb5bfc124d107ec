//! Non-flow behavior-cloning models used as comparison points for the flow
//! proxy: a state-conditioned diagonal Gaussian, a conditional VAE and an
//! epsilon-prediction diffusion model.

mod cvae;
mod ddpm;
mod gaussian;

pub use cvae::{cvae_elbo, cvae_fit, cvae_loss, cvae_loss_grad, cvae_sample, gaussian_kl, CvaeBc, CvaeNoise, CVAE_ELBO_SAMPLES};
pub use ddpm::{
    ddpm_elbo, ddpm_fit, ddpm_loss, ddpm_loss_grad, ddpm_sample, ddpm_sample_from, DdpmBc, DdpmNoise, DdpmSchedule,
    DDPM_BETA_MAX, DDPM_BETA_MIN, DDPM_ELBO_DRAWS,
};
pub use gaussian::{gaussian_fit, gaussian_logpdf, gaussian_nll_grad, gaussian_sample, GaussianBc};

use serde::{Deserialize, Serialize};

use crate::nn::{Tape, Var, DEFAULT_LR};

/// Floor applied to every predicted log standard deviation.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Samplers clamp their output to `[-ACTION_BOUND, ACTION_BOUND]`.
pub const ACTION_BOUND: f64 = 1.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256], train_steps: 10_000, batch_size: 256, lr: DEFAULT_LR }
    }
}

/// Per-row `log N(x; mean, diag(exp(logstd))^2)` as an `n x 1` node.
pub(crate) fn record_diag_logpdf(tape: &mut Tape, x: Var, mean: Var, logstd: Var) -> Var {
    let d = tape.value(x).cols() as f64;
    let diff = tape.sub(x, mean);
    let sq = tape.square(diff);
    let m2 = tape.scale(logstd, -2.0);
    let inv_var = tape.exp(m2);
    let z = tape.mul(sq, inv_var);
    let quad = tape.row_sum(z);
    let half = tape.scale(quad, -0.5);
    let ls = tape.row_sum(logstd);
    let out = tape.sub(half, ls);
    tape.add_scalar(out, -d * HALF_LN_2PI)
}

/// Splits a `2 d` network head into a mean and a clamped log-std.
pub(crate) fn split_head(tape: &mut Tape, head: Var, d: usize) -> (Var, Var) {
    let mean = tape.slice_cols(head, 0, d);
    let raw = tape.slice_cols(head, d, 2 * d);
    (mean, tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX))
}

/// Diagonal-Gaussian log-density of one row.
pub fn diag_logpdf_row(x: &[f64], mean: &[f64], logstd: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(logstd)
        .map(|((x, m), l)| -0.5 * ((x - m) * (-l).exp()).powi(2) - l - HALF_LN_2PI)
        .sum()
}
