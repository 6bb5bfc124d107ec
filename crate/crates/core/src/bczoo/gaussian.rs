use rand::Rng;

use super::{diag_logpdf_row, record_diag_logpdf, split_head, BcConfig, ACTION_BOUND, LOG_STD_MAX, LOG_STD_MIN};
use crate::envs::OfflineDataset;
use crate::error::{ensure, Error, Result};
use crate::nn::{Mlp, Tape, Tensor, Trainable};
use crate::rng::{batch_indices, normal_matrix};

/// State-conditioned diagonal Gaussian: the network emits `[mean, log_std]`.
#[derive(Clone, Debug)]
pub struct GaussianBc {
    pub net: Mlp,
    d_a: usize,
}

impl GaussianBc {
    pub fn new<R: Rng + ?Sized>(d_s: usize, d_a: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Self { net: Mlp::with_hidden(d_s, hidden, 2 * d_a, false, rng)?, d_a })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        ensure!(net.out_dim() % 2 == 0, Dimension, "Gaussian head must have even width");
        let d_a = net.out_dim() / 2;
        Ok(Self { net, d_a })
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    /// Mean and (clamped) log-std per row.
    pub fn params_at(&self, states: &Tensor) -> Result<(Tensor, Tensor)> {
        let head = self.net.forward(states)?;
        let mean = head.slice_cols(0, self.d_a);
        let logstd = head.slice_cols(self.d_a, 2 * self.d_a).map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mean, logstd))
    }
}

pub fn gaussian_logpdf(model: &GaussianBc, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
    ensure!(actions.cols() == model.d_a, Dimension, "action width {} vs {}", actions.cols(), model.d_a);
    ensure!(actions.rows() == states.rows(), Dimension, "state/action row mismatch");
    let (m, l) = model.params_at(states)?;
    Ok((0..actions.rows()).map(|r| diag_logpdf_row(actions.row_slice(r), m.row_slice(r), l.row_slice(r))).collect())
}

pub fn gaussian_sample<R: Rng + ?Sized>(model: &GaussianBc, states: &Tensor, rng: &mut R) -> Result<Tensor> {
    let (m, l) = model.params_at(states)?;
    let eps = normal_matrix(rng, m.rows(), m.cols());
    let mut out = m.clone();
    for (i, o) in out.values_mut().iter_mut().enumerate() {
        *o = (*o + l.values()[i].exp() * eps.values()[i]).clamp(-ACTION_BOUND, ACTION_BOUND);
    }
    Ok(out)
}

/// Mean negative log-likelihood and its parameter gradient.
pub fn gaussian_nll_grad(model: &GaussianBc, states: &Tensor, actions: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    ensure!(actions.rows() > 0, Contract, "empty batch");
    ensure!(actions.cols() == model.d_a, Dimension, "action width {} vs {}", actions.cols(), model.d_a);
    let mut tape = Tape::new();
    let p = model.net.bind(&mut tape);
    let x = tape.leaf(states.clone());
    let head = model.net.forward_tape(&mut tape, &p, x)?;
    let (mean, logstd) = split_head(&mut tape, head, model.d_a);
    let a = tape.leaf(actions.clone());
    let lp = record_diag_logpdf(&mut tape, a, mean, logstd);
    let m = tape.mean(lp);
    let loss = tape.scale(m, -1.0);
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), g.wrt_all(&p)))
}

/// Maximum-likelihood fit by Adam. Returns the model and the NLL trace.
pub fn gaussian_fit<R: Rng + ?Sized>(data: &OfflineDataset, cfg: &BcConfig, rng: &mut R) -> Result<(GaussianBc, Vec<f64>)> {
    let model = GaussianBc::new(data.d_s(), data.d_a(), &cfg.hidden, rng)?;
    let mut tr = Trainable::new(model.net, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.train_steps);
    for _ in 0..cfg.train_steps {
        let b = data.batch(&batch_indices(rng, data.len(), cfg.batch_size));
        let cur = GaussianBc { net: tr.net.clone(), d_a: data.d_a() };
        let (loss, g) = gaussian_nll_grad(&cur, &b.states, &b.actions)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("Gaussian NLL became {loss}")));
        }
        tr.apply(&g)?;
        trace.push(loss);
    }
    Ok((GaussianBc { net: tr.net, d_a: data.d_a() }, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_gmm2d_dataset, DatasetMeta, OfflineDataset, Transition};
    use crate::rng::seeded;

    fn point_data(a: [f64; 2]) -> OfflineDataset {
        let recs = (0..64)
            .map(|_| Transition { state: vec![0.5], action: a.to_vec(), reward: 0.0, next_state: vec![0.5], terminal: true, log_density: None })
            .collect();
        OfflineDataset::new(recs, DatasetMeta::new(1, 2, "point", 0)).unwrap()
    }

    #[test]
    fn degenerate_data_hits_the_std_floor() {
        let mut rng = seeded(1);
        let data = point_data([0.3, -0.2]);
        let cfg = BcConfig { hidden: vec![16], train_steps: 3000, batch_size: 32, lr: 3e-3 };
        let (m, _) = gaussian_fit(&data, &cfg, &mut rng).unwrap();
        let s = Tensor::matrix(1, 1, vec![0.5]);
        let (mu, ls) = m.params_at(&s).unwrap();
        assert!((mu.at(0, 0) - 0.3).abs() < 0.02 && (mu.at(0, 1) + 0.2).abs() < 0.02, "{mu:?}");
        assert!(ls.values().iter().all(|&l| l >= LOG_STD_MIN && l < -2.0), "{ls:?}");
        let at = gaussian_logpdf(&m, &s, &Tensor::matrix(1, 2, vec![0.3, -0.2])).unwrap()[0];
        let off = gaussian_logpdf(&m, &s, &Tensor::matrix(1, 2, vec![0.5, -0.2])).unwrap()[0];
        assert!(at > off);
    }

    #[test]
    fn gmm_fit_centres_between_modes() {
        let mut rng = seeded(2);
        let data = make_gmm2d_dataset(4000, 2, &mut rng).unwrap();
        let cfg = BcConfig { hidden: vec![32], train_steps: 1500, batch_size: 128, lr: 1e-3 };
        let (m, _) = gaussian_fit(&data, &cfg, &mut rng).unwrap();
        let (mu, _) = m.params_at(&data.batch(&[0]).states).unwrap();
        assert!(mu.at(0, 0).abs() < 0.1 && mu.at(0, 1).abs() < 0.1, "{mu:?}");
        let smp = gaussian_sample(&m, &data.batch(&vec![0; 500]).states, &mut rng).unwrap();
        assert!(smp.values().iter().all(|v| v.abs() <= ACTION_BOUND));
    }
}
