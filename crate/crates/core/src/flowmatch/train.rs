use rand::Rng;
use serde::{Deserialize, Serialize};

use super::proxy::{fm_loss_grad, FmNoise, VelocityProxy, DEFAULT_FLOW_STEPS};
use crate::envs::OfflineDataset;
use crate::error::{ensure, Error, Result};
use crate::nn::{AdamState, Checkpoint, Tensor, DEFAULT_LR};
use crate::rng::batch_indices;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub hidden: Vec<usize>,
    /// Euler steps used for sampling and density evaluation.
    pub flow_steps: usize,
    /// Adam updates.
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256], flow_steps: DEFAULT_FLOW_STEPS, train_steps: 10_000, batch_size: 256, lr: DEFAULT_LR }
    }
}

/// A proxy together with its optimiser, for incremental training.
#[derive(Clone, Debug)]
pub struct ProxyTrainer {
    pub proxy: VelocityProxy,
    pub opt: AdamState,
}

impl ProxyTrainer {
    pub fn new(proxy: VelocityProxy, lr: f64) -> Self {
        let opt = AdamState::new(proxy.net.params(), lr);
        Self { proxy, opt }
    }

    /// One Adam update on a batch; returns the pre-update loss.
    pub fn step<R: Rng + ?Sized>(&mut self, states: &Tensor, actions: &Tensor, rng: &mut R) -> Result<f64> {
        let noise = FmNoise::sample(rng, actions.rows(), actions.cols());
        let (loss, grads) = fm_loss_grad(&self.proxy, states, actions, &noise)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("flow-matching loss became {loss}")));
        }
        self.opt.step(self.proxy.net.params_mut(), &grads)?;
        Ok(loss)
    }
}

/// Fits a fresh proxy to the dataset's `(state, action)` pairs. Returns the
/// proxy and the per-step loss trace.
pub fn train_proxy<R: Rng + ?Sized>(data: &OfflineDataset, cfg: &ProxyConfig, rng: &mut R) -> Result<(VelocityProxy, Vec<f64>)> {
    ensure!(cfg.batch_size >= 1, Config, "batch size must be positive");
    let proxy = VelocityProxy::new(data.d_s(), data.d_a(), &cfg.hidden, cfg.flow_steps, rng)?;
    let mut trainer = ProxyTrainer::new(proxy, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.train_steps);
    for _ in 0..cfg.train_steps {
        let idx = batch_indices(rng, data.len(), cfg.batch_size);
        let b = data.batch(&idx);
        trace.push(trainer.step(&b.states, &b.actions, rng)?);
    }
    Ok((trainer.proxy, trace))
}

impl VelocityProxy {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_header("kind", "velocity-proxy")?;
        ck.set_header("d_s", self.d_s())?;
        ck.set_header("d_a", self.d_a())?;
        ck.set_header("flow_steps", self.steps())?;
        ck.add_network("proxy", &self.net)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: String = ck.header_value("kind")?;
        ensure!(kind == "velocity-proxy", Format, "checkpoint holds a {kind}, not a velocity proxy");
        let net = ck.network("proxy")?;
        Self::from_net(net, ck.header_value("d_s")?, ck.header_value("d_a")?, ck.header_value("flow_steps")?)
    }
}
