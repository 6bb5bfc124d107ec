use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::agent::{actor_loss_grad, critic_loss_grad, CriticTargets, FacAgent};
use super::weight::{epsilon_threshold, penalty_weight_variant, EpsScheme};
use super::FacConfig;
use crate::envs::{Batch, OfflineDataset, Transition};
use crate::error::{ensure, Result};
use crate::flowmatch::{euler_sample, log_density, train_proxy, DensityMethod, ProxyTrainer, VelocityProxy};
use crate::nn::Tensor;
use crate::rng::{batch_indices, normal_matrix};

/// Losses and diagnostics of one gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub mean_w: f64,
    pub mean_q: f64,
}

const DENSITY_CHUNK: usize = 1024;

/// Proxy log-densities of every `(s, a)` pair in the dataset, attached as
/// the density column.
pub fn precompute_densities<R: Rng + ?Sized>(
    proxy: &VelocityProxy,
    data: &OfflineDataset,
    method: DensityMethod,
    rng: &mut R,
) -> Result<OfflineDataset> {
    let col = dataset_log_densities(proxy, data, method, rng)?;
    data.clone().with_log_densities(&col)
}

pub fn dataset_log_densities<R: Rng + ?Sized>(
    proxy: &VelocityProxy,
    data: &OfflineDataset,
    method: DensityMethod,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut col = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(DENSITY_CHUNK) {
        let b = data.batch(chunk);
        col.extend(log_density(proxy, &b.states, &b.actions, method, rng)?);
    }
    Ok(col)
}

/// Draws penalty actions from the actor, weighs them against `log_eps`, and
/// forms the TD targets from the target critics.
pub fn critic_targets<R: Rng + ?Sized>(
    agent: &FacAgent,
    proxy: &VelocityProxy,
    batch: &Batch,
    log_eps: &[f64],
    cfg: &FacConfig,
    rng: &mut R,
) -> Result<CriticTargets> {
    let n = batch.states.rows();
    ensure!(log_eps.len() == n, Dimension, "{} thresholds for {} samples", log_eps.len(), n);
    let z_pen = normal_matrix(rng, n, agent.d_a());
    let penalty_actions = agent.actor.act(&batch.states, &z_pen)?;
    let weights = if cfg.alpha != 0.0 {
        let lb = log_density(proxy, &batch.states, &penalty_actions, cfg.density, rng)?;
        lb.iter().zip(log_eps).map(|(b, e)| penalty_weight_variant(*b, *e, cfg.weight_shape)).collect()
    } else {
        vec![0.0; n]
    };
    let z_next = normal_matrix(rng, n, agent.d_a());
    let next_actions = agent.actor.act(&batch.next_states, &z_next)?;
    let tv = agent.critics.target_value(&batch.next_states, &next_actions)?;
    let targets = (0..n).map(|i| batch.rewards.values()[i] + cfg.gamma * batch.not_done.values()[i] * tv[i]).collect();
    Ok(CriticTargets { penalty_actions, weights, targets })
}

/// Critic step, actor step, target EMA.
pub fn fac_update<R: Rng + ?Sized>(
    agent: &mut FacAgent,
    proxy: &VelocityProxy,
    batch: &Batch,
    log_eps: &[f64],
    cfg: &FacConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    let t = critic_targets(agent, proxy, batch, log_eps, cfg, rng)?;
    let (critic_loss, g) = critic_loss_grad(&agent.critics, &batch.states, &batch.actions, &t, cfg.alpha)?;
    for (i, gi) in g.iter().enumerate() {
        agent.critic_opts[i].step(agent.critics.online[i].params_mut(), gi)?;
    }
    let n = batch.states.rows();
    let z = normal_matrix(rng, n, agent.d_a());
    let proxy_actions = euler_sample(proxy, &batch.states, &z)?;
    let (actor_loss, ga, st) = actor_loss_grad(&agent.actor, &agent.critics, &batch.states, &z, &proxy_actions, cfg.lambda, cfg.q_norm, None)?;
    agent.actor_opt.step(agent.actor.net.params_mut(), &ga)?;
    agent.critics.update_targets(cfg.rho)?;
    Ok(StepMetrics {
        step: 0,
        critic_loss,
        actor_loss,
        mean_w: t.weights.iter().sum::<f64>() / n as f64,
        mean_q: st.mean_q,
    })
}

/// One offline gradient step on a dataset carrying its density column.
/// `dataset_col` is the full column (needed by the dataset-wide scheme).
pub fn offline_step<R: Rng + ?Sized>(
    agent: &mut FacAgent,
    proxy: &VelocityProxy,
    data: &OfflineDataset,
    dataset_col: &[f64],
    cfg: &FacConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    let b = data.batch(&batch_indices(rng, data.len(), cfg.batch_size));
    let log_eps = match &b.log_densities {
        Some(ld) => epsilon_threshold(cfg.eps_scheme, Some(dataset_col), Some(ld.values()))?,
        // Without the penalty the threshold is never read.
        None if cfg.alpha == 0.0 => vec![0.0; b.states.rows()],
        None => return Err(crate::Error::Contract("offline training needs the stored density column".into())),
    };
    fac_update(agent, proxy, &b, &log_eps, cfg, rng)
}

/// Result of the two-stage offline procedure.
#[derive(Clone, Debug)]
pub struct OfflineRun {
    pub agent: FacAgent,
    pub proxy: ProxyTrainer,
    /// Training data with the proxy's density column attached.
    pub data: OfflineDataset,
    pub proxy_trace: Vec<f64>,
    pub metrics: Vec<StepMetrics>,
}

/// Stage-2 state of the offline procedure between gradient steps.
#[derive(Clone, Debug)]
pub struct OfflineState {
    pub agent: FacAgent,
    pub proxy: VelocityProxy,
    /// Training data with the proxy's density column attached.
    pub data: OfflineDataset,
    /// Completed actor-critic steps.
    pub step: usize,
}

impl OfflineState {
    /// Stage 1: fits the proxy, stores its densities and initializes the agent.
    pub fn prepare<R: Rng + ?Sized>(data: &OfflineDataset, cfg: &FacConfig, rng: &mut R) -> Result<(Self, Vec<f64>)> {
        cfg.validate()?;
        let (proxy, proxy_trace) = train_proxy(data, &cfg.proxy, rng)?;
        let data = precompute_densities(&proxy, data, cfg.density, rng)?;
        let agent = FacAgent::new(data.d_s(), data.d_a(), &cfg.actor_hidden, &cfg.critic_hidden, cfg.aggregation, cfg.lr, rng)?;
        Ok((Self { agent, proxy, data, step: 0 }, proxy_trace))
    }

    pub fn step<R: Rng + ?Sized>(&mut self, col: &[f64], cfg: &FacConfig, rng: &mut R) -> Result<StepMetrics> {
        let mut m = offline_step(&mut self.agent, &self.proxy, &self.data, col, cfg, rng)?;
        self.step += 1;
        m.step = self.step;
        Ok(m)
    }
}

/// Stage 1 fits the proxy and stores its densities; stage 2 trains the
/// critics and actor for `cfg.steps` updates. Metrics are recorded every
/// `cfg.log_every` steps and at the last step.
pub fn train_offline<R: Rng + ?Sized>(data: &OfflineDataset, cfg: &FacConfig, rng: &mut R) -> Result<OfflineRun> {
    let (mut st, proxy_trace) = OfflineState::prepare(data, cfg, rng)?;
    let col = st.data.log_densities().expect("column just attached");
    let mut metrics = Vec::new();
    while st.step < cfg.steps {
        let m = st.step(&col, cfg, rng)?;
        if m.step % cfg.log_every.max(1) == 0 || m.step == cfg.steps {
            metrics.push(m);
        }
    }
    Ok(OfflineRun { agent: st.agent, proxy: ProxyTrainer::new(st.proxy, cfg.proxy.lr), data: st.data, proxy_trace, metrics })
}

/// An interactive environment for fine-tuning.
pub trait Environment {
    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Vec<f64>>;
    /// Acts from `state`; the returned transition's `next_state` is where
    /// the environment now is.
    fn step(&mut self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Result<Transition>;
}

impl Environment for crate::envs::BanditEnv {
    fn reset(&mut self, _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(crate::envs::BANDIT_STATE.to_vec())
    }

    fn step(&mut self, _state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Result<Transition> {
        ensure!(action.len() == 1, Dimension, "bandit actions are scalars");
        Ok(crate::envs::BanditEnv::step(self, action, rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    /// Gradient steps.
    pub steps: usize,
    /// Cap on collected environment transitions (one per step until reached).
    pub env_steps: usize,
}

#[derive(Clone, Debug)]
pub struct OnlineRun {
    pub agent: FacAgent,
    pub proxy: ProxyTrainer,
    pub replay: OfflineDataset,
    pub collected: usize,
    pub metrics: Vec<StepMetrics>,
}

/// Mutable state of an online fine-tuning run between steps.
#[derive(Clone, Debug)]
pub struct FinetuneState {
    pub agent: FacAgent,
    pub proxy: ProxyTrainer,
    /// Replay buffer without a density column.
    pub replay: OfflineDataset,
    /// Current environment state.
    pub env_state: Vec<f64>,
    pub collected: usize,
    /// Completed gradient steps.
    pub step: usize,
}

impl FinetuneState {
    pub fn new<E: Environment, R: Rng>(agent: FacAgent, proxy: ProxyTrainer, env: &mut E, replay: OfflineDataset, rng: &mut R) -> Result<Self> {
        let env_state = env.reset(rng)?;
        Ok(Self { agent, proxy, replay: replay.without_log_densities(), env_state, collected: 0, step: 0 })
    }
}

/// One fine-tuning step: optionally collect a transition, then threshold
/// with the current proxy on the mini-batch, update the proxy, the critics,
/// the actor and the targets. The dataset-wide scheme has no fixed column
/// to read here and falls back to the batch-wide one.
pub fn finetune_step<E: Environment, R: Rng>(st: &mut FinetuneState, env: &mut E, cfg: &FacConfig, online: &OnlineConfig, rng: &mut R) -> Result<StepMetrics> {
    let scheme = match cfg.eps_scheme {
        EpsScheme::DatasetWide => EpsScheme::BatchWide,
        s => s,
    };
    if st.collected < online.env_steps {
        let s = Tensor::matrix(1, st.agent.d_s(), st.env_state.clone());
        let a = st.agent.actor.sample(&s, rng)?;
        let t = env.step(&st.env_state, a.values(), rng)?;
        st.env_state = if t.terminal { env.reset(rng)? } else { t.next_state.clone() };
        st.replay.push(t)?;
        st.collected += 1;
    }
    let b = st.replay.batch(&batch_indices(rng, st.replay.len(), cfg.batch_size));
    let log_eps = if cfg.alpha != 0.0 {
        let ld = log_density(&st.proxy.proxy, &b.states, &b.actions, cfg.density, rng)?;
        epsilon_threshold(scheme, None, Some(&ld))?
    } else {
        vec![0.0; b.states.rows()]
    };
    st.proxy.step(&b.states, &b.actions, rng)?;
    let mut m = fac_update(&mut st.agent, &st.proxy.proxy, &b, &log_eps, cfg, rng)?;
    st.step += 1;
    m.step = st.step;
    Ok(m)
}

/// Online fine-tuning for `online.steps` steps from an offline agent and proxy.
pub fn train_online_finetune<E: Environment, R: Rng>(
    agent: FacAgent,
    proxy: ProxyTrainer,
    env: &mut E,
    replay: OfflineDataset,
    cfg: &FacConfig,
    online: &OnlineConfig,
    rng: &mut R,
) -> Result<OnlineRun> {
    cfg.validate()?;
    let mut st = FinetuneState::new(agent, proxy, env, replay, rng)?;
    let mut metrics = Vec::new();
    while st.step < online.steps {
        let m = finetune_step(&mut st, env, cfg, online, rng)?;
        if m.step % cfg.log_every.max(1) == 0 || m.step == online.steps {
            metrics.push(m);
        }
    }
    Ok(OnlineRun { agent: st.agent, proxy: st.proxy, replay: st.replay, collected: st.collected, metrics })
}
