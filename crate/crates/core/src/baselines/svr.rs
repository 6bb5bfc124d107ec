use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cql::CqlState;
use super::gaussian_actor::GaussianActor;
use crate::bczoo::{gaussian_fit, BcConfig, GaussianBc};
use crate::envs::{Batch, OfflineDataset};
use crate::error::{ensure, Error, Result};
use crate::fac::{record_q, Aggregation, CriticPair, StepMetrics};
use crate::nn::{Tape, Tensor, Var, DEFAULT_LR};
use crate::rng::{batch_indices, normal_matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvrConfig {
    pub alpha: f64,
    /// The proposal `zeta` shares the actor mean with its std scaled by `k`.
    pub k: f64,
    /// Bound on the importance ratio and on the penalty term magnitude.
    pub clip: f64,
    /// Overrides `min(r) / (1 - gamma)` when set.
    pub q_min: Option<f64>,
    pub gamma: f64,
    pub rho: f64,
    pub aggregation: Aggregation,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub proxy: BcConfig,
    pub log_every: usize,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            k: 2.0,
            clip: 1e4,
            q_min: None,
            gamma: 0.0,
            rho: 0.005,
            aggregation: Aggregation::Min,
            steps: 10_000,
            batch_size: 256,
            lr: DEFAULT_LR,
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            proxy: BcConfig::default(),
            log_every: 1000,
        }
    }
}

impl SvrConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.clip > 0.0, Config, "SVR clip bound must be positive");
        ensure!(self.k > 1.0, Config, "SVR proposal multiplier must exceed 1");
        ensure!((0.0..1.0).contains(&self.gamma), Config, "gamma must lie in [0, 1)");
        Ok(())
    }
}

/// `log zeta(a|s) - log beta_hat(a|s)` per row, with
/// `zeta = N(mu_pi(s), (k sigma_pi(s))^2)`.
pub fn is_log_ratios(actor: &GaussianActor, proxy: &GaussianBc, states: &Tensor, actions: &Tensor, k: f64) -> Result<Vec<f64>> {
    let (m, l) = actor.params_at(states)?;
    let lz = l.map(|v| v + k.ln());
    let lb = crate::bczoo::gaussian_logpdf(proxy, states, actions)?;
    Ok((0..actions.rows()).map(|r| crate::bczoo::diag_logpdf_row(actions.row_slice(r), m.row_slice(r), lz.row_slice(r)) - lb[r]).collect())
}

/// Sum over both critics of
/// `alpha * clip(mean_zeta (Q - Q_min)^2 - mean_D ratio (Q - Q_min)^2) + TD`.
/// `ratios` are already clipped.
#[allow(clippy::too_many_arguments)]
pub fn svr_critic_loss_grad(
    critics: &CriticPair,
    states: &Tensor,
    actions: &Tensor,
    zeta_actions: &Tensor,
    ratios: &[f64],
    targets: &[f64],
    q_min: f64,
    alpha: f64,
    clip: f64,
) -> Result<(f64, [Vec<Tensor>; 2])> {
    let n = actions.rows();
    ensure!(n > 0 && ratios.len() == n && targets.len() == n && zeta_actions.rows() == n, Dimension, "SVR critic inputs disagree on batch size");
    let mut tape = Tape::new();
    let p = [critics.online[0].bind(&mut tape), critics.online[1].bind(&mut tape)];
    let a = tape.leaf(actions.clone());
    let za = tape.leaf(zeta_actions.clone());
    let y = tape.leaf(Tensor::matrix(n, 1, targets.to_vec()));
    let w = tape.leaf(Tensor::matrix(n, 1, ratios.to_vec()));
    let mut total: Option<Var> = None;
    for i in 0..2 {
        let q = record_q(&mut tape, &critics.online[i], &p[i], states, a)?;
        let d = tape.sub(q, y);
        let sq = tape.square(d);
        let mut li = tape.mean(sq);
        if alpha != 0.0 {
            let qz = record_q(&mut tape, &critics.online[i], &p[i], states, za)?;
            let qz = tape.add_scalar(qz, -q_min);
            let qz2 = tape.square(qz);
            let ez = tape.mean(qz2);
            let qd = tape.add_scalar(q, -q_min);
            let qd2 = tape.square(qd);
            let wq = tape.mul(w, qd2);
            let ed = tape.mean(wq);
            let pen = tape.sub(ez, ed);
            let pen = tape.clamp(pen, -clip, clip);
            let pen = tape.scale(pen, alpha);
            li = tape.add(pen, li);
        }
        total = Some(match total {
            None => li,
            Some(acc) => tape.add(acc, li),
        });
    }
    let loss = total.expect("two critics");
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), [g.wrt_all(&p[0]), g.wrt_all(&p[1])]))
}

/// `-mean Q(s, a)` for a reparameterised policy draw.
pub fn svr_actor_loss_grad(actor: &GaussianActor, critics: &CriticPair, states: &Tensor, eps: &Tensor) -> Result<(f64, Vec<Tensor>, f64)> {
    super::cql::cql_actor_loss_grad(actor, critics, states, eps, 0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SvrMetrics {
    pub base: StepMetrics,
    /// Largest unclipped importance ratio in the batch.
    pub is_ratio_max: f64,
    /// Fraction of batch ratios at the clip bound.
    pub clipped_frac: f64,
}

pub type SvrState = CqlState;

#[allow(clippy::too_many_arguments)]
pub fn svr_update<R: Rng + ?Sized>(
    actor: &mut GaussianActor,
    critics: &mut CriticPair,
    proxy: &GaussianBc,
    opts: &mut SvrState,
    b: &Batch,
    q_min: f64,
    cfg: &SvrConfig,
    rng: &mut R,
) -> Result<SvrMetrics> {
    let n = b.states.rows();
    let lr = is_log_ratios(actor, proxy, &b.states, &b.actions, cfg.k)?;
    let lclip = cfg.clip.ln();
    let ratios: Vec<f64> = lr.iter().map(|v| v.min(lclip).exp()).collect();
    let max_lr = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let clipped = lr.iter().filter(|&&v| v >= lclip).count() as f64 / n as f64;
    let (m, l) = actor.params_at(&b.states)?;
    let e = normal_matrix(rng, n, actor.d_a());
    let mut zeta = m;
    for (i, zv) in zeta.values_mut().iter_mut().enumerate() {
        *zv = (*zv + cfg.k * l.values()[i].exp() * e.values()[i]).clamp(-crate::fac::ACTION_LIMIT, crate::fac::ACTION_LIMIT);
    }
    let next = actor.sample(&b.next_states, rng)?;
    let tv = critics.target_value(&b.next_states, &next)?;
    let y: Vec<f64> = (0..n).map(|i| b.rewards.values()[i] + cfg.gamma * b.not_done.values()[i] * tv[i]).collect();
    let (closs, g) = svr_critic_loss_grad(critics, &b.states, &b.actions, &zeta, &ratios, &y, q_min, cfg.alpha, cfg.clip)?;
    if !closs.is_finite() {
        return Err(Error::Training(format!("SVR critic loss became {closs}")));
    }
    opts.step_critics(critics, &g)?;
    let eps = normal_matrix(rng, n, actor.d_a());
    let (aloss, ga, mean_q) = svr_actor_loss_grad(actor, critics, &b.states, &eps)?;
    opts.step_actor(actor, &ga)?;
    critics.update_targets(cfg.rho)?;
    Ok(SvrMetrics {
        base: StepMetrics { step: 0, critic_loss: closs, actor_loss: aloss, mean_w: 0.0, mean_q },
        is_ratio_max: max_lr.min(f64::MAX.ln()).exp(),
        clipped_frac: clipped,
    })
}

#[derive(Clone, Debug)]
pub struct SvrRun {
    pub actor: GaussianActor,
    pub critics: CriticPair,
    pub proxy: GaussianBc,
    pub q_min: f64,
    pub metrics: Vec<SvrMetrics>,
    /// Largest importance ratio seen over all training batches.
    pub is_ratio_max: f64,
}

pub fn train_svr<R: Rng + ?Sized>(data: &OfflineDataset, cfg: &SvrConfig, rng: &mut R) -> Result<SvrRun> {
    cfg.validate()?;
    let (proxy, _) = gaussian_fit(data, &cfg.proxy, rng)?;
    let q_min = cfg.q_min.unwrap_or_else(|| data.records().iter().map(|t| t.reward).fold(f64::INFINITY, f64::min) / (1.0 - cfg.gamma));
    let mut actor = GaussianActor::new(data.d_s(), data.d_a(), &cfg.actor_hidden, rng)?;
    let mut critics = CriticPair::new(data.d_s(), data.d_a(), &cfg.critic_hidden, cfg.aggregation, rng)?;
    let mut opts = SvrState::new(&actor, &critics, cfg.lr);
    let mut metrics = Vec::new();
    let mut seen_max: f64 = 0.0;
    for step in 1..=cfg.steps {
        let b = data.batch(&batch_indices(rng, data.len(), cfg.batch_size));
        let mut m = svr_update(&mut actor, &mut critics, &proxy, &mut opts, &b, q_min, cfg, rng)?;
        m.base.step = step;
        seen_max = seen_max.max(m.is_ratio_max);
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            metrics.push(m);
        }
    }
    Ok(SvrRun { actor, critics, proxy, q_min, metrics, is_ratio_max: seen_max })
}
