use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gaussian_actor::GaussianActor;
use crate::envs::{Batch, OfflineDataset};
use crate::error::{ensure, Error, Result};
use crate::fac::{record_q, Aggregation, CriticPair, StepMetrics};
use crate::nn::{AdamState, Tape, Tensor, Var, DEFAULT_LR};
use crate::rng::{batch_indices, normal_matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqlConfig {
    pub alpha: f64,
    /// Entropy coefficient in the actor objective.
    pub eta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub aggregation: Aggregation,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub log_every: usize,
}

impl Default for CqlConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            eta: 0.1,
            gamma: 0.0,
            rho: 0.005,
            aggregation: Aggregation::Min,
            steps: 10_000,
            batch_size: 256,
            lr: DEFAULT_LR,
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            log_every: 1000,
        }
    }
}

/// Sum over both critics of
/// `alpha * (mean Q(s, a_pi) - mean Q(s, a_D)) + mean((Q(s, a_D) - y)^2)`.
pub fn cql_critic_loss_grad(
    critics: &CriticPair,
    states: &Tensor,
    actions: &Tensor,
    policy_actions: &Tensor,
    targets: &[f64],
    alpha: f64,
) -> Result<(f64, [Vec<Tensor>; 2])> {
    let n = actions.rows();
    ensure!(n > 0 && targets.len() == n && policy_actions.rows() == n, Dimension, "CQL critic inputs disagree on batch size");
    let mut tape = Tape::new();
    let p = [critics.online[0].bind(&mut tape), critics.online[1].bind(&mut tape)];
    let a = tape.leaf(actions.clone());
    let pa = tape.leaf(policy_actions.clone());
    let y = tape.leaf(Tensor::matrix(n, 1, targets.to_vec()));
    let mut total: Option<Var> = None;
    for i in 0..2 {
        let q = record_q(&mut tape, &critics.online[i], &p[i], states, a)?;
        let d = tape.sub(q, y);
        let sq = tape.square(d);
        let mut li = tape.mean(sq);
        if alpha != 0.0 {
            let qp = record_q(&mut tape, &critics.online[i], &p[i], states, pa)?;
            let gap = tape.sub(qp, q);
            let m = tape.mean(gap);
            let pen = tape.scale(m, alpha);
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

/// `mean(eta * log pi(a|s) - Q(s, a))` with `a` a reparameterised draw and
/// `Q` the mean of the online critics. Returns the loss, actor gradients and
/// the mean Q.
pub fn cql_actor_loss_grad(actor: &GaussianActor, critics: &CriticPair, states: &Tensor, eps: &Tensor, eta: f64) -> Result<(f64, Vec<Tensor>, f64)> {
    let mut tape = Tape::new();
    let pa = actor.net.bind(&mut tape);
    let pc = [critics.online[0].bind(&mut tape), critics.online[1].bind(&mut tape)];
    let draw = actor.record(&mut tape, &pa, states, eps)?;
    let q1 = record_q(&mut tape, &critics.online[0], &pc[0], states, draw.action)?;
    let q2 = record_q(&mut tape, &critics.online[1], &pc[1], states, draw.action)?;
    let qs = tape.add(q1, q2);
    let q = tape.scale(qs, 0.5);
    let mean_q = tape.value(q).mean();
    let ent = tape.scale(draw.log_prob, eta);
    let obj = tape.sub(ent, q);
    let loss = tape.mean(obj);
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), g.wrt_all(&pa), mean_q))
}

#[derive(Clone, Debug)]
pub struct CqlRun {
    pub actor: GaussianActor,
    pub critics: CriticPair,
    pub metrics: Vec<StepMetrics>,
}

/// Optimisers for the Gaussian actor and both critics.
#[derive(Clone, Debug)]
pub struct CqlState {
    actor_opt: AdamState,
    critic_opts: [AdamState; 2],
}

impl CqlState {
    pub fn new(actor: &GaussianActor, critics: &CriticPair, lr: f64) -> Self {
        Self {
            actor_opt: AdamState::new(actor.net.params(), lr),
            critic_opts: [AdamState::new(critics.online[0].params(), lr), AdamState::new(critics.online[1].params(), lr)],
        }
    }

    pub(crate) fn step_critics(&mut self, critics: &mut CriticPair, g: &[Vec<Tensor>; 2]) -> Result<()> {
        for i in 0..2 {
            self.critic_opts[i].step(critics.online[i].params_mut(), &g[i])?;
        }
        Ok(())
    }

    pub(crate) fn step_actor(&mut self, actor: &mut GaussianActor, g: &[Tensor]) -> Result<()> {
        self.actor_opt.step(actor.net.params_mut(), g)
    }
}

fn td_targets<R: Rng + ?Sized>(actor: &GaussianActor, critics: &CriticPair, b: &Batch, gamma: f64, rng: &mut R) -> Result<Vec<f64>> {
    let next = actor.sample(&b.next_states, rng)?;
    let tv = critics.target_value(&b.next_states, &next)?;
    Ok((0..tv.len()).map(|i| b.rewards.values()[i] + gamma * b.not_done.values()[i] * tv[i]).collect())
}

/// One critic step, one actor step, target EMA.
pub fn cql_update<R: Rng + ?Sized>(
    actor: &mut GaussianActor,
    critics: &mut CriticPair,
    opts: &mut CqlState,
    b: &Batch,
    cfg: &CqlConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    let pol = actor.sample(&b.states, rng)?;
    let y = td_targets(actor, critics, b, cfg.gamma, rng)?;
    let (closs, g) = cql_critic_loss_grad(critics, &b.states, &b.actions, &pol, &y, cfg.alpha)?;
    if !closs.is_finite() {
        return Err(Error::Training(format!("CQL critic loss became {closs}")));
    }
    opts.step_critics(critics, &g)?;
    let eps = normal_matrix(rng, b.states.rows(), actor.d_a());
    let (aloss, ga, mean_q) = cql_actor_loss_grad(actor, critics, &b.states, &eps, cfg.eta)?;
    opts.step_actor(actor, &ga)?;
    critics.update_targets(cfg.rho)?;
    Ok(StepMetrics { step: 0, critic_loss: closs, actor_loss: aloss, mean_w: 0.0, mean_q })
}

pub fn train_cql<R: Rng + ?Sized>(data: &OfflineDataset, cfg: &CqlConfig, rng: &mut R) -> Result<CqlRun> {
    let mut actor = GaussianActor::new(data.d_s(), data.d_a(), &cfg.actor_hidden, rng)?;
    let mut critics = CriticPair::new(data.d_s(), data.d_a(), &cfg.critic_hidden, cfg.aggregation, rng)?;
    let mut opts = CqlState::new(&actor, &critics, cfg.lr);
    let mut metrics = Vec::new();
    for step in 1..=cfg.steps {
        let b = data.batch(&batch_indices(rng, data.len(), cfg.batch_size));
        let mut m = cql_update(&mut actor, &mut critics, &mut opts, &b, cfg, rng)?;
        m.step = step;
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            metrics.push(m);
        }
    }
    Ok(CqlRun { actor, critics, metrics })
}
