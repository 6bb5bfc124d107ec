use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{ema_update, AdamState, Checkpoint, Mlp, Tape, Tensor, Var};
use crate::rng::normal_matrix;

/// Actions live in `[-ACTION_LIMIT, ACTION_LIMIT]^d_a`.
pub const ACTION_LIMIT: f64 = 1.0;

/// How the two target critics are combined in the TD target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Min,
    #[default]
    Mean,
}

impl Aggregation {
    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "min" => Ok(Aggregation::Min),
            "mean" => Ok(Aggregation::Mean),
            other => Err(crate::Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }

    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            Aggregation::Min => a.min(b),
            Aggregation::Mean => 0.5 * (a + b),
        }
    }
}

/// One-step flow policy `a = clip(f(s, z))` with `z ~ N(0, I)`.
#[derive(Clone, Debug)]
pub struct OneStepActor {
    pub net: Mlp,
    d_s: usize,
    d_a: usize,
}

impl OneStepActor {
    pub fn new<R: Rng + ?Sized>(d_s: usize, d_a: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Self::from_net(Mlp::with_hidden(d_s + d_a, hidden, d_a, false, rng)?, d_s)
    }

    pub fn from_net(net: Mlp, d_s: usize) -> Result<Self> {
        ensure!(net.in_dim() > d_s, Dimension, "actor input must exceed the state width");
        let d_a = net.out_dim();
        ensure!(net.in_dim() == d_s + d_a, Dimension, "actor input must be d_s + d_a");
        Ok(Self { net, d_s, d_a })
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    /// Network output before the action clamp.
    pub fn act_raw(&self, s: &Tensor, z: &Tensor) -> Result<Tensor> {
        ensure!(s.cols() == self.d_s && z.cols() == self.d_a, Dimension, "actor input widths ({}, {})", s.cols(), z.cols());
        self.net.forward(&Tensor::concat_cols(&[s, z]))
    }

    pub fn act(&self, s: &Tensor, z: &Tensor) -> Result<Tensor> {
        Ok(self.act_raw(s, z)?.map(|v| v.clamp(-ACTION_LIMIT, ACTION_LIMIT)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &Tensor, rng: &mut R) -> Result<Tensor> {
        let z = normal_matrix(rng, s.rows(), self.d_a);
        self.act(s, &z)
    }
}

/// Twin critics with EMA targets.
#[derive(Clone, Debug)]
pub struct CriticPair {
    pub online: [Mlp; 2],
    pub target: [Mlp; 2],
    pub aggregation: Aggregation,
}

impl CriticPair {
    /// Critics use layer normalisation on hidden layers; targets start as
    /// copies of the online networks.
    pub fn new<R: Rng + ?Sized>(d_s: usize, d_a: usize, hidden: &[usize], aggregation: Aggregation, rng: &mut R) -> Result<Self> {
        let q1 = Mlp::with_hidden(d_s + d_a, hidden, 1, true, rng)?;
        let q2 = Mlp::with_hidden(d_s + d_a, hidden, 1, true, rng)?;
        Ok(Self { target: [q1.clone(), q2.clone()], online: [q1, q2], aggregation })
    }

    pub fn q(&self, i: usize, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        Ok(self.online[i].forward(&Tensor::concat_cols(&[s, a]))?.into_values())
    }

    /// Mean of the two online critics.
    pub fn q_mean(&self, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let (q1, q2) = (self.q(0, s, a)?, self.q(1, s, a)?);
        Ok(q1.iter().zip(&q2).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    pub fn target_value(&self, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let x = Tensor::concat_cols(&[s, a]);
        let t1 = self.target[0].forward(&x)?;
        let t2 = self.target[1].forward(&x)?;
        Ok(t1.values().iter().zip(t2.values()).map(|(a, b)| self.aggregation.combine(*a, *b)).collect())
    }

    pub fn update_targets(&mut self, rho: f64) -> Result<()> {
        for i in 0..2 {
            let online = self.online[i].params().to_vec();
            ema_update(self.target[i].params_mut(), &online, rho)?;
        }
        Ok(())
    }
}

/// Actor, critics and their optimisers.
#[derive(Clone, Debug)]
pub struct FacAgent {
    pub actor: OneStepActor,
    pub critics: CriticPair,
    pub actor_opt: AdamState,
    pub critic_opts: [AdamState; 2],
}

impl FacAgent {
    pub fn new<R: Rng + ?Sized>(
        d_s: usize,
        d_a: usize,
        actor_hidden: &[usize],
        critic_hidden: &[usize],
        aggregation: Aggregation,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let actor = OneStepActor::new(d_s, d_a, actor_hidden, rng)?;
        let critics = CriticPair::new(d_s, d_a, critic_hidden, aggregation, rng)?;
        let actor_opt = AdamState::new(actor.net.params(), lr);
        let critic_opts = [AdamState::new(critics.online[0].params(), lr), AdamState::new(critics.online[1].params(), lr)];
        Ok(Self { actor, critics, actor_opt, critic_opts })
    }

    pub fn d_s(&self) -> usize {
        self.actor.d_s()
    }

    pub fn d_a(&self) -> usize {
        self.actor.d_a()
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.set_header("agent.d_s", self.d_s())?;
        ck.set_header("agent.aggregation", self.critics.aggregation)?;
        ck.add_network("actor", &self.actor.net)?;
        for i in 0..2 {
            ck.add_network(&format!("critic{i}"), &self.critics.online[i])?;
            ck.add_network(&format!("target{i}"), &self.critics.target[i])?;
            ck.set_header(&format!("critic{i}.opt"), &self.critic_opts[i])?;
        }
        ck.set_header("actor.opt", &self.actor_opt)
    }

    pub fn read_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let actor = OneStepActor::from_net(ck.network("actor")?, ck.header_value("agent.d_s")?)?;
        let net = |k: &str| ck.network(k);
        let critics = CriticPair {
            online: [net("critic0")?, net("critic1")?],
            target: [net("target0")?, net("target1")?],
            aggregation: ck.header_value("agent.aggregation")?,
        };
        Ok(Self {
            actor,
            critics,
            actor_opt: ck.header_value("actor.opt")?,
            critic_opts: [ck.header_value("critic0.opt")?, ck.header_value("critic1.opt")?],
        })
    }
}

/// Everything the critic loss needs besides the critic parameters: the
/// penalty actions with their weights and the (constant) TD targets.
#[derive(Clone, Debug)]
pub struct CriticTargets {
    pub penalty_actions: Tensor,
    pub weights: Vec<f64>,
    pub targets: Vec<f64>,
}

pub(crate) fn record_q(tape: &mut Tape, net: &Mlp, params: &[Var], s: &Tensor, a: Var) -> Result<Var> {
    let sv = tape.leaf(s.clone());
    let x = tape.concat_cols(&[sv, a]);
    net.forward_tape(tape, params, x)
}

/// Sum over both critics of `alpha * mean(w * Q(s, a_pi)) + mean((Q(s, a) - y)^2)`.
/// With `alpha == 0` the penalty term is not recorded at all.
pub fn critic_loss_grad(
    critics: &CriticPair,
    states: &Tensor,
    actions: &Tensor,
    t: &CriticTargets,
    alpha: f64,
) -> Result<(f64, [Vec<Tensor>; 2])> {
    let n = actions.rows();
    ensure!(n > 0, Contract, "empty batch");
    ensure!(t.targets.len() == n && t.weights.len() == t.penalty_actions.rows(), Dimension, "critic inputs disagree on batch size");
    ensure!(t.penalty_actions.rows() == n, Dimension, "penalty actions must match the batch");
    let mut tape = Tape::new();
    let p = [critics.online[0].bind(&mut tape), critics.online[1].bind(&mut tape)];
    let a = tape.leaf(actions.clone());
    let y = tape.leaf(Tensor::matrix(n, 1, t.targets.clone()));
    let pa = tape.leaf(t.penalty_actions.clone());
    let w = tape.leaf(Tensor::matrix(n, 1, t.weights.clone()));
    let mut total: Option<Var> = None;
    for i in 0..2 {
        let q = record_q(&mut tape, &critics.online[i], &p[i], states, a)?;
        let d = tape.sub(q, y);
        let sq = tape.square(d);
        let mut li = tape.mean(sq);
        if alpha != 0.0 {
            let qp = record_q(&mut tape, &critics.online[i], &p[i], states, pa)?;
            let wq = tape.mul(w, qp);
            let m = tape.mean(wq);
            let pen = tape.scale(m, alpha);
            li = tape.add(pen, li);
        }
        total = Some(match total {
            None => li,
            Some(acc) => tape.add(acc, li),
        });
    }
    let loss = total.expect("two critics");
    if !tape.value(loss).is_finite() {
        return Err(crate::Error::Training(format!("critic loss became {}", tape.value(loss).item())));
    }
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), [g.wrt_all(&p[0]), g.wrt_all(&p[1])]))
}

/// Diagnostics from one actor-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActorStats {
    pub mean_q: f64,
    pub q_scale: f64,
    pub distill: f64,
}

/// `-q_scale * mean(Q(s, clip(a_theta))) + lambda * mean ||a_theta - a_psi||^2`
/// where `Q` is the mean of the online critics, `a_theta` the unclipped
/// actor output and `a_psi` the proxy's sample from the same noise.
/// `q_scale` defaults to `1 / mean|Q|` when `q_norm` is set, else 1; passing
/// `Some` freezes it (useful for finite-difference checks).
#[allow(clippy::too_many_arguments)]
pub fn actor_loss_grad(
    actor: &OneStepActor,
    critics: &CriticPair,
    states: &Tensor,
    z: &Tensor,
    proxy_actions: &Tensor,
    lambda: f64,
    q_norm: bool,
    q_scale: Option<f64>,
) -> Result<(f64, Vec<Tensor>, ActorStats)> {
    let n = states.rows();
    ensure!(n > 0, Contract, "empty batch");
    ensure!(z.rows() == n && proxy_actions.rows() == n, Dimension, "actor inputs disagree on batch size");
    ensure!(z.cols() == actor.d_a() && proxy_actions.cols() == actor.d_a(), Dimension, "noise/action width");
    let mut tape = Tape::new();
    let pa = actor.net.bind(&mut tape);
    let pc = [critics.online[0].bind(&mut tape), critics.online[1].bind(&mut tape)];
    let sv = tape.leaf(states.clone());
    let zv = tape.leaf(z.clone());
    let x = tape.concat_cols(&[sv, zv]);
    let raw = actor.net.forward_tape(&mut tape, &pa, x)?;
    let act = tape.clamp(raw, -ACTION_LIMIT, ACTION_LIMIT);
    let q1 = record_q(&mut tape, &critics.online[0], &pc[0], states, act)?;
    let q2 = record_q(&mut tape, &critics.online[1], &pc[1], states, act)?;
    let qs = tape.add(q1, q2);
    let q = tape.scale(qs, 0.5);
    let qv = tape.value(q);
    let mean_q = qv.mean();
    let scale = match q_scale {
        Some(s) => s,
        None if q_norm => {
            let m = qv.values().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
            if m > 0.0 {
                1.0 / m
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let qm = tape.mean(q);
    let qterm = tape.scale(qm, -scale);
    let target = tape.leaf(proxy_actions.clone());
    let d = tape.sub(raw, target);
    let sq = tape.square(d);
    let rs = tape.row_sum(sq);
    let dm = tape.mean(rs);
    let distill = tape.value(dm).item();
    let reg = tape.scale(dm, lambda);
    let loss = tape.add(qterm, reg);
    if !tape.value(loss).is_finite() {
        return Err(crate::Error::Training(format!("actor loss became {}", tape.value(loss).item())));
    }
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), g.wrt_all(&pa), ActorStats { mean_q, q_scale: scale, distill }))
}
