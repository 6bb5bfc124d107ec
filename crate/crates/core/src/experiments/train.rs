//! Checkpointed offline training and online fine-tuning with bitwise resume.
//!
//! A checkpoint holds every network, both optimizers' moments, the proxy,
//! the generator position, the step counter and the metrics logged so far,
//! so continuing from it replays the uninterrupted run exactly.

use std::path::{Path, PathBuf};

use crate::envs::{DatasetMeta, OfflineDataset, Transition};
use crate::error::{ensure, Result};
use crate::fac::{finetune_step, Environment, FacAgent, FacConfig, FinetuneState, OfflineState, OnlineConfig, StepMetrics};
use crate::flowmatch::{ProxyTrainer, VelocityProxy};
use crate::nn::{Checkpoint, Tensor};
use crate::rng::{capture, restore, seeded, FacRng};

pub const METRICS_HEADER: &str = "step,critic_loss,actor_loss,mean_w,mean_q";

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rows {
        s.push_str(&format!("{},{},{},{},{}\n", m.step, m.critic_loss, m.actor_loss, m.mean_w, m.mean_q));
    }
    s
}

/// When and where checkpoints are written.
#[derive(Clone, Debug)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
    /// Interval in steps; 0 writes only the final checkpoint.
    pub every: usize,
    /// Stop (after checkpointing) once this many steps are done.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub agent: FacAgent,
    pub proxy: VelocityProxy,
    pub metrics: Vec<StepMetrics>,
    pub step: usize,
    pub finished: bool,
    /// Checkpoint files written by this invocation.
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:08}.json"))
}

fn write_proxy(ck: &mut Checkpoint, proxy: &VelocityProxy) -> Result<()> {
    ck.set_header("proxy.d_s", proxy.d_s())?;
    ck.set_header("proxy.d_a", proxy.d_a())?;
    ck.set_header("proxy.flow_steps", proxy.steps())?;
    ck.add_network("proxy", &proxy.net)
}

fn read_proxy(ck: &Checkpoint) -> Result<VelocityProxy> {
    VelocityProxy::from_net(ck.network("proxy")?, ck.header_value("proxy.d_s")?, ck.header_value("proxy.d_a")?, ck.header_value("proxy.flow_steps")?)
}

/// Networks only: enough to act and evaluate densities.
pub fn load_policy(path: &Path) -> Result<(FacAgent, VelocityProxy)> {
    let ck = Checkpoint::load(path)?;
    Ok((FacAgent::read_checkpoint(&ck)?, read_proxy(&ck)?))
}

fn offline_checkpoint(st: &OfflineState, cfg: &FacConfig, rng: &FacRng, metrics: &[StepMetrics]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.set_header("kind", "fac-offline")?;
    ck.set_header("step", st.step)?;
    ck.set_header("config", cfg)?;
    ck.set_header("rng", capture(rng))?;
    ck.set_header("metrics", metrics)?;
    st.agent.write_checkpoint(&mut ck)?;
    write_proxy(&mut ck, &st.proxy)?;
    let col = st.data.log_densities().expect("stage-2 data carries densities");
    ck.push_tensors("data/log_density", &[Tensor::row(col)]);
    Ok(ck)
}

fn run_offline_from(
    mut st: OfflineState,
    cfg: &FacConfig,
    mut rng: FacRng,
    mut metrics: Vec<StepMetrics>,
    plan: &CheckpointPlan,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&plan.dir)?;
    let col = st.data.log_densities().expect("stage-2 data carries densities");
    let mut written = Vec::new();
    let stop = plan.stop_after.unwrap_or(cfg.steps).min(cfg.steps);
    while st.step < stop {
        let m = st.step(&col, cfg, &mut rng)?;
        if m.step % cfg.log_every.max(1) == 0 || m.step == cfg.steps {
            metrics.push(m);
        }
        if plan.every > 0 && st.step % plan.every == 0 && st.step < stop {
            let p = checkpoint_path(&plan.dir, st.step);
            offline_checkpoint(&st, cfg, &rng, &metrics)?.save(&p)?;
            written.push(p);
        }
    }
    let p = checkpoint_path(&plan.dir, st.step);
    offline_checkpoint(&st, cfg, &rng, &metrics)?.save(&p)?;
    written.push(p);
    Ok(TrainOutcome { finished: st.step == cfg.steps, step: st.step, agent: st.agent, proxy: st.proxy, metrics, checkpoints: written })
}

/// Fits the proxy, then trains the actor-critic with checkpoints.
pub fn run_train(data: &OfflineDataset, cfg: &FacConfig, seed: u64, plan: &CheckpointPlan) -> Result<TrainOutcome> {
    let mut rng = seeded(seed);
    let (st, _) = OfflineState::prepare(data, cfg, &mut rng)?;
    run_offline_from(st, cfg, rng, Vec::new(), plan)
}

/// Continues an offline run from `checkpoint`; `data` must be the dataset it
/// was started on.
pub fn resume_train(data: &OfflineDataset, checkpoint: &Path, plan: &CheckpointPlan) -> Result<TrainOutcome> {
    let ck = Checkpoint::load(checkpoint)?;
    let kind: String = ck.header_value("kind")?;
    ensure!(kind == "fac-offline", Format, "checkpoint holds a {kind} run, not an offline run");
    let cfg: FacConfig = ck.header_value("config")?;
    let col = ck.tensors("data/log_density")?.pop().ok_or_else(|| crate::Error::Format("checkpoint lacks the density column".into()))?.into_values();
    ensure!(col.len() == data.len(), Contract, "checkpoint density column has {} rows, dataset {}", col.len(), data.len());
    let st = OfflineState {
        agent: FacAgent::read_checkpoint(&ck)?,
        proxy: read_proxy(&ck)?,
        data: data.clone().with_log_densities(&col)?,
        step: ck.header_value("step")?,
    };
    run_offline_from(st, &cfg, restore(&ck.header_value("rng")?), ck.header_value("metrics")?, plan)
}

fn finetune_checkpoint(st: &FinetuneState, cfg: &FacConfig, online: &OnlineConfig, rng: &FacRng, metrics: &[StepMetrics]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.set_header("kind", "fac-finetune")?;
    ck.set_header("step", st.step)?;
    ck.set_header("config", cfg)?;
    ck.set_header("online", online)?;
    ck.set_header("rng", capture(rng))?;
    ck.set_header("metrics", metrics)?;
    ck.set_header("env_state", &st.env_state)?;
    ck.set_header("collected", st.collected)?;
    ck.set_header("proxy.opt", &st.proxy.opt)?;
    ck.set_header("replay.meta", st.replay.meta())?;
    ck.set_header("replay.records", st.replay.records())?;
    st.agent.write_checkpoint(&mut ck)?;
    write_proxy(&mut ck, &st.proxy.proxy)?;
    Ok(ck)
}

fn run_finetune_from<E: Environment>(
    mut st: FinetuneState,
    env: &mut E,
    cfg: &FacConfig,
    online: &OnlineConfig,
    mut rng: FacRng,
    mut metrics: Vec<StepMetrics>,
    plan: &CheckpointPlan,
) -> Result<(TrainOutcome, FinetuneState)> {
    std::fs::create_dir_all(&plan.dir)?;
    let mut written = Vec::new();
    let stop = plan.stop_after.unwrap_or(online.steps).min(online.steps);
    while st.step < stop {
        let m = finetune_step(&mut st, env, cfg, online, &mut rng)?;
        if m.step % cfg.log_every.max(1) == 0 || m.step == online.steps {
            metrics.push(m);
        }
        if plan.every > 0 && st.step % plan.every == 0 && st.step < stop {
            let p = checkpoint_path(&plan.dir, st.step);
            finetune_checkpoint(&st, cfg, online, &rng, &metrics)?.save(&p)?;
            written.push(p);
        }
    }
    let p = checkpoint_path(&plan.dir, st.step);
    finetune_checkpoint(&st, cfg, online, &rng, &metrics)?.save(&p)?;
    written.push(p);
    let out = TrainOutcome {
        finished: st.step == online.steps,
        step: st.step,
        agent: st.agent.clone(),
        proxy: st.proxy.proxy.clone(),
        metrics,
        checkpoints: written,
    };
    Ok((out, st))
}

/// Fine-tunes the agent and proxy stored in an offline checkpoint, seeding
/// the replay buffer with `replay`.
pub fn run_finetune<E: Environment>(
    offline: &Path,
    replay: &OfflineDataset,
    env: &mut E,
    cfg: &FacConfig,
    online: &OnlineConfig,
    seed: u64,
    plan: &CheckpointPlan,
) -> Result<(TrainOutcome, FinetuneState)> {
    cfg.validate()?;
    let (agent, proxy) = load_policy(offline)?;
    let mut rng = seeded(seed);
    let st = FinetuneState::new(agent, ProxyTrainer::new(proxy, cfg.proxy.lr), env, replay.clone(), &mut rng)?;
    run_finetune_from(st, env, cfg, online, rng, Vec::new(), plan)
}

pub fn resume_finetune<E: Environment>(checkpoint: &Path, env: &mut E, plan: &CheckpointPlan) -> Result<(TrainOutcome, FinetuneState)> {
    let ck = Checkpoint::load(checkpoint)?;
    let kind: String = ck.header_value("kind")?;
    ensure!(kind == "fac-finetune", Format, "checkpoint holds a {kind} run, not a fine-tuning run");
    let cfg: FacConfig = ck.header_value("config")?;
    let online: OnlineConfig = ck.header_value("online")?;
    let records: Vec<Transition> = ck.header_value("replay.records")?;
    let meta: DatasetMeta = ck.header_value("replay.meta")?;
    let proxy = ProxyTrainer { proxy: read_proxy(&ck)?, opt: ck.header_value("proxy.opt")? };
    let st = FinetuneState {
        agent: FacAgent::read_checkpoint(&ck)?,
        proxy,
        replay: OfflineDataset::new(records, meta)?,
        env_state: ck.header_value("env_state")?,
        collected: ck.header_value("collected")?,
        step: ck.header_value("step")?,
    };
    run_finetune_from(st, env, &cfg, &online, restore(&ck.header_value("rng")?), ck.header_value("metrics")?, plan)
}
