//! Flow actor-critic: density-weighted critic penalisation with a one-step
//! flow actor distilled toward the flow behavior proxy.

mod agent;
mod train;
mod weight;

pub(crate) use agent::record_q;
pub use agent::{actor_loss_grad, critic_loss_grad, ActorStats, Aggregation, CriticPair, CriticTargets, FacAgent, OneStepActor, ACTION_LIMIT};
pub use train::{
    critic_targets, dataset_log_densities, fac_update, finetune_step, offline_step, precompute_densities, train_offline, train_online_finetune,
    Environment, FinetuneState, OfflineRun, OfflineState, OnlineConfig, OnlineRun, StepMetrics,
};
pub use weight::{epsilon_threshold, penalty_weight, penalty_weight_variant, EpsScheme, WeightShape};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::flowmatch::{DensityMethod, ProxyConfig};
use crate::nn::DEFAULT_LR;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacConfig {
    /// Critic penalisation coefficient.
    pub alpha: f64,
    /// Actor distillation coefficient.
    pub lambda: f64,
    pub gamma: f64,
    /// Target EMA rate.
    pub rho: f64,
    pub eps_scheme: EpsScheme,
    pub weight_shape: WeightShape,
    pub q_norm: bool,
    pub aggregation: Aggregation,
    /// Gradient steps for the actor-critic stage.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub proxy: ProxyConfig,
    pub density: DensityMethod,
    pub log_every: usize,
}

impl Default for FacConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.1,
            gamma: 0.995,
            rho: 0.005,
            eps_scheme: EpsScheme::BatchAdaptive,
            weight_shape: WeightShape::Linear,
            q_norm: true,
            aggregation: Aggregation::Mean,
            steps: 1_000_000,
            batch_size: 256,
            lr: DEFAULT_LR,
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            proxy: ProxyConfig::default(),
            density: DensityMethod::Exact,
            log_every: 1000,
        }
    }
}

impl FacConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha.is_finite() && self.alpha >= 0.0, Config, "alpha must be finite and >= 0, got {}", self.alpha);
        ensure!(self.lambda.is_finite() && self.lambda >= 0.0, Config, "lambda must be finite and >= 0, got {}", self.lambda);
        ensure!((0.0..1.0).contains(&self.gamma), Config, "gamma must lie in [0, 1), got {}", self.gamma);
        ensure!(self.rho > 0.0 && self.rho <= 1.0, Config, "rho must lie in (0, 1], got {}", self.rho);
        ensure!(self.lr.is_finite() && self.lr > 0.0, Config, "learning rate must be positive");
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(self.proxy.flow_steps >= 1, Config, "flow step count must be positive");
        Ok(())
    }
}
