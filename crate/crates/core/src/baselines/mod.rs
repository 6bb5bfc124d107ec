//! Comparison algorithms for the bandit study: FQL (the flow actor with an
//! unpenalised critic), CQL and SVR with Gaussian policies.

mod cql;
mod gaussian_actor;
mod svr;

pub use cql::{cql_actor_loss_grad, cql_critic_loss_grad, cql_update, train_cql, CqlConfig, CqlRun, CqlState};
pub use gaussian_actor::{GaussianActor, GaussianDraw, LOG_STD_FLOOR};
pub use svr::{is_log_ratios, svr_actor_loss_grad, svr_critic_loss_grad, svr_update, train_svr, SvrConfig, SvrMetrics, SvrRun, SvrState};

use rand::Rng;

use crate::envs::OfflineDataset;
use crate::fac::{train_offline, FacConfig, OfflineRun};
use crate::Result;

/// The FQL configuration matching `cfg`: identical except for `alpha = 0`.
pub fn fql_config(cfg: &FacConfig) -> FacConfig {
    FacConfig { alpha: 0.0, ..cfg.clone() }
}

/// FQL is the flow actor-critic with the critic penalty switched off; it
/// runs through exactly the same code path.
pub fn train_fql<R: Rng + ?Sized>(data: &OfflineDataset, cfg: &FacConfig, rng: &mut R) -> Result<OfflineRun> {
    train_offline(data, &fql_config(cfg), rng)
}
