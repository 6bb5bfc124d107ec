//! Synthetic environments, datasets and closed-form oracles.

mod bandit;
pub mod dataset;
mod gmm;

pub use bandit::{
    bandit_reward, bandit_true_q, make_bandit_dataset, BanditDataSpec, BanditEnv, ACTION_HIGH, ACTION_LOW, BANDIT_STATE,
    REWARD_NOISE_STD,
};
pub use dataset::{Batch, DatasetMeta, OfflineDataset, Transition};
pub use gmm::{
    gmm_std, gmm_true_logpdf, log_sum_exp, make_gmm2d_dataset, mode_coverage, nearest_mode, sample_gmm, GMM_MEANS,
    GMM_STATE, GMM_VAR,
};
