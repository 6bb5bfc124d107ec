//! Continuous-action bandit on `[-1, 1]` with two reward modes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::dataset::{DatasetMeta, OfflineDataset, Transition};
use crate::error::{ensure, Result};
use crate::rng::normal;

pub const REWARD_NOISE_STD: f64 = 0.1;
pub const ACTION_LOW: f64 = -1.0;
pub const ACTION_HIGH: f64 = 1.0;
/// The dummy single state.
pub const BANDIT_STATE: [f64; 1] = [0.0];

/// Noise-free reward, equal to the true action value.
pub fn bandit_true_q(a: f64) -> f64 {
    25.0 * (-25.0 * (a + 0.5).powi(2) / 2.0).exp() + 10.0 * (-2.0 * (a - 0.5).powi(2)).exp()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BanditEnv {
    pub noise_std: f64,
}

impl Default for BanditEnv {
    fn default() -> Self {
        Self { noise_std: REWARD_NOISE_STD }
    }
}

impl BanditEnv {
    /// Clamps `a` to the action box, then returns the noisy reward.
    pub fn reward<R: Rng + ?Sized>(&self, a: f64, rng: &mut R) -> f64 {
        let a = a.clamp(ACTION_LOW, ACTION_HIGH);
        bandit_true_q(a) + self.noise_std * normal(rng)
    }

    pub fn step<R: Rng + ?Sized>(&self, action: &[f64], rng: &mut R) -> Transition {
        let a = action[0].clamp(ACTION_LOW, ACTION_HIGH);
        Transition {
            state: BANDIT_STATE.to_vec(),
            action: vec![a],
            reward: self.reward(a, rng),
            next_state: BANDIT_STATE.to_vec(),
            terminal: true,
            log_density: None,
        }
    }
}

pub fn bandit_reward<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    BanditEnv::default().reward(a, rng)
}

/// Mixture the offline bandit data is drawn from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BanditDataSpec {
    /// Weight of the sub-optimal component at `right_center`.
    pub right_weight: f64,
    pub right_center: f64,
    pub left_center: f64,
    pub component_std: f64,
}

impl Default for BanditDataSpec {
    fn default() -> Self {
        Self { right_weight: 0.8, right_center: 0.5, left_center: -0.3, component_std: 0.1 }
    }
}

pub fn make_bandit_dataset<R: Rng + ?Sized>(n: usize, spec: &BanditDataSpec, seed: u64, rng: &mut R) -> Result<OfflineDataset> {
    ensure!(n >= 1, Contract, "dataset size must be at least 1");
    let env = BanditEnv::default();
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let center = if rng.random::<f64>() < spec.right_weight { spec.right_center } else { spec.left_center };
        let a = (center + spec.component_std * normal(rng)).clamp(ACTION_LOW, ACTION_HIGH);
        records.push(env.step(&[a], rng));
    }
    let mut meta = DatasetMeta::new(1, 1, "bandit", seed);
    meta.extra.insert("component_std".into(), spec.component_std.to_string());
    meta.extra.insert("right_weight".into(), spec.right_weight.to_string());
    meta.extra.insert("right_center".into(), spec.right_center.to_string());
    meta.extra.insert("left_center".into(), spec.left_center.to_string());
    meta.extra.insert("reward_noise_std".into(), env.noise_std.to_string());
    OfflineDataset::new(records, meta)
}
