//! Flow actor-critic for offline reinforcement learning.
//!
//! * [`nn`]: dense networks with reverse-mode gradients and Adam.
//! * [`flowmatch`]: flow-matching behavior proxies with Euler sampling and
//!   change-of-variables log-densities.
//! * [`bczoo`]: Gaussian, conditional-VAE and DDPM behavior cloning.
//! * [`fac`]: density-thresholded critic penalty, one-step flow actor,
//!   offline training and online fine-tuning.
//! * [`baselines`]: FQL, CQL and SVR adapted to the continuous bandit.
//! * [`tabular`]: exact operator, contraction and fixed-point checks.
//! * [`envs`]: the continuous bandit, the 2-D mixture and dataset files.
//! * [`experiments`]: end-to-end studies used by the CLI and acceptance suite.

pub mod baselines;
pub mod bczoo;
pub mod config;
pub mod envs;
mod error;
pub mod experiments;
pub mod fac;
pub mod flowmatch;
pub mod nn;
pub mod rng;
pub mod tabular;

pub use error::{Error, Result};
pub use nn::{Mlp, Tensor};
