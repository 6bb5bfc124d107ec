//! Flow-matching behavior proxy.
//!
//! A velocity field `v(x; s, u)` is trained to match the straight-line
//! displacement `a - z` between a noise draw `z` and a data action `a` at the
//! interpolant `(1 - u) z + u a`. Sampling integrates the field forward from
//! `u = 0` with `T` explicit Euler steps; log-densities integrate it backward
//! from the action on the same grid, accumulating the divergence.

mod density;
mod proxy;
mod train;

pub use density::{
    divergence, divergence_exact, log_density, log_density_exact, log_density_hutchinson, reverse_transport,
    DensityEstimate, DensityMethod, ProbeKind, LOG_DENSITY_CLAMP,
};
pub use proxy::{euler_sample, euler_sample_steps, fm_loss, fm_loss_grad, record_fm_loss, FmNoise, VelocityProxy, DEFAULT_FLOW_STEPS};
pub use train::{train_proxy, ProxyConfig, ProxyTrainer};
