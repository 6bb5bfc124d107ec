//! Minimal dense-network kernel: tensors, a reverse-mode tape, GELU MLPs with
//! optional layer normalisation, Adam, target-network EMA and checkpoints.

mod adam;
pub mod checkpoint;
mod mlp;
mod tape;
mod tensor;

pub use adam::{ema_update, AdamState, DEFAULT_LR};
pub use checkpoint::Checkpoint;
pub use mlp::Mlp;
pub use tape::{gelu, gelu_grad, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// A network bundled with its optimiser.
#[derive(Clone, Debug)]
pub struct Trainable {
    pub net: Mlp,
    pub opt: AdamState,
}

impl Trainable {
    pub fn new(net: Mlp, lr: f64) -> Self {
        let opt = AdamState::new(net.params(), lr);
        Self { net, opt }
    }

    pub fn apply(&mut self, grads: &[Tensor]) -> Result<()> {
        self.opt.step(self.net.params_mut(), grads)
    }
}

/// Squared norm of a gradient list.
pub fn grad_norm_sq(gs: &[Tensor]) -> f64 {
    gs.iter().flat_map(|g| g.values()).map(|v| v * v).sum()
}
