use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::{Mlp, Tape, Tensor, Var};
use crate::rng::{normal_matrix, uniform_matrix};

pub const DEFAULT_FLOW_STEPS: usize = 10;

/// State-conditioned velocity field. The network input is `[s, x, u]` with
/// the flow time fed as a raw scalar.
#[derive(Clone, Debug)]
pub struct VelocityProxy {
    pub net: Mlp,
    d_s: usize,
    d_a: usize,
    steps: usize,
}

impl VelocityProxy {
    pub fn new<R: Rng + ?Sized>(d_s: usize, d_a: usize, hidden: &[usize], steps: usize, rng: &mut R) -> Result<Self> {
        let net = Mlp::with_hidden(d_s + d_a + 1, hidden, d_a, false, rng)?;
        Self::from_net(net, d_s, d_a, steps)
    }

    pub fn from_net(net: Mlp, d_s: usize, d_a: usize, steps: usize) -> Result<Self> {
        ensure!(steps >= 1, Config, "Euler step count must be at least 1");
        ensure!(net.in_dim() == d_s + d_a + 1, Dimension, "velocity net input must be d_s + d_a + 1");
        ensure!(net.out_dim() == d_a, Dimension, "velocity net output must be d_a");
        Ok(Self { net, d_s, d_a, steps })
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::from_net(self.net.clone(), self.d_s, self.d_a, steps)
    }

    pub(crate) fn input(&self, s: &Tensor, x: &Tensor, u: f64) -> Tensor {
        let n = x.rows();
        let ut = Tensor::matrix(n, 1, vec![u; n]);
        Tensor::concat_cols(&[s, x, &ut])
    }

    pub(crate) fn check(&self, s: &Tensor, x: &Tensor) -> Result<()> {
        ensure!(s.cols() == self.d_s, Dimension, "state width {} vs {}", s.cols(), self.d_s);
        ensure!(x.cols() == self.d_a, Dimension, "action width {} vs {}", x.cols(), self.d_a);
        ensure!(s.rows() == x.rows(), Dimension, "{} states for {} actions", s.rows(), x.rows());
        Ok(())
    }

    /// `v(x; s, u)` for a batch at a common flow time.
    pub fn velocity(&self, s: &Tensor, x: &Tensor, u: f64) -> Result<Tensor> {
        self.check(s, x)?;
        self.net.forward(&self.input(s, x, u))
    }
}

/// Per-pair noise `z` and flow time `u` for one flow-matching evaluation.
#[derive(Clone, Debug)]
pub struct FmNoise {
    pub z: Tensor,
    /// `n x 1`.
    pub u: Tensor,
}

impl FmNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize, d_a: usize) -> Self {
        Self { z: normal_matrix(rng, n, d_a), u: uniform_matrix(rng, n, 1) }
    }
}

/// Records `mean_i ||v(a_u; s, u) - (a - z)||^2` (summed over action
/// dimensions) with `a_u = (1 - u) z + u a`.
pub fn record_fm_loss(
    tape: &mut Tape,
    proxy: &VelocityProxy,
    params: &[Var],
    states: &Tensor,
    actions: &Tensor,
    noise: &FmNoise,
) -> Result<Var> {
    ensure!(actions.rows() > 0, Contract, "flow-matching loss on an empty batch");
    proxy.check(states, actions)?;
    ensure!(noise.z.same_shape(actions) && noise.u.rows() == actions.rows(), Dimension, "noise shape does not match batch");
    let (n, d) = (actions.rows(), actions.cols());
    let mut xu = vec![0.0; n * d];
    let mut target = vec![0.0; n * d];
    for r in 0..n {
        let u = noise.u.at(r, 0);
        for c in 0..d {
            let (a, z) = (actions.at(r, c), noise.z.at(r, c));
            xu[r * d + c] = (1.0 - u) * z + u * a;
            target[r * d + c] = a - z;
        }
    }
    let input = Tensor::concat_cols(&[states, &Tensor::matrix(n, d, xu), &noise.u]);
    let x = tape.leaf(input);
    let v = proxy.net.forward_tape(tape, params, x)?;
    let t = tape.leaf(Tensor::matrix(n, d, target));
    let diff = tape.sub(v, t);
    let sq = tape.square(diff);
    let per_row = tape.row_sum(sq);
    Ok(tape.mean(per_row))
}

pub fn fm_loss(proxy: &VelocityProxy, states: &Tensor, actions: &Tensor, noise: &FmNoise) -> Result<f64> {
    let mut tape = Tape::new();
    let p = proxy.net.bind(&mut tape);
    let l = record_fm_loss(&mut tape, proxy, &p, states, actions, noise)?;
    Ok(tape.value(l).item())
}

pub fn fm_loss_grad(proxy: &VelocityProxy, states: &Tensor, actions: &Tensor, noise: &FmNoise) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = proxy.net.bind(&mut tape);
    let l = record_fm_loss(&mut tape, proxy, &p, states, actions, noise)?;
    let g = tape.backward(l)?;
    Ok((tape.value(l).item(), g.wrt_all(&p)))
}

/// Transports noise `z` to actions with the proxy's own step count.
pub fn euler_sample(proxy: &VelocityProxy, states: &Tensor, z: &Tensor) -> Result<Tensor> {
    euler_sample_steps(proxy, states, z, proxy.steps())
}

/// `x_{k+1} = x_k + v(x_k; s, k/T) / T` from `x_0 = z`.
pub fn euler_sample_steps(proxy: &VelocityProxy, states: &Tensor, z: &Tensor, steps: usize) -> Result<Tensor> {
    ensure!(steps >= 1, Contract, "Euler step count must be at least 1");
    proxy.check(states, z)?;
    let h = 1.0 / steps as f64;
    let mut x = z.clone();
    for k in 0..steps {
        let v = proxy.velocity(states, &x, k as f64 * h)?;
        x = x.zip_map(&v, |xi, vi| xi + h * vi);
    }
    Ok(x)
}
