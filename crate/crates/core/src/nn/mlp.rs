//! Dense GELU networks.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{ensure, Result};
use crate::nn::tape::{gelu, gelu_with_grad, layer_norm_rows, Tape, Var};
use crate::nn::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
}

/// A multilayer perceptron `in -> hidden... -> out`.
///
/// Hidden layers apply (optionally) layer normalisation and then GELU; the
/// output layer is affine. Weights are stored `in x out` so a batch of rows
/// maps as `X W + b`. Initialisation is LeCun-uniform, `U(±sqrt(3 / fan_in))`,
/// with zero biases, unit gains and zero shifts.
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    norm: Vec<bool>,
    params: Vec<Tensor>,
    names: Vec<String>,
    layers: Vec<LayerIdx>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], layer_norm: bool, rng: &mut R) -> Result<Self> {
        ensure!(widths.len() >= 2, Config, "an MLP needs at least input and output widths");
        ensure!(widths.iter().all(|&w| w > 0), Config, "layer widths must be positive: {:?}", widths);
        let hidden = widths.len() - 2;
        let norm = vec![layer_norm; hidden];
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut layers = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let limit = (3.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            let weight = params.len();
            params.push(Tensor::matrix(fan_in, fan_out, w));
            names.push(format!("layer{l}.weight"));
            let bias = params.len();
            params.push(Tensor::zeros(&[1, fan_out]));
            names.push(format!("layer{l}.bias"));
            let norm_idx = if l < hidden && norm[l] {
                let g = params.len();
                params.push(Tensor::full(&[1, fan_out], 1.0));
                names.push(format!("layer{l}.norm_gain"));
                params.push(Tensor::zeros(&[1, fan_out]));
                names.push(format!("layer{l}.norm_shift"));
                Some((g, g + 1))
            } else {
                None
            };
            layers.push(LayerIdx { weight, bias, norm: norm_idx });
        }
        Ok(Self { widths: widths.to_vec(), norm, params, names, layers })
    }

    /// Builds `[input, hidden..., output]` from the pieces.
    pub fn with_hidden<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        layer_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        Self::new(&w, layer_norm, rng)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn uses_layer_norm(&self) -> bool {
        self.norm.iter().any(|&n| n)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        ensure!(params.len() == self.params.len(), Dimension, "parameter count {} vs {}", params.len(), self.params.len());
        for (new, old) in params.iter().zip(&self.params) {
            ensure!(new.shape() == old.shape(), Dimension, "parameter shape {:?} vs {:?}", new.shape(), old.shape());
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        ensure!(
            input.cols() == self.in_dim(),
            Dimension,
            "network expects {} input features, got {}",
            self.in_dim(),
            input.cols()
        );
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Inference without recording.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut h = input.clone();
        for (l, idx) in self.layers.iter().enumerate() {
            h = affine(&h, &self.params[idx.weight], &self.params[idx.bias]);
            if l + 1 < self.n_layers() {
                if let Some((g, b)) = idx.norm {
                    h = layer_norm_rows(&h).0;
                    h = affine_diag(&h, &self.params[g], &self.params[b]);
                }
                h = h.map(gelu);
            }
        }
        Ok(h)
    }

    /// Forward pass plus directional derivatives along each of `tangents`
    /// (same shape as `input`).
    pub fn forward_jvp(&self, input: &Tensor, tangents: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(input)?;
        for t in tangents {
            ensure!(t.same_shape(input), Dimension, "tangent shape {:?} vs input {:?}", t.shape(), input.shape());
        }
        let mut h = input.clone();
        let mut dh: Vec<Tensor> = tangents.to_vec();
        for (l, idx) in self.layers.iter().enumerate() {
            let w = &self.params[idx.weight];
            h = affine(&h, w, &self.params[idx.bias]);
            for d in dh.iter_mut() {
                *d = gemm(d, false, w, false);
            }
            if l + 1 < self.n_layers() {
                if let Some((g, b)) = idx.norm {
                    let (xhat, inv) = layer_norm_rows(&h);
                    let c = xhat.cols();
                    for d in dh.iter_mut() {
                        let mut out = vec![0.0; d.len()];
                        for r in 0..xhat.rows() {
                            let dx = d.row_slice(r);
                            let xh = xhat.row_slice(r);
                            let m1 = dx.iter().sum::<f64>() / c as f64;
                            let m2 = dx.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for k in 0..c {
                                out[r * c + k] = inv[r] * (dx[k] - m1 - xh[k] * m2) * self.params[g].values()[k];
                            }
                        }
                        *d = Tensor::matrix(xhat.rows(), c, out);
                    }
                    h = affine_diag(&xhat, &self.params[g], &self.params[b]);
                }
                let (act, slope): (Vec<f64>, Vec<f64>) = h.values().iter().map(|&x| gelu_with_grad(x)).unzip();
                for d in dh.iter_mut() {
                    for (v, s) in d.values_mut().iter_mut().zip(&slope) {
                        *v *= s;
                    }
                }
                h = Tensor::matrix(h.rows(), h.cols(), act);
            }
        }
        Ok((h, dh))
    }

    /// Registers the parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Records the forward pass using previously bound parameters.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        ensure!(params.len() == self.params.len(), Contract, "parameter binding has wrong length");
        let mut h = x;
        for (l, idx) in self.layers.iter().enumerate() {
            h = tape.matmul(h, params[idx.weight]);
            h = tape.add_row(h, params[idx.bias]);
            if l + 1 < self.n_layers() {
                if let Some((g, b)) = idx.norm {
                    h = tape.layer_norm(h);
                    h = tape.mul_row(h, params[g]);
                    h = tape.add_row(h, params[b]);
                }
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = gemm(x, false, w, false);
    let c = y.cols();
    for row in y.values_mut().chunks_mut(c) {
        for (v, bk) in row.iter_mut().zip(b.values()) {
            *v += bk;
        }
    }
    y
}

fn affine_diag(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let c = x.cols();
    let mut y = x.clone();
    for (k, v) in y.values_mut().iter_mut().enumerate() {
        *v = *v * g.values()[k % c] + b.values()[k % c];
    }
    y
}
