//! Reverse-mode differentiation over a linear record of matrix operations.
//!
//! A [`Tape`] is built fresh for every loss evaluation. Inputs and parameters
//! enter as leaves; each op stores its forward value, and [`Tape::backward`]
//! walks the record in reverse accumulating adjoints. Only the operations the
//! repo's losses need are provided.

use crate::error::{Error, Result};
use crate::nn::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Gelu(Var, Vec<f64>),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

// (1 + tanh y) / 2 written as a logistic.
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_K * x * x * x)).exp())
}

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

/// `(gelu(x), gelu'(x))` sharing one `exp`.
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let s = gelu_gate(x);
    (x * s, s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x))
}

/// Row-wise normalisation; returns the normalised rows and per-row 1/std.
pub(crate) fn layer_norm_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * c];
    let mut inv = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row_slice(r);
        let mu = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mu) * is;
        }
        inv.push(is);
    }
    (Tensor::matrix(n, c, out), inv)
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = gemm(self.value(a), false, self.value(b), false);
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(xv.cols(), bv.len(), "add_row width");
        let c = xv.cols();
        let mut out = xv.values().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += bv.values()[i % c];
        }
        let t = Tensor::matrix(xv.rows(), c, out);
        self.push(t, Op::AddRow(x, b))
    }

    /// Multiplies every row of `x` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(g));
        assert_eq!(xv.cols(), gv.len(), "mul_row width");
        let c = xv.cols();
        let mut out = xv.values().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o *= gv.values()[i % c];
        }
        let t = Tensor::matrix(xv.rows(), c, out);
        self.push(t, Op::MulRow(x, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (vals, slope): (Vec<f64>, Vec<f64>) = x.values().iter().map(|&v| gelu_with_grad(v)).unzip();
        let t = Tensor::new(x.shape().to_vec(), vals).expect("shape preserved");
        self.push(t, Op::Gelu(a, slope))
    }

    /// Row-wise normalisation without the affine part.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (t, inv_std) = layer_norm_rows(self.value(x));
        self.push(t, Op::LayerNorm { x, inv_std })
    }

    /// Elementwise clamp; the gradient is passed only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_cols(&refs);
        self.push(t, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a).slice_cols(start, end);
        self.push(t, Op::Slice(a, start, end))
    }

    /// `n x c -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let sums = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        let t = Tensor::matrix(v.rows(), 1, sums);
        self.push(t, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        self.push(t, Op::Mean(a))
    }

    /// Adjoints of `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = gemm(&g, false, self.value(*b), true);
                    let db = gemm(self.value(*a), true, &g, false);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(x, b) => {
                    let db = col_sums(&g);
                    let bshape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads, *b, Tensor::new(bshape, db)?);
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::MulRow(x, gain) => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let c = xv.cols();
                    let mut dx = g.values().to_vec();
                    let mut dg = vec![0.0; c];
                    for (k, d) in dx.iter_mut().enumerate() {
                        dg[k % c] += *d * xv.values()[k];
                        *d *= gv.values()[k % c];
                    }
                    accumulate(&mut grads, *x, Tensor::matrix(xv.rows(), c, dx));
                    accumulate(&mut grads, *gain, Tensor::new(gv.shape().to_vec(), dg)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |d, y| d * y);
                    let db = g.zip_map(self.value(*a), |d, x| d * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads, *a, g.map(|d| d * k));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Square(a) => {
                    let da = g.zip_map(self.value(*a), |d, x| 2.0 * d * x);
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let da = g.zip_map(&node.value, |d, y| d * y);
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a, slope) => {
                    let mut da = g.clone();
                    for (d, s) in da.values_mut().iter_mut().zip(slope) {
                        *d *= s;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, inv_std } => {
                    let xhat = &node.value;
                    let (n, c) = (xhat.rows(), xhat.cols());
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        let dy = g.row_slice(r);
                        let xh = xhat.row_slice(r);
                        let m1 = dy.iter().sum::<f64>() / c as f64;
                        let m2 = dy.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        for k in 0..c {
                            dx[r * c + k] = inv_std[r] * (dy[k] - m1 - xh[k] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::matrix(n, c, dx));
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let da = g.zip_map(self.value(*a), |d, x| if x >= lo && x <= hi { d } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.slice_cols(start, start + w));
                        start += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let av = self.value(*a);
                    let (n, c) = (av.rows(), av.cols());
                    let w = end - start;
                    let mut da = vec![0.0; n * c];
                    for r in 0..n {
                        da[r * c + start..r * c + end].copy_from_slice(&g.values()[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(n, c, da));
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let da: Vec<f64> = (0..av.len()).map(|k| g.values()[k / c]).collect();
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), g.item()));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let k = g.item() / av.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), k));
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for (k, v) in g.values().iter().enumerate() {
        out[k % c] += v;
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// d loss / d v; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn wrt_all(&self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let th = t.leaf(Tensor::scalar(3.0));
        let l = t.square(th);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(th).item(), 6.0);
    }

    #[test]
    fn linear_map_gradient_is_input_structure() {
        // loss = sum(x W): dL/dW[i][j] = sum over rows of x[r][i]
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]));
        let w = t.leaf(Tensor::matrix(2, 3, vec![0.5; 6]));
        let y = t.matmul(x, w);
        let l = t.sum(y);
        let g = t.backward(l).unwrap().wrt(w);
        assert_eq!(g.values(), &[4., 4., 4., 6., 6., 6.]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 2, vec![1., 2.]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(1.0));
        let b = t.leaf(Tensor::matrix(1, 2, vec![1., 1.]));
        let l = t.scale(a, 2.0);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(b), Tensor::zeros(&[1, 2]));
        assert_eq!(g.wrt(a).item(), 2.0);
    }

    #[test]
    fn gelu_is_zero_at_origin_and_matches_slope() {
        assert_eq!(gelu(0.0), 0.0);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let l = build(&mut t, x);
        let g = t.backward(l).unwrap().wrt(x);
        let h = 1e-6;
        for k in 0..x0.len() {
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp.values_mut()[k] += d;
                let mut t = Tape::new();
                let x = t.leaf(xp);
                let l = build(&mut t, x);
                t.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g.values()[k]).abs() < 1e-6, "k={k} fd={fd} ad={}", g.values()[k]);
        }
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let x0 = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4]);
        fd_check(
            |t, x| {
                let n = t.layer_norm(x);
                let g = t.gelu(n);
                let e = t.exp(x);
                let s = t.slice_cols(e, 1, 3);
                let c = t.concat_cols(&[g, s]);
                let r = t.row_sum(c);
                let q = t.square(r);
                let k = t.clamp(x, -1.0, 1.0);
                let m = t.mul(k, x);
                let sm = t.mean(m);
                let sq = t.sum(q);
                let a = t.add(sq, sm);
                t.add_scalar(a, 1.0)
            },
            x0,
        );
    }

    #[test]
    fn row_broadcast_ops_match_finite_differences() {
        let x0 = Tensor::matrix(3, 2, vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4]);
        fd_check(
            |t, x| {
                let g = t.leaf(Tensor::row(vec![2.0, -0.5]));
                let b = t.leaf(Tensor::row(vec![0.1, 0.2]));
                let y = t.mul_row(x, g);
                let y = t.add_row(y, b);
                let z = t.sub(y, x);
                let z = t.square(z);
                t.sum(z)
            },
            x0,
        );
    }
}
