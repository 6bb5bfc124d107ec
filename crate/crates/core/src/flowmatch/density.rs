use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::proxy::VelocityProxy;
use crate::error::{ensure, Result};
use crate::nn::Tensor;

/// Log-density estimates are clamped to `[-LOG_DENSITY_CLAMP, LOG_DENSITY_CLAMP]`.
pub const LOG_DENSITY_CLAMP: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Rademacher,
    Gaussian,
    /// Standard basis vectors; with one probe per action dimension the
    /// estimate is the exact trace.
    Coordinate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DensityMethod {
    Exact,
    Hutchinson { probes: usize, kind: ProbeKind },
}

impl DensityMethod {
    pub fn hutchinson(probes: usize) -> Self {
        DensityMethod::Hutchinson { probes, kind: ProbeKind::Rademacher }
    }

    pub fn probe_count(&self, d_a: usize) -> usize {
        match self {
            DensityMethod::Exact => d_a,
            DensityMethod::Hutchinson { probes, .. } => *probes,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            DensityMethod::Exact => "exact",
            DensityMethod::Hutchinson { .. } => "hutchinson",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub log_density: f64,
    pub method: DensityMethod,
}

/// Builds `probes` tangent directions for the action block of a batch.
/// Returns them with the scale that turns `sum_p e_p^T J e_p` into a trace
/// estimate.
fn draw_probes<R: Rng + ?Sized>(method: DensityMethod, n: usize, d: usize, rng: &mut R) -> Result<(Vec<Tensor>, f64)> {
    let (count, kind) = match method {
        DensityMethod::Exact => (d, ProbeKind::Coordinate),
        DensityMethod::Hutchinson { probes, kind } => (probes, kind),
    };
    ensure!(count >= 1, Config, "Hutchinson estimator needs at least one probe");
    let mut out = Vec::with_capacity(count);
    match kind {
        ProbeKind::Coordinate => {
            ensure!(count == d, Config, "coordinate probes require exactly d_a = {d} probes, got {count}");
            for j in 0..d {
                let mut t = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    t.set(r, j, 1.0);
                }
                out.push(t);
            }
            Ok((out, d as f64 / count as f64))
        }
        ProbeKind::Rademacher => {
            for _ in 0..count {
                let v = (0..n * d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                out.push(Tensor::matrix(n, d, v));
            }
            Ok((out, 1.0 / count as f64))
        }
        ProbeKind::Gaussian => {
            for _ in 0..count {
                out.push(crate::rng::normal_matrix(rng, n, d));
            }
            Ok((out, 1.0 / count as f64))
        }
    }
}

/// Velocity and per-row divergence estimate with respect to `x` at flow
/// time `u`, from forward-mode directional derivatives.
fn velocity_and_divergence(
    proxy: &VelocityProxy,
    s: &Tensor,
    x: &Tensor,
    u: f64,
    probes: &[Tensor],
    scale: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let (n, d_s) = (x.rows(), proxy.d_s());
    let input = proxy.input(s, x, u);
    let zs = Tensor::zeros(&[n, d_s]);
    let zu = Tensor::zeros(&[n, 1]);
    let tangents: Vec<Tensor> = probes.iter().map(|p| Tensor::concat_cols(&[&zs, p, &zu])).collect();
    let (v, jvps) = proxy.net.forward_jvp(&input, &tangents)?;
    let mut div = vec![0.0; n];
    for (p, jv) in probes.iter().zip(&jvps) {
        for (r, acc) in div.iter_mut().enumerate() {
            let e = p.row_slice(r);
            let j = jv.row_slice(r);
            *acc += e.iter().zip(j).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    for acc in div.iter_mut() {
        *acc *= scale;
    }
    Ok((v, div))
}

/// Per-row divergence of the velocity field in `x`.
pub fn divergence<R: Rng + ?Sized>(
    proxy: &VelocityProxy,
    s: &Tensor,
    x: &Tensor,
    u: f64,
    method: DensityMethod,
    rng: &mut R,
) -> Result<Vec<f64>> {
    proxy.check(s, x)?;
    let (probes, scale) = draw_probes(method, x.rows(), proxy.d_a(), rng)?;
    Ok(velocity_and_divergence(proxy, s, x, u, &probes, scale)?.1)
}

pub fn divergence_exact(proxy: &VelocityProxy, s: &Tensor, x: &Tensor, u: f64) -> Result<Vec<f64>> {
    // Coordinate probes consume no randomness.
    let mut rng = crate::rng::seeded(0);
    divergence(proxy, s, x, u, DensityMethod::Exact, &mut rng)
}

/// Integrates the field backward from the actions on the sampler's time
/// grid `t_k = k h`: `x_k = x_{k+1} - h v(x_{k+1}; s, t_k)`. Returns the
/// recovered noise `z_hat` and the accumulated `sum_k h * div v(x_k; s, t_k)`
/// per row.
pub fn reverse_transport<R: Rng + ?Sized>(
    proxy: &VelocityProxy,
    states: &Tensor,
    actions: &Tensor,
    method: DensityMethod,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    proxy.check(states, actions)?;
    let steps = proxy.steps();
    let h = 1.0 / steps as f64;
    let mut x = actions.clone();
    let mut acc = vec![0.0; actions.rows()];
    for k in (0..steps).rev() {
        let t = k as f64 * h;
        let v = proxy.velocity(states, &x, t)?;
        x = x.zip_map(&v, |xi, vi| xi - h * vi);
        let (probes, scale) = draw_probes(method, x.rows(), proxy.d_a(), rng)?;
        let (_, div) = velocity_and_divergence(proxy, states, &x, t, &probes, scale)?;
        for (a, d) in acc.iter_mut().zip(&div) {
            *a += h * d;
        }
    }
    Ok((x, acc))
}

/// `log p(a | s) = log N(z_hat; 0, I) - sum_k h div v`, clamped. Rows whose
/// transport produced a non-finite value get the lower clamp.
pub fn log_density<R: Rng + ?Sized>(
    proxy: &VelocityProxy,
    states: &Tensor,
    actions: &Tensor,
    method: DensityMethod,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (z, acc) = reverse_transport(proxy, states, actions, method, rng)?;
    let d = proxy.d_a() as f64;
    Ok((0..z.rows())
        .map(|r| {
            let sq: f64 = z.row_slice(r).iter().map(|v| v * v).sum();
            let lp = -0.5 * sq - 0.5 * d * (2.0 * PI).ln() - acc[r];
            if lp.is_finite() {
                lp.clamp(-LOG_DENSITY_CLAMP, LOG_DENSITY_CLAMP)
            } else {
                -LOG_DENSITY_CLAMP
            }
        })
        .collect())
}

fn tagged(values: Vec<f64>, method: DensityMethod) -> Vec<DensityEstimate> {
    values.into_iter().map(|log_density| DensityEstimate { log_density, method }).collect()
}

pub fn log_density_exact(proxy: &VelocityProxy, states: &Tensor, actions: &Tensor) -> Result<Vec<DensityEstimate>> {
    let mut rng = crate::rng::seeded(0);
    Ok(tagged(log_density(proxy, states, actions, DensityMethod::Exact, &mut rng)?, DensityMethod::Exact))
}

pub fn log_density_hutchinson<R: Rng + ?Sized>(
    proxy: &VelocityProxy,
    states: &Tensor,
    actions: &Tensor,
    probes: usize,
    kind: ProbeKind,
    rng: &mut R,
) -> Result<Vec<DensityEstimate>> {
    let method = DensityMethod::Hutchinson { probes, kind };
    Ok(tagged(log_density(proxy, states, actions, method, rng)?, method))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::euler_sample;
    use crate::nn::Mlp;
    use crate::rng::{normal_matrix, seeded};

    fn affine_proxy(d_s: usize, d_a: usize, steps: usize, seed: u64) -> VelocityProxy {
        let mut rng = seeded(seed);
        let net = Mlp::new(&[d_s + d_a + 1, d_a], false, &mut rng).unwrap();
        VelocityProxy::from_net(net, d_s, d_a, steps).unwrap()
    }

    #[test]
    fn affine_field_matches_closed_form() {
        // v = W^T [s, x, u] + b, so each reverse step is x <- (I - h A) x - h (..)
        // and the divergence is the trace of the x-block of W.
        let (d_s, d_a, steps) = (2, 3, 5);
        let proxy = affine_proxy(d_s, d_a, steps, 11);
        let w = &proxy.net.params()[0];
        let b = &proxy.net.params()[1];
        let mut rng = seeded(1);
        let s = normal_matrix(&mut rng, 4, d_s);
        let a = normal_matrix(&mut rng, 4, d_a);
        let got = log_density_exact(&proxy, &s, &a).unwrap();
        let h = 1.0 / steps as f64;
        let trace: f64 = (0..d_a).map(|j| w.at(d_s + j, j)).sum();
        for r in 0..4 {
            let mut x: Vec<f64> = a.row_slice(r).to_vec();
            for k in (0..steps).rev() {
                let t = k as f64 * h;
                let mut inp = s.row_slice(r).to_vec();
                inp.extend_from_slice(&x);
                inp.push(t);
                let v: Vec<f64> = (0..d_a).map(|j| b.values()[j] + (0..inp.len()).map(|i| inp[i] * w.at(i, j)).sum::<f64>()).collect();
                for j in 0..d_a {
                    x[j] -= h * v[j];
                }
            }
            let sq: f64 = x.iter().map(|v| v * v).sum();
            let want = -0.5 * sq - 1.5 * (2.0 * PI).ln() - trace;
            assert!((got[r].log_density - want).abs() < 1e-10, "{} vs {want}", got[r].log_density);
            assert_eq!(got[r].method, DensityMethod::Exact);
        }
    }

    #[test]
    fn exact_divergence_matches_finite_differences() {
        let mut rng = seeded(2);
        let proxy = VelocityProxy::new(3, 2, &[16, 16], 10, &mut rng).unwrap();
        let s = normal_matrix(&mut rng, 5, 3);
        let x = normal_matrix(&mut rng, 5, 2);
        let div = divergence_exact(&proxy, &s, &x, 0.3).unwrap();
        let eps = 1e-5;
        for r in 0..5 {
            let mut fd = 0.0;
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.set(r, j, x.at(r, j) + eps);
                xm.set(r, j, x.at(r, j) - eps);
                let vp = proxy.velocity(&s, &xp, 0.3).unwrap();
                let vm = proxy.velocity(&s, &xm, 0.3).unwrap();
                fd += (vp.at(r, j) - vm.at(r, j)) / (2.0 * eps);
            }
            assert!((div[r] - fd).abs() < 1e-7, "{} vs {fd}", div[r]);
        }
    }

    #[test]
    fn coordinate_probes_reproduce_exact_bitwise() {
        let mut rng = seeded(4);
        let proxy = VelocityProxy::new(4, 2, &[16, 16], 10, &mut rng).unwrap();
        let s = normal_matrix(&mut rng, 6, 4);
        let a = normal_matrix(&mut rng, 6, 2);
        let exact = log_density_exact(&proxy, &s, &a).unwrap();
        let hutch = log_density_hutchinson(&proxy, &s, &a, 2, ProbeKind::Coordinate, &mut rng).unwrap();
        for (e, h) in exact.iter().zip(&hutch) {
            assert_eq!(e.log_density.to_bits(), h.log_density.to_bits());
        }
        assert!(log_density_hutchinson(&proxy, &s, &a, 3, ProbeKind::Coordinate, &mut rng).is_err());
    }

    #[test]
    fn hutchinson_is_unbiased() {
        let mut rng = seeded(8);
        let proxy = VelocityProxy::new(1, 3, &[16], 10, &mut rng).unwrap();
        let s = normal_matrix(&mut rng, 1, 1);
        let x = normal_matrix(&mut rng, 1, 3);
        let exact = divergence_exact(&proxy, &s, &x, 0.5).unwrap()[0];
        for kind in [ProbeKind::Rademacher, ProbeKind::Gaussian] {
            let m = DensityMethod::Hutchinson { probes: 4000, kind };
            let est = divergence(&proxy, &s, &x, 0.5, m, &mut rng).unwrap()[0];
            assert!((est - exact).abs() < 0.05 * exact.abs().max(1.0), "{kind:?}: {est} vs {exact}");
        }
    }

    #[test]
    fn estimates_are_clamped() {
        let mut rng = seeded(9);
        let mut proxy = VelocityProxy::new(1, 2, &[8], 10, &mut rng).unwrap();
        for p in proxy.net.params_mut() {
            *p = p.map(|v| v * 50.0);
        }
        let s = normal_matrix(&mut rng, 20, 1);
        let a = normal_matrix(&mut rng, 20, 2).map(|v| v * 30.0);
        for e in log_density_exact(&proxy, &s, &a).unwrap() {
            assert!(e.log_density.abs() <= LOG_DENSITY_CLAMP);
        }
    }

    #[test]
    fn zero_field_is_standard_normal() {
        let mut rng = seeded(10);
        let mut proxy = VelocityProxy::new(1, 2, &[8], 10, &mut rng).unwrap();
        for p in proxy.net.params_mut() {
            *p = p.map(|_| 0.0);
        }
        let s = normal_matrix(&mut rng, 3, 1);
        let z = normal_matrix(&mut rng, 3, 2);
        assert_eq!(euler_sample(&proxy, &s, &z).unwrap(), z);
        let lp = log_density_exact(&proxy, &s, &z).unwrap();
        for r in 0..3 {
            let sq: f64 = z.row_slice(r).iter().map(|v| v * v).sum();
            assert!((lp[r].log_density - (-0.5 * sq - (2.0 * PI).ln())).abs() < 1e-12);
        }
    }
}
