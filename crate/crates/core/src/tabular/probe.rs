//! Policy improvement against the penalized fixed point, measuring mass on
//! actions the behavior policy never takes.

use serde::{Deserialize, Serialize};

use super::mdp::{ProxyTable, TabularMdp, TabularPolicy, NEG_SENTINEL};
use super::operator::{closed_form_with, OffSupport};
use crate::error::{ensure, Result};

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Projection restricted to unmasked coordinates; masked ones get zero.
pub fn project_simplex_masked(v: &[f64], masked: &[bool]) -> Vec<f64> {
    let free: Vec<f64> = v.iter().zip(masked).filter(|(_, &m)| !m).map(|(&x, _)| x).collect();
    if free.is_empty() {
        return project_simplex(v);
    }
    let mut p = project_simplex(&free).into_iter();
    masked.iter().map(|&m| if m { 0.0 } else { p.next().expect("length matches") }).collect()
}

/// Per state, `argmax_p <p, Q(s,.)> - lambda ||p - beta_hat(.|s)||^2` over the
/// simplex, i.e. the projection of `beta_hat + Q / (2 lambda)`. Cells holding
/// the sentinel are masked out.
pub fn improve_policy(q: &[f64], proxy: &ProxyTable, n_states: usize, n_actions: usize, lambda: f64) -> Result<TabularPolicy> {
    ensure!(lambda > 0.0, Contract, "lambda must be positive");
    let mut probs = Vec::with_capacity(q.len());
    for s in 0..n_states {
        let r = s * n_actions..(s + 1) * n_actions;
        let masked: Vec<bool> = q[r.clone()].iter().map(|&x| x <= 0.5 * NEG_SENTINEL).collect();
        let v: Vec<f64> = q[r.clone()].iter().zip(&proxy.beta_hat[r]).map(|(&x, &b)| b + x / (2.0 * lambda)).collect();
        probs.extend(project_simplex_masked(&v, &masked));
    }
    // Projection output sums to one up to rounding.
    for row in probs.chunks_mut(n_actions) {
        let t: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= t);
    }
    TabularPolicy::new(n_states, n_actions, probs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRow {
    pub lambda: f64,
    /// Largest per-state mass outside the behavior support over all rounds.
    pub off_support_mass: f64,
}

/// Alternates closed-form evaluation and improvement for `rounds` rounds per
/// `lambda`, starting from `beta`.
pub fn support_violation_probe(
    mdp: &TabularMdp,
    beta: &TabularPolicy,
    proxy: &ProxyTable,
    alpha: f64,
    lambdas: &[f64],
    rounds: usize,
    off: OffSupport,
) -> Result<Vec<ProbeRow>> {
    ensure!(
        proxy.beta_hat.iter().zip(&beta.probs).all(|(&h, &b)| b > 0.0 || h == 0.0),
        Contract,
        "proxy support must lie inside the behavior support"
    );
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut pi = beta.clone();
        let mut worst: f64 = 0.0;
        for _ in 0..rounds {
            let q = closed_form_with(mdp, &pi, beta, proxy, alpha, off)?;
            pi = improve_policy(&q, proxy, mdp.n_states, mdp.n_actions, lambda)?;
            worst = worst.max(pi.off_support_mass(beta));
        }
        out.push(ProbeRow { lambda, off_support_mass: worst });
    }
    Ok(out)
}
