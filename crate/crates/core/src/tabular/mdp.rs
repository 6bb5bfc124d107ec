//! Explicit finite MDPs, policies and proxy tables, plus a seeded instance generator.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Finite stand-in for minus infinity.
pub const NEG_SENTINEL: f64 = -1e9;
const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P(s'|s,a)` at `(s * A + a) * S + s'`.
    pub p: Vec<f64>,
    /// `r(s,a)` at `s * A + a`.
    pub r: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, p: Vec<f64>, r: Vec<f64>, gamma: f64) -> Result<Self> {
        ensure!(n_states > 0 && n_actions > 0, Contract, "empty state or action set");
        ensure!(p.len() == n_states * n_actions * n_states, Dimension, "transition table has {} entries", p.len());
        ensure!(r.len() == n_states * n_actions, Dimension, "reward table has {} entries", r.len());
        ensure!((0.0..1.0).contains(&gamma), Contract, "discount {gamma} outside [0, 1)");
        ensure!(r.iter().all(|v| v.is_finite()), Contract, "non-finite reward");
        for (i, row) in p.chunks(n_states).enumerate() {
            ensure!(row.iter().all(|&v| v >= 0.0), Contract, "negative transition probability in row {i}");
            let s: f64 = row.iter().sum();
            ensure!((s - 1.0).abs() <= ROW_TOL, Contract, "transition row {i} sums to {s}");
        }
        Ok(Self { n_states, n_actions, p, r, gamma })
    }

    pub fn cells(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn idx(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let k = self.idx(s, a) * self.n_states;
        &self.p[k..k + self.n_states]
    }
}

/// `pi(a|s)` stored row-major by state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        ensure!(probs.len() == n_states * n_actions, Dimension, "policy table has {} entries", probs.len());
        for (s, row) in probs.chunks(n_actions).enumerate() {
            ensure!(row.iter().all(|&v| v >= 0.0), Contract, "negative probability in state {s}");
            let t: f64 = row.iter().sum();
            ensure!((t - 1.0).abs() <= 1e-9, Contract, "policy row {s} sums to {t}");
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Zero wherever `beta` is zero.
    pub fn is_support_constrained(&self, beta: &TabularPolicy) -> bool {
        self.probs.iter().zip(&beta.probs).all(|(&p, &b)| b > 0.0 || p == 0.0)
    }

    /// Largest per-state probability mass on actions outside `beta`'s support.
    pub fn off_support_mass(&self, beta: &TabularPolicy) -> f64 {
        (0..self.n_states)
            .map(|s| self.row(s).iter().zip(beta.row(s)).filter(|(_, &b)| b == 0.0).map(|(&p, _)| p).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Tabular behavior proxy with threshold `eps` and weights `max(0, 1 - beta_hat/eps)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyTable {
    pub beta_hat: Vec<f64>,
    pub eps: f64,
    pub w: Vec<f64>,
}

impl ProxyTable {
    pub fn new(beta_hat: Vec<f64>, eps: f64) -> Result<Self> {
        ensure!(eps > 0.0 && eps.is_finite(), Contract, "threshold must be positive, got {eps}");
        ensure!(beta_hat.iter().all(|&b| b >= 0.0 && b.is_finite()), Contract, "proxy table must be non-negative");
        let w = beta_hat.iter().map(|&b| (1.0 - b / eps).max(0.0)).collect();
        Ok(Self { beta_hat, eps, w })
    }

    /// A proxy whose weights are all zero.
    pub fn inactive(cells: usize) -> Self {
        Self { beta_hat: vec![1.0; cells], eps: 1.0, w: vec![0.0; cells] }
    }
}

/// One random verification problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularInstance {
    pub mdp: TabularMdp,
    pub beta: TabularPolicy,
    pub proxy: ProxyTable,
    /// Support-constrained evaluation policy with full support on `beta`'s support.
    pub pi: TabularPolicy,
    pub alpha: f64,
}

fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let t: f64 = g.iter().sum();
    g.iter().map(|v| v / t).collect()
}

/// Row of `n` probabilities on the `true` positions of `support`, bounded away from zero.
fn supported_row<R: Rng + ?Sized>(rng: &mut R, support: &[bool]) -> Vec<f64> {
    let raw: Vec<f64> = support.iter().map(|&on| if on { rng.random_range(0.2..1.0) } else { 0.0 }).collect();
    let t: f64 = raw.iter().sum();
    raw.iter().map(|v| v / t).collect()
}

/// Dirichlet(1) transition rows, `U[0,1]` rewards, and a behavior policy with
/// at least one zero-support action somewhere. The proxy shares `beta`'s
/// support and its threshold is the median positive proxy entry, so both
/// weight branches occur.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, max_states: usize, max_actions: usize, gamma: f64) -> Result<TabularInstance> {
    ensure!(max_states >= 1 && max_actions >= 2, Contract, "need at least one state and two actions");
    let ns = rng.random_range(1..=max_states);
    let na = rng.random_range(2..=max_actions);
    let mut p = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        p.extend(dirichlet_ones(rng, ns));
    }
    // Renormalize exactly to keep rows within the 1e-12 tolerance.
    for row in p.chunks_mut(ns) {
        let t: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= t);
    }
    let r = (0..ns * na).map(|_| rng.random::<f64>()).collect();
    let mdp = TabularMdp::new(ns, na, p, r, gamma)?;

    let forced = rng.random_range(0..ns);
    let mut beta = Vec::with_capacity(ns * na);
    let mut pi = Vec::with_capacity(ns * na);
    let mut beta_hat = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let zeros = if s == forced { rng.random_range(1..na) } else { rng.random_range(0..na) };
        let mut support = vec![true; na];
        let mut off = 0;
        while off < zeros {
            let a = rng.random_range(0..na);
            if support[a] {
                support[a] = false;
                off += 1;
            }
        }
        let b = supported_row(rng, &support);
        let bh: Vec<f64> = b.iter().map(|&v| if v > 0.0 { v * (0.3 * crate::rng::normal(rng)).exp() } else { 0.0 }).collect();
        let t: f64 = bh.iter().sum();
        beta_hat.extend(bh.iter().map(|v| v / t));
        pi.extend(supported_row(rng, &support));
        beta.extend(b);
    }
    let mut positive: Vec<f64> = beta_hat.iter().copied().filter(|&v| v > 0.0).collect();
    positive.sort_by(f64::total_cmp);
    let eps = positive[positive.len() / 2];
    Ok(TabularInstance {
        mdp,
        beta: TabularPolicy::new(ns, na, beta)?,
        proxy: ProxyTable::new(beta_hat, eps)?,
        pi: TabularPolicy::new(ns, na, pi)?,
        alpha: rng.random_range(0.1..2.0),
    })
}
