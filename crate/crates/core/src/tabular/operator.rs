//! The penalized evaluation operator, its fixed point by iteration and in closed form.

use serde::{Deserialize, Serialize};

use super::linalg::Lu;
use super::mdp::{ProxyTable, TabularMdp, TabularPolicy, NEG_SENTINEL};
use crate::error::{ensure, Error, Result};

/// Treatment of cells outside the behavior support that carry a positive weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OffSupport {
    /// Pin them to `NEG_SENTINEL`.
    #[default]
    Sentinel,
    /// Ablation: back them up without any penalty.
    Unpenalized,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Cell {
    Backup(f64),
    Pinned,
}

fn check_shapes(mdp: &TabularMdp, pi: &TabularPolicy, beta: &TabularPolicy, proxy: &ProxyTable) -> Result<()> {
    let n = mdp.cells();
    ensure!(
        pi.probs.len() == n && beta.probs.len() == n && proxy.w.len() == n && pi.n_actions == mdp.n_actions && beta.n_actions == mdp.n_actions,
        Dimension,
        "policy, behavior and proxy tables must have {n} cells"
    );
    Ok(())
}

/// Per-cell branch: backup minus a penalty, or pinned.
fn classify(mdp: &TabularMdp, pi: &TabularPolicy, beta: &TabularPolicy, proxy: &ProxyTable, alpha: f64, off: OffSupport) -> Result<Vec<Cell>> {
    check_shapes(mdp, pi, beta, proxy)?;
    ensure!(alpha >= 0.0 && alpha.is_finite(), Contract, "alpha must be finite and non-negative");
    let mut cells = Vec::with_capacity(mdp.cells());
    for i in 0..mdp.cells() {
        let (w, p, b) = (proxy.w[i], pi.probs[i], beta.probs[i]);
        let cell = if alpha == 0.0 {
            Cell::Backup(0.0)
        } else if w == 0.0 {
            if b == 0.0 && p > 0.0 {
                return Err(Error::Numeric(format!(
                    "indeterminate cell (s={}, a={}): zero behavior density with zero weight and positive policy mass",
                    i / mdp.n_actions,
                    i % mdp.n_actions
                )));
            }
            Cell::Backup(0.0)
        } else if b > 0.0 {
            Cell::Backup(0.5 * alpha * w * p / b)
        } else {
            match off {
                OffSupport::Sentinel => Cell::Pinned,
                OffSupport::Unpenalized => Cell::Backup(0.0),
            }
        };
        cells.push(cell);
    }
    Ok(cells)
}

/// `(T^pi Q)(s,a) = r(s,a) + gamma * E_{s'} E_{a'~pi} Q(s',a')`.
pub fn policy_backup(q: &[f64], mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    ensure!(q.len() == mdp.cells() && pi.probs.len() == mdp.cells(), Dimension, "value table must have {} cells", mdp.cells());
    let v: Vec<f64> = (0..mdp.n_states)
        .map(|s| pi.row(s).iter().zip(&q[s * mdp.n_actions..(s + 1) * mdp.n_actions]).map(|(&p, &x)| if p == 0.0 { 0.0 } else { p * x }).sum())
        .collect();
    Ok((0..mdp.cells())
        .map(|i| {
            let next = &mdp.p[i * mdp.n_states..(i + 1) * mdp.n_states];
            mdp.r[i] + mdp.gamma * next.iter().zip(&v).map(|(p, x)| p * x).sum::<f64>()
        })
        .collect())
}

fn apply_cells(q: &[f64], mdp: &TabularMdp, pi: &TabularPolicy, cells: &[Cell]) -> Result<Vec<f64>> {
    let mut out = policy_backup(q, mdp, pi)?;
    for (o, c) in out.iter_mut().zip(cells) {
        match c {
            Cell::Backup(pen) => *o -= pen,
            Cell::Pinned => *o = NEG_SENTINEL,
        }
    }
    Ok(out)
}

/// One application of the penalized operator: `T^pi Q - (alpha/2) w pi / beta`
/// on the behavior support, `NEG_SENTINEL` off it. With `alpha = 0` the
/// penalty is absent and the result is `T^pi Q` everywhere.
pub fn fac_operator_apply(q: &[f64], mdp: &TabularMdp, pi: &TabularPolicy, beta: &TabularPolicy, proxy: &ProxyTable, alpha: f64) -> Result<Vec<f64>> {
    fac_operator_apply_with(q, mdp, pi, beta, proxy, alpha, OffSupport::Sentinel)
}

pub fn fac_operator_apply_with(
    q: &[f64],
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    beta: &TabularPolicy,
    proxy: &ProxyTable,
    alpha: f64,
    off: OffSupport,
) -> Result<Vec<f64>> {
    let cells = classify(mdp, pi, beta, proxy, alpha, off)?;
    apply_cells(q, mdp, pi, &cells)
}

/// Penalty vector `(alpha/2) w pi / beta`; zero where the operator does not subtract one.
pub fn penalty_vector(mdp: &TabularMdp, pi: &TabularPolicy, beta: &TabularPolicy, proxy: &ProxyTable, alpha: f64) -> Result<Vec<f64>> {
    Ok(classify(mdp, pi, beta, proxy, alpha, OffSupport::Sentinel)?
        .into_iter()
        .map(|c| match c {
            Cell::Backup(p) => p,
            Cell::Pinned => 0.0,
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedPoint {
    pub q: Vec<f64>,
    pub iterations: usize,
    /// `||Q_{k+1} - Q_k||_inf` per iteration.
    pub residuals: Vec<f64>,
}

impl FixedPoint {
    /// Successive residual ratios, skipping steps whose previous residual is
    /// below `floor` (there rounding noise dominates the ratio).
    pub fn contraction_ratios(&self, floor: f64) -> Vec<f64> {
        self.residuals.windows(2).filter(|w| w[0] > floor).map(|w| w[1] / w[0]).collect()
    }

    /// A-posteriori bound on the distance to the true fixed point,
    /// `gamma / (1 - gamma) * last residual`.
    pub fn error_bound(&self, gamma: f64) -> f64 {
        self.residuals.last().map_or(f64::INFINITY, |r| gamma / (1.0 - gamma) * r)
    }
}

pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 1_000_000;

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sup_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Iterates the operator from zero until the sup-norm step is below `tol`.
pub fn fixed_point_iterate(mdp: &TabularMdp, pi: &TabularPolicy, beta: &TabularPolicy, proxy: &ProxyTable, alpha: f64, tol: f64) -> Result<FixedPoint> {
    fixed_point_iterate_from(&vec![0.0; mdp.cells()], mdp, pi, beta, proxy, alpha, tol)
}

pub fn fixed_point_iterate_from(
    q0: &[f64],
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    beta: &TabularPolicy,
    proxy: &ProxyTable,
    alpha: f64,
    tol: f64,
) -> Result<FixedPoint> {
    check_shapes(mdp, pi, beta, proxy)?;
    ensure!(pi.is_support_constrained(beta), Contract, "policy puts mass outside the behavior support");
    ensure!(tol > 0.0, Contract, "tolerance must be positive");
    ensure!(q0.len() == mdp.cells(), Dimension, "initial table must have {} cells", mdp.cells());
    let cells = classify(mdp, pi, beta, proxy, alpha, OffSupport::Sentinel)?;
    let mut q = q0.to_vec();
    let mut residuals = Vec::new();
    for k in 1..=MAX_ITERATIONS {
        let next = apply_cells(&q, mdp, pi, &cells)?;
        let res = sup_diff(&next, &q);
        ensure!(res.is_finite(), Numeric, "iteration diverged at step {k}");
        residuals.push(res);
        q = next;
        if res < tol {
            return Ok(FixedPoint { q, iterations: k, residuals });
        }
    }
    Err(Error::Numeric(format!("no convergence within {MAX_ITERATIONS} iterations")))
}

/// Row-major `P^pi[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')`.
pub fn transition_matrix(mdp: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let (ns, na, n) = (mdp.n_states, mdp.n_actions, mdp.cells());
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for s2 in 0..ns {
            let p = mdp.p[i * ns + s2];
            for a2 in 0..na {
                m[i * n + s2 * na + a2] = p * pi.probs[s2 * na + a2];
            }
        }
    }
    m
}

fn system(mdp: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let n = mdp.cells();
    let mut a = transition_matrix(mdp, pi);
    for (k, v) in a.iter_mut().enumerate() {
        *v = if k / n == k % n { 1.0 } else { 0.0 } - mdp.gamma * *v;
    }
    a
}

/// `(I - gamma P^pi)^{-1}`, row-major.
pub fn resolvent(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    Lu::factor(&system(mdp, pi), mdp.cells())?.inverse()
}

/// Unpenalized action values `(I - gamma P^pi)^{-1} R`.
pub fn policy_value(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    ensure!(pi.probs.len() == mdp.cells(), Dimension, "policy table must have {} cells", mdp.cells());
    Lu::factor(&system(mdp, pi), mdp.cells())?.solve(&mdp.r)
}

/// Solves `Q = R - pen + gamma P^pi Q` directly, with pinned rows replaced by
/// `Q = NEG_SENTINEL`.
pub fn closed_form_fixed_point(mdp: &TabularMdp, pi: &TabularPolicy, beta: &TabularPolicy, proxy: &ProxyTable, alpha: f64) -> Result<Vec<f64>> {
    closed_form_with(mdp, pi, beta, proxy, alpha, OffSupport::Sentinel)
}

pub fn closed_form_with(mdp: &TabularMdp, pi: &TabularPolicy, beta: &TabularPolicy, proxy: &ProxyTable, alpha: f64, off: OffSupport) -> Result<Vec<f64>> {
    let cells = classify(mdp, pi, beta, proxy, alpha, off)?;
    let n = mdp.cells();
    let mut a = system(mdp, pi);
    let mut rhs = Vec::with_capacity(n);
    for (i, c) in cells.iter().enumerate() {
        match c {
            Cell::Backup(pen) => rhs.push(mdp.r[i] - pen),
            Cell::Pinned => {
                a[i * n..(i + 1) * n].iter_mut().enumerate().for_each(|(j, v)| *v = if i == j { 1.0 } else { 0.0 });
                rhs.push(NEG_SENTINEL);
            }
        }
    }
    Lu::factor(&a, n)?.solve(&rhs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OccupancyReport {
    /// `max |(Q^pi - Qbar) - M pen|` over supported cells, `M` the resolvent.
    pub identity_error: f64,
    /// `max |row sum of M - 1/(1-gamma)|`.
    pub row_sum_error: f64,
    /// Scale of the compared quantities, `max(1, |Q^pi|_inf)`.
    pub scale: f64,
}

/// Checks that the gap between unpenalized and penalized values is the
/// resolvent applied to the penalty vector.
pub fn occupancy_related_check(mdp: &TabularMdp, pi: &TabularPolicy, beta: &TabularPolicy, proxy: &ProxyTable, alpha: f64) -> Result<OccupancyReport> {
    let n = mdp.cells();
    let m = resolvent(mdp, pi)?;
    let pen = penalty_vector(mdp, pi, beta, proxy, alpha)?;
    let qpi = policy_value(mdp, pi)?;
    let qbar = closed_form_fixed_point(mdp, pi, beta, proxy, alpha)?;
    let mut identity_error: f64 = 0.0;
    for i in 0..n {
        if qbar[i] == NEG_SENTINEL {
            continue;
        }
        let mp: f64 = (0..n).map(|j| m[i * n + j] * pen[j]).sum();
        identity_error = identity_error.max(((qpi[i] - qbar[i]) - mp).abs());
    }
    let target = 1.0 / (1.0 - mdp.gamma);
    let row_sum_error = (0..n).map(|i| (m[i * n..(i + 1) * n].iter().sum::<f64>() - target).abs()).fold(0.0, f64::max);
    Ok(OccupancyReport { identity_error, row_sum_error, scale: sup_norm(&qpi).max(1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tabular::mdp::random_instance;

    fn two_by_two() -> (TabularMdp, TabularPolicy, TabularPolicy, ProxyTable) {
        let mdp = TabularMdp::new(2, 2, vec![0.5, 0.5, 1.0, 0.0, 0.25, 0.75, 0.0, 1.0], vec![1.0, 0.0, 0.5, 2.0], 0.9).unwrap();
        let pi = TabularPolicy::new(2, 2, vec![0.6, 0.4, 0.3, 0.7]).unwrap();
        let beta = TabularPolicy::new(2, 2, vec![0.8, 0.2, 0.5, 0.5]).unwrap();
        // cell (0,1) is the only low-density pair: w = 1 - 0.1/0.4 = 0.75
        let proxy = ProxyTable::new(vec![0.9, 0.1, 0.5, 0.5], 0.4).unwrap();
        (mdp, pi, beta, proxy)
    }

    #[test]
    fn hand_computed_low_density_pair() {
        let (mdp, pi, beta, proxy) = two_by_two();
        let q = [1.0, 2.0, 3.0, 4.0];
        let out = fac_operator_apply(&q, &mdp, &pi, &beta, &proxy, 0.5).unwrap();
        // V(0) = 0.6*1 + 0.4*2 = 1.4, V(1) = 0.3*3 + 0.7*4 = 3.7
        // T(0,1) = 0 + 0.9 * (1.0 * 1.4) = 1.26; penalty = 0.25 * 0.75 * 0.4 / 0.2 = 0.375
        assert!((out[1] - (1.26 - 0.375)).abs() < 1e-15);
        // T(0,0) = 1 + 0.9 * (0.5*1.4 + 0.5*3.7) = 3.295
        assert!((out[0] - 3.295).abs() < 1e-15);
    }

    #[test]
    fn inactive_weights_or_zero_alpha_give_plain_backup() {
        let (mdp, pi, beta, proxy) = two_by_two();
        let q = [0.3, -1.0, 2.0, 0.5];
        let plain = policy_backup(&q, &mdp, &pi).unwrap();
        assert_eq!(fac_operator_apply(&q, &mdp, &pi, &beta, &ProxyTable::inactive(4), 1.0).unwrap(), plain);
        assert_eq!(fac_operator_apply(&q, &mdp, &pi, &beta, &proxy, 0.0).unwrap(), plain);
    }

    #[test]
    fn zero_discount_converges_in_one_step() {
        let (mut mdp, pi, beta, proxy) = two_by_two();
        mdp.gamma = 0.0;
        let fp = fixed_point_iterate(&mdp, &pi, &beta, &proxy, 0.5, 1e-10).unwrap();
        // the second sweep only confirms the first
        assert_eq!(fp.iterations, 2);
        let expect = [1.0, -0.375, 0.5, 2.0];
        for (a, b) in fp.q.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let m = resolvent(&mdp, &pi).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[i * 4 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn indeterminate_cell_is_flagged() {
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 1.0], 0.5).unwrap();
        let pi = TabularPolicy::new(1, 2, vec![0.5, 0.5]).unwrap();
        let beta = TabularPolicy::new(1, 2, vec![1.0, 0.0]).unwrap();
        let proxy = ProxyTable::inactive(2);
        assert!(fac_operator_apply(&[0.0, 0.0], &mdp, &pi, &beta, &proxy, 1.0).is_err());
    }

    #[test]
    fn off_support_cells_are_pinned_and_iteration_needs_support() {
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 1.0], 0.5).unwrap();
        let beta = TabularPolicy::new(1, 2, vec![1.0, 0.0]).unwrap();
        let proxy = ProxyTable::new(vec![1.0, 0.0], 0.5).unwrap();
        let pi = TabularPolicy::new(1, 2, vec![1.0, 0.0]).unwrap();
        let out = fac_operator_apply(&[0.0, 0.0], &mdp, &pi, &beta, &proxy, 1.0).unwrap();
        assert_eq!(out[1], NEG_SENTINEL);
        let bad = TabularPolicy::uniform(1, 2);
        assert!(fixed_point_iterate(&mdp, &bad, &beta, &proxy, 1.0, 1e-10).is_err());
    }

    #[test]
    fn closed_form_matches_iteration_and_occupancy_identity() {
        let mut rng = seeded(11);
        for gamma in [0.5, 0.9, 0.99] {
            let inst = random_instance(&mut rng, 4, 3, gamma).unwrap();
            let it = fixed_point_iterate(&inst.mdp, &inst.pi, &inst.beta, &inst.proxy, inst.alpha, 1e-10).unwrap();
            let cf = closed_form_fixed_point(&inst.mdp, &inst.pi, &inst.beta, &inst.proxy, inst.alpha).unwrap();
            assert!(sup_diff(&it.q, &cf) < 1e-8);
            let occ = occupancy_related_check(&inst.mdp, &inst.pi, &inst.beta, &inst.proxy, inst.alpha).unwrap();
            assert!(occ.identity_error < 1e-10 * occ.scale, "{occ:?}");
            assert!(occ.row_sum_error < 1e-10 / (1.0 - gamma), "{occ:?}");
        }
    }

    #[test]
    fn deterministic_chain_resolvent_sums() {
        // 3-state cycle, one action: P^pi is a permutation, so both row and
        // column sums are the geometric series.
        let mdp = TabularMdp::new(3, 1, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0], vec![0.0; 3], 0.9).unwrap();
        let pi = TabularPolicy::uniform(3, 1);
        let m = resolvent(&mdp, &pi).unwrap();
        for c in 0..3 {
            let col: f64 = (0..3).map(|r| m[r * 3 + c]).sum();
            assert!((col - 10.0).abs() < 1e-10);
        }
    }
}
