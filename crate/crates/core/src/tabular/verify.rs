//! Seeded property suite over random instances, producing a JSON-ready report.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mdp::{random_instance, TabularInstance, NEG_SENTINEL};
use super::operator::{
    closed_form_fixed_point, fac_operator_apply, fixed_point_iterate, fixed_point_iterate_from, occupancy_related_check, policy_backup, policy_value,
    sup_norm, OffSupport,
};
use super::probe::support_violation_probe;
use crate::error::Result;
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_states: usize,
    pub max_actions: usize,
    /// Instance `i` uses `gammas[i % len]`.
    pub gammas: Vec<f64>,
    pub tol: f64,
    pub lambdas: Vec<f64>,
    pub improve_rounds: usize,
    /// Random initializations per instance for the uniqueness check.
    pub restarts: usize,
    /// Random value-table pairs per instance for the direct contraction check.
    pub pairs: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            max_states: 6,
            max_actions: 4,
            gammas: vec![0.5, 0.9, 0.99],
            tol: 1e-10,
            lambdas: vec![0.01, 0.1, 1.0, 10.0],
            improve_rounds: 10,
            restarts: 3,
            pairs: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub instances: usize,
    pub seed: u64,
    pub properties: Vec<PropertyResult>,
    /// Largest measured contraction factor per instance, paired with its discount.
    pub contraction: Vec<(f64, f64)>,
    pub all_passed: bool,
}

impl VerifyReport {
    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

#[derive(Default)]
struct Acc {
    contraction_excess: f64,
    pair_excess: f64,
    fixed_point_gap: f64,
    restart_excess: f64,
    unbiased_dev: f64,
    unbiased_bellman: f64,
    conservative_margin: f64,
    off_support: f64,
    ablation_off_support: f64,
    identity_rel: f64,
    row_sum_rel: f64,
    per_instance: Vec<(f64, f64)>,
}

/// Sup-norm floor below which successive-residual ratios are rounding noise.
const RATIO_FLOOR: f64 = 1e-6;

fn check_instance<R: Rng + ?Sized>(inst: &TabularInstance, cfg: &VerifyConfig, rng: &mut R, acc: &mut Acc) -> Result<()> {
    let TabularInstance { mdp, beta, proxy, pi, alpha } = inst;
    let (alpha, gamma, n) = (*alpha, mdp.gamma, mdp.cells());
    let fp = fixed_point_iterate(mdp, pi, beta, proxy, alpha, cfg.tol)?;
    let support: Vec<bool> = beta.probs.iter().map(|&b| b > 0.0).collect();
    let scale = fp.q.iter().zip(&support).filter(|(_, &s)| s).map(|(q, _)| q.abs()).fold(1.0, f64::max);

    let worst = fp.contraction_ratios(RATIO_FLOOR * scale).into_iter().fold(0.0, f64::max);
    acc.contraction_excess = acc.contraction_excess.max(worst - gamma);
    acc.per_instance.push((gamma, worst));
    for _ in 0..cfg.pairs {
        let q1: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let q2: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let t1 = fac_operator_apply(&q1, mdp, pi, beta, proxy, alpha)?;
        let t2 = fac_operator_apply(&q2, mdp, pi, beta, proxy, alpha)?;
        let d_in = sup_norm(&q1.iter().zip(&q2).map(|(a, b)| a - b).collect::<Vec<_>>());
        let d_out = sup_norm(&t1.iter().zip(&t2).map(|(a, b)| a - b).collect::<Vec<_>>());
        acc.pair_excess = acc.pair_excess.max(d_out / d_in - gamma);
    }

    let cf = closed_form_fixed_point(mdp, pi, beta, proxy, alpha)?;
    let gap = fp.q.iter().zip(&cf).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    acc.fixed_point_gap = acc.fixed_point_gap.max(gap);
    for _ in 0..cfg.restarts {
        let q0: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let other = fixed_point_iterate_from(&q0, mdp, pi, beta, proxy, alpha, cfg.tol)?;
        let d = other.q.iter().zip(&fp.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // both runs stop within their own error bound of the same point
        acc.restart_excess = acc.restart_excess.max(d - other.error_bound(gamma) - fp.error_bound(gamma));
    }

    let qpi = policy_value(mdp, pi)?;
    let backed = policy_backup(&cf, mdp, pi)?;
    for i in 0..n {
        if !support[i] {
            continue;
        }
        if proxy.w[i] == 0.0 {
            acc.unbiased_dev = acc.unbiased_dev.max((cf[i] - qpi[i]).abs());
            acc.unbiased_bellman = acc.unbiased_bellman.max((cf[i] - backed[i]).abs());
        } else {
            acc.conservative_margin = acc.conservative_margin.min(qpi[i] - cf[i]);
        }
    }
    for i in (0..n).filter(|&i| !support[i]) {
        // pinned pairs count as conservative too
        acc.conservative_margin = acc.conservative_margin.min(qpi[i] - cf[i]);
        debug_assert_eq!(cf[i], NEG_SENTINEL);
    }

    let occ = occupancy_related_check(mdp, pi, beta, proxy, alpha)?;
    acc.identity_rel = acc.identity_rel.max(occ.identity_error / occ.scale);
    acc.row_sum_rel = acc.row_sum_rel.max(occ.row_sum_error * (1.0 - gamma));

    for row in support_violation_probe(mdp, beta, proxy, alpha, &cfg.lambdas, cfg.improve_rounds, OffSupport::Sentinel)? {
        acc.off_support = acc.off_support.max(row.off_support_mass);
    }
    for row in support_violation_probe(mdp, beta, proxy, alpha, &cfg.lambdas, cfg.improve_rounds, OffSupport::Unpenalized)? {
        acc.ablation_off_support = acc.ablation_off_support.max(row.off_support_mass);
    }
    Ok(())
}

fn prop(name: &str, passed: bool, measured: f64, tolerance: f64, detail: &str) -> PropertyResult {
    PropertyResult { name: name.into(), passed, measured, tolerance, detail: detail.into() }
}

pub fn run_tabular_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut rng = seeded(cfg.seed);
    let mut acc = Acc { conservative_margin: f64::INFINITY, ..Acc::default() };
    for i in 0..cfg.instances {
        let gamma = cfg.gammas[i % cfg.gammas.len()];
        let inst = random_instance(&mut rng, cfg.max_states, cfg.max_actions, gamma)?;
        check_instance(&inst, cfg, &mut rng, &mut acc)?;
    }
    let properties = vec![
        prop(
            "contraction_iterates",
            acc.contraction_excess <= 1e-9,
            acc.contraction_excess,
            1e-9,
            "max over iterations of successive residual ratio minus gamma",
        ),
        prop("contraction_pairs", acc.pair_excess <= 1e-9, acc.pair_excess, 1e-9, "max over random table pairs of output/input sup distance minus gamma"),
        prop("fixed_point_closed_form", acc.fixed_point_gap < 1e-8, acc.fixed_point_gap, 1e-8, "sup-norm gap between iterated and solved fixed points"),
        prop(
            "fixed_point_unique",
            acc.restart_excess <= 1e-11,
            acc.restart_excess,
            1e-11,
            "max gap between fixed points from random starts minus the two runs' a-posteriori error bounds",
        ),
        prop(
            "unbiased_on_zero_weight",
            acc.unbiased_dev <= 1e-8,
            acc.unbiased_dev,
            1e-8,
            "max |Qbar - Q^pi| over supported pairs with w = 0",
        ),
        prop(
            "bellman_consistent_on_zero_weight",
            acc.unbiased_bellman <= 1e-8,
            acc.unbiased_bellman,
            1e-8,
            "max |Qbar - T^pi Qbar| over supported pairs with w = 0",
        ),
        prop(
            "conservative_on_positive_weight",
            acc.conservative_margin > 0.0,
            acc.conservative_margin,
            0.0,
            "min of Q^pi - Qbar over pairs with w > 0; must be positive",
        ),
        prop("occupancy_identity", acc.identity_rel <= 1e-10, acc.identity_rel, 1e-10, "max |(Q^pi - Qbar) - M pen| relative to max(1, |Q^pi|)"),
        prop("resolvent_row_sums", acc.row_sum_rel <= 1e-10, acc.row_sum_rel, 1e-10, "max |row sum of M - 1/(1-gamma)| times (1-gamma)"),
        prop("support_constrained_improvement", acc.off_support < 1e-6, acc.off_support, 1e-6, "max off-support mass of improved policies"),
        prop(
            "sentinel_ablation_leaks",
            acc.ablation_off_support > 1e-6,
            acc.ablation_off_support,
            1e-6,
            "max off-support mass with the sentinel disabled; must exceed the tolerance",
        ),
    ];
    let all_passed = properties.iter().all(|p| p.passed);
    Ok(VerifyReport { instances: cfg.instances, seed: cfg.seed, properties, contraction: acc.per_instance, all_passed })
}
