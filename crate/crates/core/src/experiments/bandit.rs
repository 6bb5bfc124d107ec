//! Learned-Q comparison on the two-mode bandit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{is_log_ratios, train_cql, train_svr, CqlConfig, SvrConfig};
use crate::bczoo::BcConfig;
use crate::envs::{bandit_true_q, make_bandit_dataset, BanditDataSpec, OfflineDataset, BANDIT_STATE};
use crate::error::Result;
use crate::fac::{train_offline, Aggregation, CriticPair, EpsScheme, FacConfig, OfflineRun, OneStepActor};
use crate::flowmatch::ProxyConfig;
use crate::nn::Tensor;
use crate::rng::seeded;

/// Inter-mode region where the data has little support.
pub const GAP_REGION: (f64, f64) = (-0.2, 0.2);
/// The preferred mode and the window counted as "on" it.
pub const HIGH_MODE: f64 = -0.5;
pub const HIGH_MODE_RADIUS: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditCompareConfig {
    pub n_data: usize,
    pub seed: u64,
    pub fac: FacConfig,
    pub cql: CqlConfig,
    pub svr: SvrConfig,
    /// Distillation weights of the weak and strong FQL variants.
    pub fql_weak_lambda: f64,
    pub fql_strong_lambda: f64,
    pub actor_samples: usize,
    pub q_grid: usize,
}

const NET: [usize; 2] = [64, 64];

/// Desk-scale FAC settings for the bandit: `gamma = 0` so the critic
/// regresses the reward, min aggregation, batch-adaptive threshold.
pub fn bandit_fac_config() -> FacConfig {
    FacConfig {
        alpha: 0.5,
        lambda: 0.1,
        gamma: 0.0,
        eps_scheme: EpsScheme::BatchAdaptive,
        aggregation: Aggregation::Min,
        steps: 3000,
        batch_size: 64,
        lr: 1e-3,
        actor_hidden: NET.to_vec(),
        critic_hidden: NET.to_vec(),
        proxy: ProxyConfig { hidden: NET.to_vec(), flow_steps: 10, train_steps: 3000, batch_size: 128, lr: 1e-3 },
        log_every: 100,
        ..FacConfig::default()
    }
}

impl Default for BanditCompareConfig {
    fn default() -> Self {
        let fac = bandit_fac_config();
        Self {
            n_data: 1000,
            seed: 0,
            cql: CqlConfig {
                alpha: 0.3,
                steps: fac.steps,
                batch_size: fac.batch_size,
                lr: fac.lr,
                actor_hidden: NET.to_vec(),
                critic_hidden: NET.to_vec(),
                log_every: fac.log_every,
                ..CqlConfig::default()
            },
            svr: SvrConfig {
                alpha: 1.0,
                steps: fac.steps,
                batch_size: fac.batch_size,
                lr: fac.lr,
                actor_hidden: NET.to_vec(),
                critic_hidden: NET.to_vec(),
                proxy: BcConfig { hidden: NET.to_vec(), train_steps: 3000, batch_size: 128, lr: 1e-3 },
                log_every: fac.log_every,
                ..SvrConfig::default()
            },
            fac,
            fql_weak_lambda: 1.0,
            fql_strong_lambda: 10.0,
            actor_samples: 1000,
            q_grid: 201,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// Fraction of actor samples within `HIGH_MODE_RADIUS` of `HIGH_MODE`.
    pub high_mode_frac: f64,
    /// Fraction of actor samples inside the gap region.
    pub gap_frac: f64,
    /// Mean of learned minus true Q over grid points in the gap region.
    pub gap_q_error: f64,
    /// Mean learned Q over grid points in the gap region.
    pub gap_q: f64,
    /// Mean true Q over the same points.
    pub gap_true_q: f64,
    /// Mean squared error of the learned Q against the true Q at dataset actions.
    pub id_mse: f64,
    pub mean_action: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditReport {
    pub methods: Vec<MethodReport>,
    /// Largest importance ratio at dataset actions over all SVR training batches.
    pub svr_is_ratio_max: f64,
    /// Largest importance ratio of the final SVR actor over the action grid.
    pub svr_grid_ratio_max: f64,
    pub svr_clip: f64,
    /// `(action, ratio)` of the final SVR actor, unclipped.
    pub svr_ratio_curve: Vec<(f64, f64)>,
    /// `(action, true Q, learned Q per method)` rows, methods in report order.
    pub q_curves: Vec<(f64, f64, Vec<f64>)>,
    /// Final actor samples per method, in report order.
    pub actor_samples: Vec<Vec<f64>>,
}

impl BanditReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
}

fn states(n: usize) -> Tensor {
    Tensor::repeat_row(&BANDIT_STATE, n)
}

/// Mean of the online critics along the action grid.
/// Fraction of `actions` within `HIGH_MODE_RADIUS` of `HIGH_MODE`.
pub fn high_mode_fraction(actions: &[f64]) -> f64 {
    actions.iter().filter(|a| (*a - HIGH_MODE).abs() < HIGH_MODE_RADIUS).count() as f64 / actions.len().max(1) as f64
}

/// High-mode fraction of `n` actor samples at the bandit state.
pub fn actor_high_mode_fraction(actor: &OneStepActor, n: usize, seed: u64) -> Result<f64> {
    let acts = actor.sample(&states(n), &mut seeded(seed))?.into_values();
    Ok(high_mode_fraction(&acts))
}

pub fn learned_q_curve(critics: &CriticPair, xs: &[f64]) -> Result<Vec<f64>> {
    critics.q_mean(&states(xs.len()), &Tensor::matrix(xs.len(), 1, xs.to_vec()))
}

pub fn summarize(method: &str, critics: &CriticPair, actions: &[f64], data: &OfflineDataset, xs: &[f64]) -> Result<MethodReport> {
    let q = learned_q_curve(critics, xs)?;
    let in_gap: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] > GAP_REGION.0 && xs[i] < GAP_REGION.1).collect();
    let k = in_gap.len() as f64;
    let gap_q = in_gap.iter().map(|&i| q[i]).sum::<f64>() / k;
    let gap_true_q = in_gap.iter().map(|&i| bandit_true_q(xs[i])).sum::<f64>() / k;
    let da = data.actions();
    let dq = critics.q_mean(&data.states(), &da)?;
    let id_mse = dq.iter().zip(da.values()).map(|(q, a)| (q - bandit_true_q(*a)).powi(2)).sum::<f64>() / dq.len() as f64;
    let n = actions.len() as f64;
    Ok(MethodReport {
        method: method.into(),
        high_mode_frac: high_mode_fraction(actions),
        gap_frac: actions.iter().filter(|a| **a > GAP_REGION.0 && **a < GAP_REGION.1).count() as f64 / n,
        gap_q_error: gap_q - gap_true_q,
        gap_q,
        gap_true_q,
        id_mse,
        mean_action: actions.iter().sum::<f64>() / n,
    })
}

/// High-mode fraction etc. for a trained flow agent.
pub fn summarize_fac<R: Rng + ?Sized>(method: &str, run: &OfflineRun, data: &OfflineDataset, n: usize, xs: &[f64], rng: &mut R) -> Result<MethodReport> {
    let acts = run.agent.actor.sample(&states(n), rng)?.into_values();
    summarize(method, &run.agent.critics, &acts, data, xs)
}

pub fn bandit_dataset(n: usize, seed: u64) -> Result<OfflineDataset> {
    make_bandit_dataset(n, &BanditDataSpec::default(), seed, &mut seeded(seed))
}

/// Trains FAC, FQL (`alpha = 0`) at FAC's `lambda` and at a weak and a
/// strong `lambda`, CQL and SVR on one shared dataset, each from the same seed.
pub fn bandit_compare(cfg: &BanditCompareConfig) -> Result<BanditReport> {
    let data = bandit_dataset(cfg.n_data, cfg.seed)?;
    let xs = grid(cfg.q_grid);
    let mut methods = Vec::new();
    let mut curves: Vec<Vec<f64>> = Vec::new();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    let sample_states = states(cfg.actor_samples);

    let fql = crate::baselines::fql_config(&cfg.fac);
    let flow_runs = [
        ("fac", cfg.fac.clone()),
        ("fql", fql.clone()),
        ("fql-weak", FacConfig { lambda: cfg.fql_weak_lambda, ..fql.clone() }),
        ("fql-strong", FacConfig { lambda: cfg.fql_strong_lambda, ..fql }),
    ];
    for (name, fc) in flow_runs {
        let run = train_offline(&data, &fc, &mut seeded(cfg.seed + 1))?;
        let acts = run.agent.actor.sample(&sample_states, &mut seeded(cfg.seed + 2))?.into_values();
        methods.push(summarize(name, &run.agent.critics, &acts, &data, &xs)?);
        curves.push(learned_q_curve(&run.agent.critics, &xs)?);
        samples.push(acts);
    }

    let cql = train_cql(&data, &cfg.cql, &mut seeded(cfg.seed + 1))?;
    let acts = cql.actor.sample(&sample_states, &mut seeded(cfg.seed + 2))?.into_values();
    methods.push(summarize("cql", &cql.critics, &acts, &data, &xs)?);
    curves.push(learned_q_curve(&cql.critics, &xs)?);
    samples.push(acts);

    let svr = train_svr(&data, &cfg.svr, &mut seeded(cfg.seed + 1))?;
    let acts = svr.actor.sample(&sample_states, &mut seeded(cfg.seed + 2))?.into_values();
    methods.push(summarize("svr", &svr.critics, &acts, &data, &xs)?);
    curves.push(learned_q_curve(&svr.critics, &xs)?);
    samples.push(acts);
    let log_ratios = is_log_ratios(&svr.actor, &svr.proxy, &states(xs.len()), &Tensor::matrix(xs.len(), 1, xs.clone()), cfg.svr.k)?;
    let svr_ratio_curve: Vec<(f64, f64)> = xs.iter().zip(&log_ratios).map(|(&x, &l)| (x, l.exp())).collect();
    let svr_grid_ratio_max = svr_ratio_curve.iter().map(|c| c.1).fold(0.0, f64::max);

    let q_curves = xs.iter().enumerate().map(|(i, &x)| (x, bandit_true_q(x), curves.iter().map(|c| c[i]).collect())).collect();
    Ok(BanditReport {
        methods,
        svr_is_ratio_max: svr.is_ratio_max,
        svr_grid_ratio_max,
        svr_clip: cfg.svr.clip,
        svr_ratio_curve,
        q_curves,
        actor_samples: samples,
    })
}
