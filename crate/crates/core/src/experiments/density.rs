//! Behavior-cloning density comparison on the four-mode mixture, plus the
//! Euler step-count fidelity sweep for the flow proxy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bczoo::{cvae_elbo, cvae_fit, cvae_sample, ddpm_elbo, ddpm_fit, ddpm_sample, gaussian_fit, gaussian_logpdf, gaussian_sample, BcConfig};
use crate::bczoo::{CVAE_ELBO_SAMPLES, DDPM_ELBO_DRAWS};
use crate::envs::{gmm_true_logpdf, make_gmm2d_dataset, mode_coverage, sample_gmm, GMM_MEANS, GMM_STATE};
use crate::envs::OfflineDataset;
use crate::error::Result;
use crate::flowmatch::{euler_sample, log_density, train_proxy, DensityMethod, ProxyConfig, VelocityProxy};
use crate::nn::Tensor;
use crate::rng::{normal_matrix, seeded};

pub const GRID_HALF_WIDTH: f64 = 1.5;
pub const GRID_RESOLUTION: usize = 101;
/// Samples within this many mixture standard deviations of a mean count as covered.
pub const COVERAGE_RADIUS: f64 = 3.0;
/// Midpoints between adjacent mixture means.
pub const SADDLES: [[f64; 2]; 4] = [[0.0, -0.5], [0.0, 0.5], [-0.5, 0.0], [0.5, 0.0]];
const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityStudyConfig {
    pub n_data: usize,
    pub n_holdout: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub grid: usize,
    pub flow: ProxyConfig,
    pub gaussian: BcConfig,
    pub cvae: BcConfig,
    pub ddpm: BcConfig,
    pub ddpm_steps: usize,
    /// Euler step counts for the fidelity sweep.
    pub fidelity_steps: Vec<usize>,
    /// Which models to train; any of `flow`, `gaussian`, `cvae`, `ddpm`.
    pub models: Vec<String>,
}

impl Default for DensityStudyConfig {
    fn default() -> Self {
        let bc = BcConfig { hidden: vec![128, 128], train_steps: 4000, batch_size: 256, lr: 1e-3 };
        Self {
            n_data: 10_000,
            n_holdout: 1000,
            n_samples: 4000,
            seed: 0,
            grid: GRID_RESOLUTION,
            flow: ProxyConfig { hidden: vec![256, 256], flow_steps: 10, train_steps: 10_000, batch_size: 256, lr: 1e-3 },
            gaussian: BcConfig { hidden: vec![64, 64], train_steps: 2000, ..bc.clone() },
            cvae: bc.clone(),
            ddpm: bc,
            ddpm_steps: 50,
            fidelity_steps: vec![1, 3, 5, 10, 20],
            models: ["flow", "gaussian", "cvae", "ddpm"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    /// `log-density` or `elbo`.
    pub quantity: String,
    pub coverage: f64,
    /// Mean value at the mixture means minus mean value at the saddles.
    pub contrast_gap: f64,
    pub argmax: [f64; 2],
    /// Mean `|value - true log-density|` on held-out samples.
    pub heldout_error: f64,
    /// Riemann sum of `exp(value)` over the grid.
    pub grid_mass: f64,
    pub train_loss: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub steps: usize,
    pub coverage: f64,
    pub heldout_error: f64,
    pub grid_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x: f64,
    pub y: f64,
    pub value: f64,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub model: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityStudyReport {
    pub models: Vec<ModelReport>,
    pub fidelity: Vec<FidelityRow>,
    pub grid: Vec<GridRow>,
    pub samples: Vec<SampleRow>,
}

impl DensityStudyReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == name && m.error.is_none())
    }

    pub fn fidelity_at(&self, steps: usize) -> Option<&FidelityRow> {
        self.fidelity.iter().find(|f| f.steps == steps)
    }
}

/// Row-major `res x res` points spanning `[-half, half]^2`, `x` varying fastest.
pub fn grid_points(res: usize, half: f64) -> Vec<[f64; 2]> {
    let axis: Vec<f64> = (0..res).map(|i| -half + 2.0 * half * i as f64 / (res - 1) as f64).collect();
    axis.iter().flat_map(|&y| axis.iter().map(move |&x| [x, y])).collect()
}

pub fn points_tensor(pts: &[[f64; 2]]) -> Tensor {
    Tensor::matrix(pts.len(), 2, pts.iter().flatten().copied().collect())
}

fn states(n: usize) -> Tensor {
    Tensor::repeat_row(&GMM_STATE, n)
}

fn to_points(t: &Tensor) -> Vec<[f64; 2]> {
    t.values().chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Evaluates `f` over `pts` in chunks.
fn chunked(pts: &[[f64; 2]], mut f: impl FnMut(&Tensor, &Tensor) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pts.len());
    for c in pts.chunks(EVAL_CHUNK) {
        out.extend(f(&states(c.len()), &points_tensor(c))?);
    }
    Ok(out)
}

/// Riemann sum of `exp(values)` for values on `grid_points(res, half)`.
pub fn grid_mass(values: &[f64], res: usize, half: f64) -> f64 {
    let cell = (2.0 * half / (res - 1) as f64).powi(2);
    values.iter().map(|v| v.exp()).sum::<f64>() * cell
}

/// Summary metrics shared by all models, given a value oracle.
fn summarize(
    model: &str,
    quantity: &str,
    samples: &[[f64; 2]],
    grid: &[[f64; 2]],
    grid_values: &[f64],
    heldout: &[[f64; 2]],
    mut value: impl FnMut(&[[f64; 2]]) -> Result<Vec<f64>>,
    res: usize,
    train_loss: f64,
) -> Result<ModelReport> {
    let centres = value(&GMM_MEANS)?;
    let saddles = value(&SADDLES)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let best = grid_values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
    let held = value(heldout)?;
    let heldout_error = held.iter().zip(heldout).map(|(v, p)| (v - gmm_true_logpdf(p)).abs()).sum::<f64>() / held.len() as f64;
    Ok(ModelReport {
        model: model.into(),
        quantity: quantity.into(),
        coverage: mode_coverage(samples, COVERAGE_RADIUS),
        contrast_gap: mean(&centres) - mean(&saddles),
        argmax: grid[best],
        heldout_error,
        grid_mass: grid_mass(grid_values, res, GRID_HALF_WIDTH),
        train_loss,
        error: None,
    })
}

fn failed(model: &str, e: crate::Error) -> ModelReport {
    ModelReport {
        model: model.into(),
        quantity: String::new(),
        coverage: f64::NAN,
        contrast_gap: f64::NAN,
        argmax: [f64::NAN; 2],
        heldout_error: f64::NAN,
        grid_mass: f64::NAN,
        train_loss: f64::NAN,
        error: Some(e.to_string()),
    }
}

pub fn gmm_dataset(n: usize, seed: u64) -> Result<OfflineDataset> {
    make_gmm2d_dataset(n, seed, &mut seeded(seed))
}

pub fn heldout_points(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = seeded(seed ^ 0x5eed_0ff5);
    (0..n).map(|_| sample_gmm(&mut rng)).collect()
}

/// Log-density of a flow proxy at `pts`, with `steps` Euler steps.
pub fn flow_log_density(proxy: &VelocityProxy, pts: &[[f64; 2]]) -> Result<Vec<f64>> {
    let mut rng = seeded(0);
    chunked(pts, |s, a| log_density(proxy, s, a, DensityMethod::Exact, &mut rng))
}

pub fn flow_samples<R: Rng + ?Sized>(proxy: &VelocityProxy, n: usize, rng: &mut R) -> Result<Vec<[f64; 2]>> {
    let z = normal_matrix(rng, n, 2);
    Ok(to_points(&euler_sample(proxy, &states(n), &z)?))
}

/// Coverage, held-out error and grid mass of `proxy` at each step count,
/// sampling from the same noise every time.
pub fn fidelity_sweep(proxy: &VelocityProxy, steps: &[usize], n_samples: usize, heldout: &[[f64; 2]], res: usize, seed: u64) -> Result<Vec<FidelityRow>> {
    let z = normal_matrix(&mut seeded(seed), n_samples, 2);
    let grid = grid_points(res, GRID_HALF_WIDTH);
    steps
        .iter()
        .map(|&t| {
            let p = proxy.with_steps(t)?;
            let samples = to_points(&euler_sample(&p, &states(n_samples), &z)?);
            let held = flow_log_density(&p, heldout)?;
            let heldout_error = held.iter().zip(heldout).map(|(v, q)| (v - gmm_true_logpdf(q)).abs()).sum::<f64>() / held.len() as f64;
            Ok(FidelityRow { steps: t, coverage: mode_coverage(&samples, COVERAGE_RADIUS), heldout_error, grid_mass: grid_mass(&flow_log_density(&p, &grid)?, res, GRID_HALF_WIDTH) })
        })
        .collect()
}

/// Trains every configured model on one dataset and evaluates them on a
/// shared grid. A model whose training fails is reported and skipped.
pub fn run_density_study(cfg: &DensityStudyConfig) -> Result<DensityStudyReport> {
    let data = gmm_dataset(cfg.n_data, cfg.seed)?;
    let heldout = heldout_points(cfg.n_holdout, cfg.seed);
    let grid = grid_points(cfg.grid, GRID_HALF_WIDTH);
    let mut report = DensityStudyReport { models: Vec::new(), fidelity: Vec::new(), grid: Vec::new(), samples: Vec::new() };
    let push = |report: &mut DensityStudyReport, name: &str, r: Result<(ModelReport, Vec<f64>, Vec<[f64; 2]>)>| match r {
        Ok((m, values, samples)) => {
            report.grid.extend(grid.iter().zip(values).map(|(p, v)| GridRow { x: p[0], y: p[1], value: v, model: name.into() }));
            report.samples.extend(samples.into_iter().map(|p| SampleRow { model: name.into(), x: p[0], y: p[1] }));
            report.models.push(m);
        }
        Err(e) => report.models.push(failed(name, e)),
    };
    let wants = |m: &str| cfg.models.iter().any(|x| x == m);

    if wants("flow") {
        let mut proxy = None;
        let r = (|| {
            let (p, trace) = train_proxy(&data, &cfg.flow, &mut seeded(cfg.seed + 1))?;
            let samples = flow_samples(&p, cfg.n_samples, &mut seeded(cfg.seed + 2))?;
            let values = flow_log_density(&p, &grid)?;
            let m = summarize("flow", "log-density", &samples, &grid, &values, &heldout, |x| flow_log_density(&p, x), cfg.grid, tail_mean(&trace))?;
            proxy = Some(p);
            Ok((m, values, samples))
        })();
        push(&mut report, "flow", r);
        if let Some(p) = proxy {
            match fidelity_sweep(&p, &cfg.fidelity_steps, cfg.n_samples, &heldout, cfg.grid, cfg.seed + 3) {
                Ok(rows) => report.fidelity = rows,
                Err(e) => report.models.push(failed("flow-fidelity", e)),
            }
        }
    }
    if wants("gaussian") {
        let r = (|| {
            let (m, trace) = gaussian_fit(&data, &cfg.gaussian, &mut seeded(cfg.seed + 1))?;
            let samples = to_points(&gaussian_sample(&m, &states(cfg.n_samples), &mut seeded(cfg.seed + 2))?);
            let f = |x: &[[f64; 2]]| chunked(x, |s, a| gaussian_logpdf(&m, s, a));
            let values = f(&grid)?;
            Ok((summarize("gaussian", "log-density", &samples, &grid, &values, &heldout, f, cfg.grid, tail_mean(&trace))?, values, samples))
        })();
        push(&mut report, "gaussian", r);
    }
    if wants("cvae") {
        let r = (|| {
            let (m, trace) = cvae_fit(&data, &cfg.cvae, &mut seeded(cfg.seed + 1))?;
            let samples = to_points(&cvae_sample(&m, &states(cfg.n_samples), &mut seeded(cfg.seed + 2))?);
            let mut rng = seeded(cfg.seed + 4);
            let mut f = |x: &[[f64; 2]]| chunked(x, |s, a| cvae_elbo(&m, s, a, CVAE_ELBO_SAMPLES, &mut rng));
            let values = f(&grid)?;
            Ok((summarize("cvae", "elbo", &samples, &grid, &values, &heldout, f, cfg.grid, tail_mean(&trace))?, values, samples))
        })();
        push(&mut report, "cvae", r);
    }
    if wants("ddpm") {
        let r = (|| {
            let (m, trace) = ddpm_fit(&data, cfg.ddpm_steps, &cfg.ddpm, &mut seeded(cfg.seed + 1))?;
            let samples = to_points(&ddpm_sample(&m, &states(cfg.n_samples), &mut seeded(cfg.seed + 2))?);
            let mut rng = seeded(cfg.seed + 4);
            let mut f = |x: &[[f64; 2]]| chunked(x, |s, a| ddpm_elbo(&m, s, a, DDPM_ELBO_DRAWS, &mut rng));
            let values = f(&grid)?;
            Ok((summarize("ddpm", "elbo", &samples, &grid, &values, &heldout, f, cfg.grid, tail_mean(&trace))?, values, samples))
        })();
        push(&mut report, "ddpm", r);
    }
    Ok(report)
}

/// Mean of the last tenth of a loss trace.
fn tail_mean(trace: &[f64]) -> f64 {
    let k = (trace.len() / 10).max(1).min(trace.len().max(1));
    let tail = &trace[trace.len().saturating_sub(k)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}
