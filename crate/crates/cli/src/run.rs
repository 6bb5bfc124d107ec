use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fac_core::config::RunConfig;
use fac_core::envs::{make_bandit_dataset, make_gmm2d_dataset, BanditDataSpec, BanditEnv, OfflineDataset, BANDIT_STATE, GMM_STATE};
use fac_core::experiments::bandit::{actor_high_mode_fraction, bandit_fac_config, BanditCompareConfig};
use fac_core::experiments::density::{grid_mass, grid_points, points_tensor, DensityStudyConfig, GRID_HALF_WIDTH, GRID_RESOLUTION};
use fac_core::experiments::train::{load_policy, metrics_csv, resume_finetune, resume_train, run_finetune, run_train, CheckpointPlan, TrainOutcome};
use fac_core::fac::{FacConfig, OnlineConfig};
use fac_core::flowmatch::log_density;
use fac_core::nn::Checkpoint;
use fac_core::rng::seeded;
use fac_core::tabular::VerifyConfig;
use fac_core::Tensor;
use serde::Serialize;

use crate::report::{check, finish, provenance, write_csv, write_json, Check};
use crate::Common;

/// Clip bound the SVR importance ratio is expected to reach.
const SVR_CLIP_TARGET: f64 = 1e4;
const CONCENTRATION_SAMPLES: usize = 1000;
const MAX_CONCENTRATION_DROP: f64 = 0.05;

struct Ctx {
    rc: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn context(root: &Path, common: &Common, tag: &str) -> Result<Ctx> {
    let rc = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(e) = &rc.experiment {
        ensure!(e == tag, "config is for experiment {e:?}, not {tag:?}");
    }
    let seed = common.seed.or(rc.seed).unwrap_or(0);
    let out = common.out.clone().or_else(|| rc.out.clone()).unwrap_or_else(|| root.join(format!("{tag}-s{seed}")));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Ctx { rc, seed, out })
}

fn generate(kind: &str, n: usize, seed: u64) -> Result<OfflineDataset> {
    Ok(match kind {
        "bandit" => make_bandit_dataset(n, &BanditDataSpec::default(), seed, &mut seeded(seed))?,
        "gmm2d" => make_gmm2d_dataset(n, seed, &mut seeded(seed))?,
        other => bail!("unknown generator {other:?} (expected bandit or gmm2d)"),
    })
}

fn default_n(kind: &str) -> usize {
    if kind == "gmm2d" {
        10_000
    } else {
        1000
    }
}

/// `--data`, else the config's `data`, else the config's generator.
fn dataset(ctx: &Ctx, data: Option<PathBuf>) -> Result<OfflineDataset> {
    match data.or_else(|| ctx.rc.data.clone()) {
        Some(p) => OfflineDataset::load_any(&p).with_context(|| format!("loading dataset {}", p.display())),
        None => {
            let kind = ctx.rc.generator.as_deref().unwrap_or("bandit");
            generate(kind, ctx.rc.n.unwrap_or_else(|| default_n(kind)), ctx.seed)
        }
    }
}

pub fn gen_dataset(root: &Path, common: &Common, kind: &str, n: usize) -> Result<bool> {
    let rc = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = common.seed.or(rc.seed).unwrap_or(0);
    let path = common.out.clone().unwrap_or_else(|| root.join(format!("{kind}_n{n}_s{seed}.bin")));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let data = generate(kind, n, seed)?;
    data.save_any(&path).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(true)
}

pub fn density_study(root: &Path, common: &Common) -> Result<bool> {
    let ctx = context(root, common, "density-study")?;
    let rc = &ctx.rc;
    let mut cfg = DensityStudyConfig { seed: ctx.seed, ..DensityStudyConfig::default() };
    if let Some(n) = rc.n {
        cfg.n_data = n;
    }
    if let Some(t) = rc.flow_steps {
        cfg.flow.flow_steps = t;
    }
    if let Some(s) = rc.proxy_steps {
        cfg.flow.train_steps = s;
    }
    if let Some(b) = rc.proxy_batch_size {
        cfg.flow.batch_size = b;
    }
    if let Some(lr) = rc.proxy_lr {
        cfg.flow.lr = lr;
    }
    for bc in [&mut cfg.gaussian, &mut cfg.cvae, &mut cfg.ddpm] {
        if let Some(s) = rc.steps {
            bc.train_steps = s;
        }
        if let Some(b) = rc.batch_size {
            bc.batch_size = b;
        }
        if let Some(lr) = rc.lr {
            bc.lr = lr;
        }
        if let Some(w) = &rc.widths {
            bc.hidden = w.clone();
        }
    }
    if let Some(w) = &rc.widths {
        cfg.flow.hidden = w.clone();
    }
    let report = fac_core::experiments::density::run_density_study(&cfg)?;

    #[derive(Serialize)]
    struct ModelRow<'a> {
        model: &'a str,
        quantity: &'a str,
        coverage: f64,
        contrast_gap: f64,
        argmax_x: f64,
        argmax_y: f64,
        heldout_error: f64,
        grid_mass: f64,
        train_loss: f64,
        error: &'a str,
    }
    let model_rows = report.models.iter().map(|m| ModelRow {
        model: &m.model,
        quantity: &m.quantity,
        coverage: m.coverage,
        contrast_gap: m.contrast_gap,
        argmax_x: m.argmax[0],
        argmax_y: m.argmax[1],
        heldout_error: m.heldout_error,
        grid_mass: m.grid_mass,
        train_loss: m.train_loss,
        error: m.error.as_deref().unwrap_or(""),
    });
    let mut files = vec![
        write_csv(&ctx.out, "models.csv", model_rows)?,
        write_csv(&ctx.out, "grid.csv", &report.grid)?,
        write_csv(&ctx.out, "fidelity.csv", &report.fidelity)?,
    ];
    for m in &cfg.models {
        let rows = report.samples.iter().filter(|s| &s.model == m);
        files.push(write_csv(&ctx.out, &format!("samples_{m}.csv"), rows)?);
    }

    let mut checks = Vec::new();
    for m in report.models.iter().filter(|m| m.error.is_some()) {
        checks.push(check(&format!("{}_trained", m.model), false, f64::NAN, "no training error"));
    }
    if let Some(flow) = report.model("flow") {
        checks.push(check("flow_heldout_error", flow.heldout_error < 0.5, flow.heldout_error, "< 0.5 nats"));
        checks.push(check("flow_grid_mass", (0.9..=1.1).contains(&flow.grid_mass), flow.grid_mass, "in [0.9, 1.1]"));
        if let Some(ddpm) = report.model("ddpm") {
            let d = flow.contrast_gap - ddpm.contrast_gap;
            checks.push(check("flow_contrast_exceeds_ddpm", d > 0.0, d, "flow gap - ddpm gap > 0"));
        }
    }
    if let Some(g) = report.model("gaussian") {
        let r = g.argmax[0].hypot(g.argmax[1]);
        checks.push(check("gaussian_argmax_central", r < 0.25, r, "< 0.25"));
    }
    if let (Some(t3), Some(t10)) = (report.fidelity_at(3), report.fidelity_at(10)) {
        checks.push(check("coverage_t10_ge_t3", t10.coverage >= t3.coverage, t10.coverage - t3.coverage, ">= 0"));
        checks.push(check("heldout_error_t10_lt_t3", t10.heldout_error < t3.heldout_error, t10.heldout_error - t3.heldout_error, "< 0"));
    }
    let metrics = serde_json::json!({ "models": report.models, "fidelity": report.fidelity });
    finish(&ctx.out, provenance("density-study", ctx.seed, &cfg)?, checks, files, metrics)
}

pub fn bandit_compare(root: &Path, common: &Common) -> Result<bool> {
    let ctx = context(root, common, "bandit-compare")?;
    let rc = &ctx.rc;
    let mut cfg = BanditCompareConfig { seed: ctx.seed, ..BanditCompareConfig::default() };
    if let Some(n) = rc.n {
        cfg.n_data = n;
    }
    rc.apply_fac(&mut cfg.fac)?;
    let (cql, svr) = (&mut cfg.cql, &mut cfg.svr);
    if let Some(s) = rc.steps {
        cql.steps = s;
        svr.steps = s;
    }
    if let Some(s) = rc.proxy_steps {
        svr.proxy.train_steps = s;
    }
    if let Some(b) = rc.batch_size {
        cql.batch_size = b;
        svr.batch_size = b;
    }
    if let Some(w) = &rc.widths {
        cql.actor_hidden = w.clone();
        cql.critic_hidden = w.clone();
        svr.actor_hidden = w.clone();
        svr.critic_hidden = w.clone();
        svr.proxy.hidden = w.clone();
    }
    let report = fac_core::experiments::bandit::bandit_compare(&cfg)?;

    let names: Vec<&str> = report.methods.iter().map(|m| m.method.as_str()).collect();
    let mut header = vec!["action".to_string(), "true_q".to_string()];
    header.extend(names.iter().map(|n| n.to_string()));
    let q_rows = report.q_curves.iter().map(|(a, t, qs)| {
        let mut r = vec![a.to_string(), t.to_string()];
        r.extend(qs.iter().map(f64::to_string));
        r
    });
    #[derive(Serialize)]
    struct SampleRow<'a> {
        method: &'a str,
        action: f64,
    }
    #[derive(Serialize)]
    struct RatioRow {
        action: f64,
        ratio: f64,
    }
    let samples = names.iter().zip(&report.actor_samples).flat_map(|(m, acts)| acts.iter().map(move |&a| SampleRow { method: m, action: a }));
    let files = vec![
        write_csv(&ctx.out, "methods.csv", &report.methods)?,
        write_records(&ctx.out, "q_curves.csv", &header, q_rows)?,
        write_csv(&ctx.out, "actor_samples.csv", samples)?,
        write_csv(&ctx.out, "svr_ratio.csv", report.svr_ratio_curve.iter().map(|&(action, ratio)| RatioRow { action, ratio }))?,
    ];

    let m = |n: &str| report.method(n).with_context(|| format!("report lacks method {n}"));
    let (fac, fql, cql) = (m("fac")?, m("fql")?, m("cql")?);
    let checks = vec![
        check("fac_high_mode_concentration", fac.high_mode_frac >= 0.8, fac.high_mode_frac, ">= 0.8"),
        check("fac_gap_error_below_fql", fac.gap_q_error < fql.gap_q_error, fac.gap_q_error - fql.gap_q_error, "fac - fql < 0"),
        check("cql_gap_underestimates", cql.gap_q < cql.gap_true_q, cql.gap_q - cql.gap_true_q, "learned - true < 0"),
        check("svr_ratio_reaches_clip", report.svr_grid_ratio_max >= SVR_CLIP_TARGET, report.svr_grid_ratio_max, ">= 1e4"),
    ];
    let metrics = serde_json::json!({
        "methods": report.methods,
        "svr_is_ratio_max": report.svr_is_ratio_max,
        "svr_grid_ratio_max": report.svr_grid_ratio_max,
        "svr_clip": report.svr_clip,
    });
    finish(&ctx.out, provenance("bandit-compare", ctx.seed, &cfg)?, checks, files, metrics)
}

pub fn tabular_verify(root: &Path, common: &Common, instances: Option<usize>) -> Result<bool> {
    let ctx = context(root, common, "tabular-verify")?;
    let mut cfg = VerifyConfig { seed: ctx.seed, ..VerifyConfig::default() };
    if let Some(n) = instances.or(ctx.rc.n) {
        cfg.instances = n;
    }
    let report = fac_core::tabular::run_tabular_verify(&cfg)?;
    #[derive(Serialize)]
    struct Row {
        gamma: f64,
        factor: f64,
    }
    let files = vec![
        write_json(&ctx.out, "report.json", &report)?,
        write_csv(&ctx.out, "contraction.csv", report.contraction.iter().map(|&(gamma, factor)| Row { gamma, factor }))?,
    ];
    let checks: Vec<Check> = report.properties.iter().map(|p| check(&p.name, p.passed, p.measured, format!("{:e}", p.tolerance))).collect();
    finish(&ctx.out, provenance("tabular-verify", ctx.seed, &cfg)?, checks, files, serde_json::json!({ "instances": report.instances }))
}

fn plan(ctx: &Ctx, stop_after: Option<usize>) -> CheckpointPlan {
    CheckpointPlan { dir: ctx.out.join("checkpoints"), every: ctx.rc.checkpoint_every.unwrap_or(0), stop_after }
}

fn outcome_files(ctx: &Ctx, out: &TrainOutcome) -> Result<Vec<String>> {
    std::fs::write(ctx.out.join("metrics.csv"), metrics_csv(&out.metrics))?;
    let mut files = vec!["metrics.csv".to_string()];
    for p in &out.checkpoints {
        files.push(p.strip_prefix(&ctx.out).unwrap_or(p).display().to_string());
    }
    Ok(files)
}

fn finite_metrics_check(out: &TrainOutcome) -> Check {
    let last = out.metrics.last();
    let ok = last.is_none_or(|m| m.critic_loss.is_finite() && m.actor_loss.is_finite());
    check("finite_losses", ok, last.map_or(f64::NAN, |m| m.critic_loss), "finite")
}

pub fn train(root: &Path, common: &Common, data: Option<PathBuf>, resume: Option<PathBuf>, stop_after: Option<usize>) -> Result<bool> {
    let ctx = context(root, common, "train-fac")?;
    let data = dataset(&ctx, data)?;
    let plan = plan(&ctx, stop_after);
    let (out, cfg) = match resume {
        Some(ck) => {
            let cfg: FacConfig = Checkpoint::load(&ck)?.header_value("config")?;
            (resume_train(&data, &ck, &plan)?, cfg)
        }
        None => {
            let mut cfg = if data.meta().source == "bandit" { bandit_fac_config() } else { FacConfig::default() };
            ctx.rc.apply_fac(&mut cfg)?;
            (run_train(&data, &cfg, ctx.seed, &plan)?, cfg)
        }
    };
    let files = outcome_files(&ctx, &out)?;
    let metrics = serde_json::json!({ "step": out.step, "finished": out.finished, "final": out.metrics.last() });
    finish(&ctx.out, provenance("train-fac", ctx.seed, &cfg)?, vec![finite_metrics_check(&out)], files, metrics)
}

pub fn finetune(root: &Path, common: &Common, checkpoint: &Path, resume: bool, data: Option<PathBuf>, stop_after: Option<usize>) -> Result<bool> {
    let ctx = context(root, common, "finetune-fac")?;
    let plan = plan(&ctx, stop_after);
    let mut env = BanditEnv::default();
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut cfg: FacConfig = ck.header_value("config")?;
    let mut checks = Vec::new();
    let (out, before) = if resume {
        (resume_finetune(checkpoint, &mut env, &plan)?.0, None)
    } else {
        let (agent, _) = load_policy(checkpoint)?;
        ensure!(agent.d_s() == 1 && agent.d_a() == 1, "fine-tuning runs on the bandit; checkpoint has d_s={}, d_a={}", agent.d_s(), agent.d_a());
        ctx.rc.apply_fac(&mut cfg)?;
        let steps = ctx.rc.finetune_steps.unwrap_or(50_000);
        let online = OnlineConfig { steps, env_steps: ctx.rc.env_steps.unwrap_or(steps) };
        let replay = dataset(&ctx, data)?;
        let before = actor_high_mode_fraction(&agent.actor, CONCENTRATION_SAMPLES, ctx.seed + 2)?;
        (run_finetune(checkpoint, &replay, &mut env, &cfg, &online, ctx.seed, &plan)?.0, Some(before))
    };
    let after = actor_high_mode_fraction(&out.agent.actor, CONCENTRATION_SAMPLES, ctx.seed + 2)?;
    if let Some(b) = before {
        checks.push(check("high_mode_drop", b - after <= MAX_CONCENTRATION_DROP, b - after, "<= 0.05"));
    }
    checks.push(finite_metrics_check(&out));
    let files = outcome_files(&ctx, &out)?;
    let metrics = serde_json::json!({
        "step": out.step,
        "finished": out.finished,
        "high_mode_before": before,
        "high_mode_after": after,
        "final": out.metrics.last(),
    });
    finish(&ctx.out, provenance("finetune-fac", ctx.seed, &cfg)?, checks, files, metrics)
}

pub fn eval_density(root: &Path, common: &Common, checkpoint: &Path, data: Option<PathBuf>) -> Result<bool> {
    let ctx = context(root, common, "eval-density")?;
    let (_, proxy) = load_policy(checkpoint)?;
    let mut fc = FacConfig::default();
    ctx.rc.apply_fac(&mut fc)?;
    let method = fc.density;
    let (d_s, d_a) = (proxy.d_s(), proxy.d_a());

    enum Layout {
        Data,
        Grid,
        Line(Vec<f64>),
    }
    let (states, actions, layout) = match data.or_else(|| ctx.rc.data.clone()) {
        Some(p) => {
            let ds = OfflineDataset::load_any(&p).with_context(|| format!("loading dataset {}", p.display()))?;
            ensure!(ds.d_s() == d_s && ds.d_a() == d_a, "dataset dims ({}, {}) differ from the proxy's ({d_s}, {d_a})", ds.d_s(), ds.d_a());
            (ds.states(), ds.actions(), Layout::Data)
        }
        None if d_s == GMM_STATE.len() && d_a == 2 => {
            let pts = grid_points(GRID_RESOLUTION, GRID_HALF_WIDTH);
            (Tensor::repeat_row(&GMM_STATE, pts.len()), points_tensor(&pts), Layout::Grid)
        }
        None if d_s == BANDIT_STATE.len() && d_a == 1 => {
            let xs: Vec<f64> = (0..201).map(|i| -1.0 + i as f64 / 100.0).collect();
            (Tensor::repeat_row(&BANDIT_STATE, xs.len()), Tensor::matrix(xs.len(), 1, xs.clone()), Layout::Line(xs))
        }
        None => bail!("no default evaluation points for d_s={d_s}, d_a={d_a}; pass --data"),
    };
    let logp = log_density(&proxy, &states, &actions, method, &mut seeded(ctx.seed))?;

    let mut header = vec!["index".to_string()];
    header.extend((0..d_a).map(|j| format!("a{j}")));
    header.push("log_density".into());
    let rows = (0..logp.len()).map(|i| {
        let mut r = vec![i.to_string()];
        r.extend(actions.row_slice(i).iter().map(f64::to_string));
        r.push(logp[i].to_string());
        r
    });
    let files = vec![write_records(&ctx.out, "log_density.csv", &header, rows)?];
    let mass = match &layout {
        Layout::Grid => Some(grid_mass(&logp, GRID_RESOLUTION, GRID_HALF_WIDTH)),
        Layout::Line(xs) => Some(xs.windows(2).zip(logp.windows(2)).map(|(x, l)| 0.5 * (x[1] - x[0]) * (l[0].exp() + l[1].exp())).sum()),
        Layout::Data => None,
    };
    let finite = logp.iter().filter(|v| !v.is_finite()).count();
    let checks = vec![check("finite_log_densities", finite == 0, finite as f64, "0 non-finite")];
    let metrics = serde_json::json!({
        "points": logp.len(),
        "method": method.tag(),
        "mean_log_density": logp.iter().sum::<f64>() / logp.len().max(1) as f64,
        "integrated_mass": mass,
    });
    let config = serde_json::json!({ "checkpoint": checkpoint, "density": method.tag() });
    finish(&ctx.out, provenance("eval-density", ctx.seed, &config)?, checks, files, metrics)
}

fn write_records(dir: &Path, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(name.into())
}
