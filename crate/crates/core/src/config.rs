//! Flat `key = value` run configuration (TOML syntax, no tables).
//!
//! Every key is optional; unset keys keep the defaults of the experiment that
//! consumes the file.
//!
//! | key | meaning |
//! |-----|---------|
//! | `experiment` | `density-study`, `bandit-compare`, `tabular-verify`, `train-fac`, `finetune-fac` |
//! | `seed` | master seed |
//! | `data` | dataset file (binary or `.jsonl`) |
//! | `generator`, `n` | `bandit` or `gmm2d` and its size, used when `data` is unset |
//! | `out` | output directory |
//! | `alpha`, `lambda`, `gamma`, `rho` | penalty, distillation, discount, target EMA |
//! | `eps_scheme` | `dataset-wide`, `batch-adaptive`, `batch-wide` |
//! | `weight_shape` | `linear`, `concave`, `convex` |
//! | `aggregation` | `min` or `mean` over target critics |
//! | `q_norm` | normalize the actor's Q term |
//! | `steps`, `batch_size`, `lr`, `log_every` | actor-critic schedule |
//! | `widths` | hidden widths shared by actor, critics and proxy |
//! | `T` | Euler steps of the flow proxy |
//! | `proxy_steps`, `proxy_batch_size`, `proxy_lr` | proxy schedule |
//! | `density`, `probes`, `probe_kind` | `exact` or `hutchinson` divergence |
//! | `checkpoint_every` | checkpoint interval in steps (0 = final only) |
//! | `finetune_steps`, `env_steps` | online fine-tuning schedule |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fac::{Aggregation, EpsScheme, FacConfig, WeightShape};
use crate::flowmatch::{DensityMethod, ProbeKind};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Option<String>,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub generator: Option<String>,
    pub n: Option<usize>,
    pub out: Option<PathBuf>,

    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub eps_scheme: Option<String>,
    pub weight_shape: Option<String>,
    pub aggregation: Option<String>,
    pub q_norm: Option<bool>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub log_every: Option<usize>,
    pub widths: Option<Vec<usize>>,
    #[serde(rename = "T")]
    pub flow_steps: Option<usize>,
    pub proxy_steps: Option<usize>,
    pub proxy_batch_size: Option<usize>,
    pub proxy_lr: Option<f64>,
    pub density: Option<String>,
    pub probes: Option<usize>,
    pub probe_kind: Option<String>,

    pub checkpoint_every: Option<usize>,
    pub finetune_steps: Option<usize>,
    pub env_steps: Option<usize>,
}

fn parse_shape(s: &str) -> Result<WeightShape> {
    match s {
        "linear" => Ok(WeightShape::Linear),
        "concave" => Ok(WeightShape::Concave),
        "convex" => Ok(WeightShape::Convex),
        other => Err(Error::Config(format!("unknown weight shape {other:?}"))),
    }
}

fn parse_probe_kind(s: &str) -> Result<ProbeKind> {
    match s {
        "rademacher" => Ok(ProbeKind::Rademacher),
        "gaussian" => Ok(ProbeKind::Gaussian),
        "coordinate" => Ok(ProbeKind::Coordinate),
        other => Err(Error::Config(format!("unknown probe kind {other:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overlays the set keys onto `cfg` and validates the result.
    pub fn apply_fac(&self, cfg: &mut FacConfig) -> Result<()> {
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => { $( if let Some(v) = self.$src { $dst = v; } )* };
        }
        set!(alpha => cfg.alpha, lambda => cfg.lambda, gamma => cfg.gamma, rho => cfg.rho, q_norm => cfg.q_norm,
             steps => cfg.steps, batch_size => cfg.batch_size, lr => cfg.lr, log_every => cfg.log_every,
             flow_steps => cfg.proxy.flow_steps, proxy_steps => cfg.proxy.train_steps,
             proxy_batch_size => cfg.proxy.batch_size, proxy_lr => cfg.proxy.lr);
        if let Some(s) = &self.eps_scheme {
            cfg.eps_scheme = EpsScheme::parse(s)?;
        }
        if let Some(s) = &self.weight_shape {
            cfg.weight_shape = parse_shape(s)?;
        }
        if let Some(s) = &self.aggregation {
            cfg.aggregation = Aggregation::parse(s)?;
        }
        if let Some(w) = &self.widths {
            cfg.actor_hidden = w.clone();
            cfg.critic_hidden = w.clone();
            cfg.proxy.hidden = w.clone();
        }
        match (self.density.as_deref(), self.probes, self.probe_kind.as_deref()) {
            (None | Some("exact"), None, None) => {
                if self.density.is_some() {
                    cfg.density = DensityMethod::Exact;
                }
            }
            (Some("hutchinson"), probes, kind) => {
                cfg.density = DensityMethod::Hutchinson {
                    probes: probes.unwrap_or(8),
                    kind: kind.map(parse_probe_kind).transpose()?.unwrap_or(ProbeKind::Rademacher),
                };
            }
            (Some(other), _, _) if other != "exact" && other != "hutchinson" => return Err(Error::Config(format!("unknown density method {other:?}"))),
            _ => return Err(Error::Config("probes/probe_kind require density = \"hutchinson\"".into())),
        }
        cfg.validate()
    }
}
