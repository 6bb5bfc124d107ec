use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Shape of the penalty weight as a function of `x = beta_hat / eps`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightShape {
    /// `1 - x`.
    #[default]
    Linear,
    /// `1 - ln(x^2 + 1) / ln 2`.
    Concave,
    /// `1 - ln(x^(1/2) + 1) / ln 2`.
    Convex,
}

impl WeightShape {
    pub fn kappa(self) -> Option<f64> {
        match self {
            WeightShape::Linear => None,
            WeightShape::Concave => Some(2.0),
            WeightShape::Convex => Some(0.5),
        }
    }
}

/// `max(0, 1 - exp(logbeta - logeps))`.
pub fn penalty_weight(logbeta: f64, logeps: f64) -> f64 {
    (1.0 - (logbeta - logeps).exp()).max(0.0)
}

pub fn penalty_weight_variant(logbeta: f64, logeps: f64, shape: WeightShape) -> f64 {
    match shape.kappa() {
        None => penalty_weight(logbeta, logeps),
        Some(k) => {
            let xk = (k * (logbeta - logeps)).exp();
            (1.0 - xk.ln_1p() / std::f64::consts::LN_2).max(0.0)
        }
    }
}

/// How the per-sample density threshold is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsScheme {
    /// Minimum stored log-density over the whole dataset.
    DatasetWide,
    /// Each sample uses the stored log-density of its own dataset pair.
    #[default]
    BatchAdaptive,
    /// Minimum log-density over the current mini-batch.
    BatchWide,
}

impl EpsScheme {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dataset-wide" | "dataset_wide" => EpsScheme::DatasetWide,
            "batch-adaptive" | "batch_adaptive" => EpsScheme::BatchAdaptive,
            "batch-wide" | "batch_wide" => EpsScheme::BatchWide,
            other => return Err(crate::Error::Config(format!("unknown eps scheme {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            EpsScheme::DatasetWide => "dataset-wide",
            EpsScheme::BatchAdaptive => "batch-adaptive",
            EpsScheme::BatchWide => "batch-wide",
        }
    }
}

/// Per-sample log-thresholds for a batch whose pairs have log-densities
/// `batch_logdens`. `dataset_logdens` is the full stored column and is only
/// consulted by the dataset-wide scheme.
pub fn epsilon_threshold(scheme: EpsScheme, dataset_logdens: Option<&[f64]>, batch_logdens: Option<&[f64]>) -> Result<Vec<f64>> {
    let batch = batch_logdens.ok_or_else(|| crate::Error::Contract("batch has no log-density column".into()))?;
    ensure!(!batch.is_empty(), Contract, "empty batch");
    Ok(match scheme {
        EpsScheme::DatasetWide => {
            let col = dataset_logdens.ok_or_else(|| crate::Error::Contract("dataset-wide threshold needs the stored density column".into()))?;
            ensure!(!col.is_empty(), Contract, "empty density column");
            vec![min(col); batch.len()]
        }
        EpsScheme::BatchWide => vec![min(batch); batch.len()],
        EpsScheme::BatchAdaptive => batch.to_vec(),
    })
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}
