//! Four-mode isotropic Gaussian mixture in two dimensions, observed from a
//! single fixed state.

use rand::Rng;

use crate::envs::dataset::{DatasetMeta, OfflineDataset, Transition};
use crate::error::{ensure, Result};
use crate::rng::normal;

pub const GMM_STATE: [f64; 4] = [0.5, -0.5, 0.5, -0.5];
pub const GMM_MEANS: [[f64; 2]; 4] = [[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]];
pub const GMM_VAR: f64 = 0.008;

pub fn gmm_std() -> f64 {
    GMM_VAR.sqrt()
}

pub fn sample_gmm<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    let k = rng.random_range(0..4);
    let s = gmm_std();
    [GMM_MEANS[k][0] + s * normal(rng), GMM_MEANS[k][1] + s * normal(rng)]
}

/// Closed-form mixture log-density.
pub fn gmm_true_logpdf(a: &[f64]) -> f64 {
    let log_norm = -(2.0 * std::f64::consts::PI * GMM_VAR).ln();
    let terms: Vec<f64> = GMM_MEANS
        .iter()
        .map(|m| {
            let d2 = (a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2);
            (0.25f64).ln() + log_norm - d2 / (2.0 * GMM_VAR)
        })
        .collect();
    log_sum_exp(&terms)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Index of the nearest mixture mean.
pub fn nearest_mode(a: &[f64]) -> usize {
    let mut best = (f64::MAX, 0);
    for (k, m) in GMM_MEANS.iter().enumerate() {
        let d = (a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Fraction of points within `k` mixture standard deviations of some mean.
pub fn mode_coverage(points: &[[f64; 2]], k: f64) -> f64 {
    let r = k * gmm_std();
    let inside = points
        .iter()
        .filter(|p| GMM_MEANS.iter().any(|m| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt() < r))
        .count();
    inside as f64 / points.len() as f64
}

pub fn make_gmm2d_dataset<R: Rng + ?Sized>(n: usize, seed: u64, rng: &mut R) -> Result<OfflineDataset> {
    ensure!(n >= 1, Contract, "dataset size must be at least 1");
    let records = (0..n)
        .map(|_| {
            let a = sample_gmm(rng);
            Transition {
                state: GMM_STATE.to_vec(),
                action: a.to_vec(),
                reward: 0.0,
                next_state: GMM_STATE.to_vec(),
                terminal: true,
                log_density: None,
            }
        })
        .collect();
    let mut meta = DatasetMeta::new(4, 2, "gmm2d", seed);
    meta.extra.insert("component_var".into(), GMM_VAR.to_string());
    OfflineDataset::new(records, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn logpdf_at_mode_matches_direct_sum() {
        // Direct evaluation of (1/4) sum_i N(mu_1; mu_i, 0.008 I).
        let a = GMM_MEANS[0];
        let peak = 1.0 / (2.0 * std::f64::consts::PI * GMM_VAR);
        let mut density = 0.0;
        for m in GMM_MEANS {
            let d2: f64 = (a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2);
            density += 0.25 * peak * (-d2 / (2.0 * GMM_VAR)).exp();
        }
        assert!((gmm_true_logpdf(&a) - density.ln()).abs() < 1e-12);
        // cross terms are ~e^{-62.5}, so this is ln(peak / 4)
        assert!((gmm_true_logpdf(&a) - (peak / 4.0).ln()).abs() < 1e-12);
        assert!((density - 4.973_591_971_621_729).abs() < 1e-9);
    }

    #[test]
    fn density_integrates_to_one() {
        let n = 301;
        let h = 3.0 / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = [-1.5 + i as f64 * h, -1.5 + j as f64 * h];
                total += gmm_true_logpdf(&a).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 0.01, "integral {total}");
    }

    #[test]
    fn components_are_balanced_and_state_is_fixed() {
        let mut rng = seeded(9);
        let ds = make_gmm2d_dataset(10_000, 9, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for t in ds.records() {
            counts[nearest_mode(&t.action)] += 1;
            assert_eq!(t.state, GMM_STATE.to_vec());
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }
}
