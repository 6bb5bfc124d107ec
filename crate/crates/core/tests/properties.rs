use fac_core::flowmatch::{euler_sample, log_density_exact, VelocityProxy};
use fac_core::rng::{normal_matrix, seeded};
use fac_core::tabular::*;
use fac_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn instance(seed: u64, gamma: f64) -> TabularInstance {
    random_instance(&mut seeded(seed), 5, 4, gamma).unwrap()
}

fn random_q(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_is_a_gamma_contraction(seed in 0u64..10_000, gi in 0usize..3) {
        let gamma = [0.5, 0.9, 0.99][gi];
        let inst = instance(seed, gamma);
        let n = inst.mdp.cells();
        let (q1, q2) = (random_q(seed + 1, n), random_q(seed + 2, n));
        let t1 = fac_operator_apply(&q1, &inst.mdp, &inst.pi, &inst.beta, &inst.proxy, inst.alpha).unwrap();
        let t2 = fac_operator_apply(&q2, &inst.mdp, &inst.pi, &inst.beta, &inst.proxy, inst.alpha).unwrap();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(d(&t1, &t2) <= gamma * d(&q1, &q2) + 1e-9);
    }

    #[test]
    fn closed_form_is_a_fixed_point_below_policy_value(seed in 0u64..10_000, gi in 0usize..3) {
        let gamma = [0.5, 0.9, 0.99][gi];
        let inst = instance(seed, gamma);
        let q = closed_form_fixed_point(&inst.mdp, &inst.pi, &inst.beta, &inst.proxy, inst.alpha).unwrap();
        let tq = fac_operator_apply(&q, &inst.mdp, &inst.pi, &inst.beta, &inst.proxy, inst.alpha).unwrap();
        let scale = 1.0 / (1.0 - gamma);
        for (a, b) in q.iter().zip(&tq) {
            prop_assert!((a - b).abs() <= 1e-9 * scale);
        }
        let qpi = policy_value(&inst.mdp, &inst.pi).unwrap();
        for i in 0..q.len() {
            if inst.beta.probs[i] > 0.0 {
                prop_assert!(q[i] <= qpi[i] + 1e-9 * scale);
            }
        }
    }

    #[test]
    fn improved_policies_stay_on_support(seed in 0u64..10_000, lambda in 0.01f64..10.0) {
        let inst = instance(seed, 0.9);
        let q = closed_form_fixed_point(&inst.mdp, &inst.pi, &inst.beta, &inst.proxy, inst.alpha).unwrap();
        let pi = improve_policy(&q, &inst.proxy, inst.mdp.n_states, inst.mdp.n_actions, lambda).unwrap();
        prop_assert!(pi.off_support_mass(&inst.beta) < 1e-6);
    }

    #[test]
    fn zero_field_density_is_standard_normal(seed in 0u64..1000, steps in 1usize..12) {
        let mut rng = seeded(seed);
        let mut proxy = VelocityProxy::new(1, 2, &[4], steps, &mut rng).unwrap();
        for p in proxy.net.params_mut() {
            *p = p.map(|_| 0.0);
        }
        let s = normal_matrix(&mut rng, 4, 1);
        let z = normal_matrix(&mut rng, 4, 2);
        prop_assert_eq!(euler_sample(&proxy, &s, &z).unwrap(), z.clone());
        let lp = log_density_exact(&proxy, &s, &z).unwrap();
        for r in 0..4 {
            let sq: f64 = z.row_slice(r).iter().map(|v| v * v).sum();
            prop_assert!((lp[r].log_density + 0.5 * sq + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_density_is_a_shifted_normal(seed in 0u64..1000, c0 in -1.0f64..1.0, c1 in -1.0f64..1.0) {
        let mut rng = seeded(seed);
        let mut proxy = VelocityProxy::new(1, 2, &[4], 7, &mut rng).unwrap();
        for p in proxy.net.params_mut() {
            *p = p.map(|_| 0.0);
        }
        let last = proxy.net.params().len() - 1;
        proxy.net.params_mut()[last] = Tensor::matrix(1, 2, vec![c0, c1]);
        let s = normal_matrix(&mut rng, 3, 1);
        let a = normal_matrix(&mut rng, 3, 2);
        let lp = log_density_exact(&proxy, &s, &a).unwrap();
        for r in 0..3 {
            let x = a.row_slice(r);
            let sq = (x[0] - c0).powi(2) + (x[1] - c1).powi(2);
            prop_assert!((lp[r].log_density + 0.5 * sq + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-9);
        }
    }
}
