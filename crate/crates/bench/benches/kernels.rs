use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fac_core::envs::{make_gmm2d_dataset, GMM_STATE};
use fac_core::fac::{epsilon_threshold, fac_update, Aggregation, EpsScheme, FacAgent, FacConfig};
use fac_core::flowmatch::{fm_loss_grad, log_density, DensityMethod, FmNoise, VelocityProxy};
use fac_core::rng::{normal_matrix, seeded};
use fac_core::tabular::{closed_form_fixed_point, fixed_point_iterate, random_instance};
use fac_core::Tensor;

fn flow(c: &mut Criterion) {
    let mut rng = seeded(0);
    let proxy = VelocityProxy::new(4, 2, &[256, 256], 10, &mut rng).unwrap();
    let s = Tensor::repeat_row(&GMM_STATE, 256);
    let a = normal_matrix(&mut rng, 256, 2);
    let noise = FmNoise::sample(&mut rng, 256, 2);
    c.bench_function("fm_loss_grad/256x[256,256]", |b| b.iter(|| fm_loss_grad(black_box(&proxy), &s, &a, &noise).unwrap()));
    c.bench_function("log_density/exact/256", |b| b.iter(|| log_density(&proxy, &s, black_box(&a), DensityMethod::Exact, &mut rng).unwrap()));
    c.bench_function("log_density/hutchinson8/256", |b| {
        b.iter(|| log_density(&proxy, &s, black_box(&a), DensityMethod::hutchinson(8), &mut rng).unwrap())
    });
}

fn update(c: &mut Criterion) {
    let mut rng = seeded(1);
    let data = make_gmm2d_dataset(1024, 1, &mut rng).unwrap();
    let cfg = FacConfig { batch_size: 256, actor_hidden: vec![256, 256], critic_hidden: vec![256, 256], ..FacConfig::default() };
    let proxy = VelocityProxy::new(4, 2, &[256, 256], 10, &mut rng).unwrap();
    let mut agent = FacAgent::new(4, 2, &cfg.actor_hidden, &cfg.critic_hidden, Aggregation::Mean, cfg.lr, &mut rng).unwrap();
    let idx: Vec<usize> = (0..256).collect();
    let b = data.batch(&idx);
    let col = vec![-1.0; 256];
    let log_eps = epsilon_threshold(EpsScheme::BatchAdaptive, None, Some(&col)).unwrap();
    c.bench_function("fac_update/256", |bch| bch.iter(|| fac_update(&mut agent, &proxy, &b, &log_eps, &cfg, &mut rng).unwrap()));
}

fn tabular(c: &mut Criterion) {
    let inst = random_instance(&mut seeded(2), 6, 4, 0.99).unwrap();
    c.bench_function("tabular/closed_form", |b| {
        b.iter(|| closed_form_fixed_point(&inst.mdp, &inst.pi, &inst.beta, &inst.proxy, black_box(inst.alpha)).unwrap())
    });
    c.bench_function("tabular/iterate", |b| b.iter(|| fixed_point_iterate(&inst.mdp, &inst.pi, &inst.beta, &inst.proxy, black_box(inst.alpha), 1e-10).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = flow, update, tabular
}
criterion_main!(benches);
