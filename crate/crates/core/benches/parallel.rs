use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusiondrive::bev::{rasterize_batch, rasterize_batch_seq, PointCloud, RasterConfig};
use fusiondrive::controller::{safe_speed, SafetyEnvelope};
use fusiondrive::losses::LossWeights;
use fusiondrive::model::{DrivingModel, ModelConfig};
use fusiondrive::par;
use fusiondrive::sim::harness::timeout_ticks;
use fusiondrive::sim::{collect_dataset, route_set, run_route, training_routes, CollectConfig, Expert, HarnessConfig};
use fusiondrive::train::{build_samples, sample_loss};

fn clouds(n: usize, points: usize) -> Vec<PointCloud> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| {
            PointCloud::new(
                (0..points)
                    .map(|_| [r.gen_range(-10.0..35.0), r.gen_range(-20.0..20.0), r.gen_range(-2.0..2.0)])
                    .collect(),
            )
            .unwrap()
        })
        .collect()
}

fn rasterize(c: &mut Criterion) {
    let data = clouds(32, 10_000);
    let cfg = RasterConfig::default();
    let mut g = c.benchmark_group("rasterize_batch");
    g.bench_function("parallel", |b| b.iter(|| rasterize_batch(black_box(&data), &cfg)));
    g.bench_function("sequential", |b| b.iter(|| rasterize_batch_seq(black_box(&data), &cfg)));
    g.finish();
}

fn envelopes() -> Vec<SafetyEnvelope> {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    (0..1000)
        .map(|_| SafetyEnvelope::new(r.gen_range(0.0..5.0), r.gen_range(0.0..8.0), r.gen_range(0.0..16.0)))
        .collect()
}

/// Grid search over `v1` at step 1e-3, pairing each with the loosest `v2`.
fn grid_v1(env: &SafetyEnvelope) -> f64 {
    let n = (env.v_max / 1e-3).round() as usize;
    (0..=n)
        .rev()
        .map(|i| i as f64 * 1e-3)
        .find(|&v1| env.admits(v1, (v1 - env.a_max * env.t).max(0.0), 1e-12))
        .unwrap_or(0.0)
}

fn safe_speed_oracle(c: &mut Criterion) {
    let envs = envelopes();
    let mut g = c.benchmark_group("safe_speed_oracle");
    g.bench_function("parallel", |b| {
        b.iter(|| par::map(black_box(&envs), |e| (safe_speed(e).0 - grid_v1(e)).abs()))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| par::map_seq(black_box(&envs), |e| (safe_speed(e).0 - grid_v1(e)).abs()))
    });
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let cfg = HarnessConfig::default();
    let data = collect_dataset(&training_routes(1, 0).unwrap(), 0, &cfg, &CollectConfig::default()).unwrap();
    let model = DrivingModel::new(ModelConfig {
        use_da_mask: false,
        ..Default::default()
    })
    .unwrap();
    let samples = build_samples(&model, &data.records[..16]).unwrap();
    let w = LossWeights::default();
    let grad = |s: &_| sample_loss(&model.config, &model.params, s, &w, None).unwrap();
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| par::map(black_box(&samples), grad)));
    g.bench_function("sequential", |b| b.iter(|| par::map_seq(black_box(&samples), grad)));
    g.finish();
}

fn route_eval(c: &mut Criterion) {
    let cfg = HarnessConfig::default();
    let routes: Vec<_> = route_set(4, 0).unwrap().into_iter().map(Arc::new).collect();
    let limits: Vec<u32> = routes.iter().map(|r| timeout_ticks(r, &cfg)).collect();
    let jobs: Vec<usize> = (0..routes.len()).collect();
    let drive = |&i: &usize| {
        let mut e = Expert::new(cfg.expert.clone(), cfg.controller.clone(), cfg.vehicle.clone());
        run_route(&mut e, &routes[i], 0, &cfg, limits[i]).ds
    };
    let mut g = c.benchmark_group("route_eval");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| par::map(black_box(&jobs), drive)));
    g.bench_function("sequential", |b| b.iter(|| par::map_seq(black_box(&jobs), drive)));
    g.finish();
}

criterion_group!(benches, rasterize, safe_speed_oracle, gradients, route_eval);
criterion_main!(benches);
