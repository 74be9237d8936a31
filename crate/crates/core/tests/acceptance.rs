//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusiondrive::bev::{rasterize, PointCloud, GRID_SIZE};
use fusiondrive::config::RunConfig;
use fusiondrive::controller::{safe_speed, SafetyEnvelope};
use fusiondrive::fusion::{FusionConfig, LvaFusion, Modality, ModalityFeature};
use fusiondrive::gradsuite;
use fusiondrive::losses::{total_loss, LossWeights};
use fusiondrive::model::{DrivingModel, ModelConfig};
use fusiondrive::saliency::{cc, dabn, kld, sim, DomainParams, SaliencyMap, KLD_EPS};
use fusiondrive::sim::harness::{expert_route_ticks, InfractionCounts, Penalties};
use fusiondrive::sim::{
    collect_frames, evaluate_benchmark, route_set, run_route, BenchmarkReport, CollectConfig, Dataset, Expert,
    HarnessConfig, RouteResult,
};
use fusiondrive::tensor::Tensor;
use fusiondrive::train::{train, ModelPolicy, TrainConfig};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn gradients() -> Outcome {
    let t = Instant::now();
    let cases = gradsuite::run(20)?;
    let took = t.elapsed();
    let worst = cases.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).expect("cases");
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    Ok((
        failed.is_empty() && took < Duration::from_secs(60),
        format!(
            "{} cases x 20 seeds, worst {} {:.2e}, failed {:?}, {:.1?}",
            cases.len(),
            worst.name,
            worst.worst,
            failed,
            took
        ),
    ))
}

fn random_cloud(r: &mut ChaCha8Rng) -> PointCloud {
    let n = r.gen_range(0..=10_000);
    let points = (0..n)
        .map(|_| match r.gen_range(0..10) {
            0 => [
                [28.0f32, -4.0, 27.999_998, -3.999_999_8][r.gen_range(0..4)],
                [-16.0f32, 16.0, 15.999_999, -15.999_999][r.gen_range(0..4)],
                0.0,
            ],
            _ => [r.gen_range(-40.0..40.0), r.gen_range(-30.0..30.0), r.gen_range(-3.0..3.0)],
        })
        .collect();
    PointCloud::new(points).expect("finite")
}

fn rasterizer() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    let mut points = 0usize;
    for _ in 0..1000 {
        let cloud = random_cloud(&mut r);
        let g = rasterize(&cloud);
        points += cloud.len();
        if g.cells().len() != GRID_SIZE * GRID_SIZE || g.total() + g.dropped() as u64 != cloud.len() as u64 {
            bad += 1;
        }
    }
    Ok((
        bad == 0 && GRID_SIZE == 256,
        format!("1000 clouds, {points} points, {bad} mismatches, grid {GRID_SIZE}x{GRID_SIZE}"),
    ))
}

fn metrics() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let (mut k_max, mut c_err, mut s_err) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (h, w) = (r.gen_range(4..48), r.gen_range(4..48));
        let v = (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        let s = SaliencyMap::new(h, w, v)?.normalized();
        k_max = k_max.max(kld(&s, &s, KLD_EPS)?);
        c_err = c_err.max((cc(&s, &s)? - 1.0).abs());
        s_err = s_err.max((sim(&s, &s)? - 1.0).abs());
    }
    Ok((
        k_max < 1e-6 && c_err <= 1e-10 && s_err <= 1e-10,
        format!("max kld {k_max:.2e}, max |cc-1| {c_err:.2e}, max |sim-1| {s_err:.2e}"),
    ))
}

fn dabn_identity() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let (mut m_err, mut v_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (c, h, w) = (r.gen_range(1..8), r.gen_range(2..16), r.gen_range(2..16));
        let loc = r.gen_range(-5.0..5.0);
        let spread = r.gen_range(0.1..10.0);
        let x = Tensor::new(&[c, h, w], (0..c * h * w).map(|_| loc + spread * r.gen_range(-1.0..1.0)).collect())?;
        let y = dabn(&x, &DomainParams::identity(0, c), 1e-5)?;
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        m_err = m_err.max(mean.abs());
        v_err = v_err.max((var - 1.0).abs());
    }
    Ok((
        m_err < 1e-8 && v_err < 1e-3,
        format!("100 inputs, max |mean| {m_err:.2e}, max |var-1| {v_err:.2e}"),
    ))
}

fn fusion_checksum() -> Outcome {
    let cfg = FusionConfig::default();
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let feats: Vec<ModalityFeature> = Modality::ALL
        .iter()
        .map(|&m| ModalityFeature {
            modality: m,
            features: Tensor::new(
                &[cfg.dim, cfg.grid.0, cfg.grid.1],
                (0..cfg.dim * cfg.grid.0 * cfg.grid.1).map(|_| r.gen_range(-1.0..1.0)).collect(),
            )
            .expect("shape"),
        })
        .collect();
    let mut sums = Vec::new();
    let mut shapes_ok = true;
    for _ in 0..5 {
        let f = LvaFusion::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(42));
        let out = f.fuse(&feats)?;
        shapes_ok &= out.tokens.shape() == [cfg.total_tokens(), 256];
        sums.push(out.tokens.checksum());
    }
    Ok((
        shapes_ok && sums.iter().all(|s| *s == sums[0]),
        format!("{}x256 tokens, checksums {:016x} x{}", cfg.total_tokens(), sums[0], sums.len()),
    ))
}

/// Largest grid `v1` admitting some grid `v2`. Pairs are pruned only by
/// necessary conditions: `v1` must pass its own constraints and `v2` must lie
/// within one acceleration step of it.
fn brute_force_v1(env: &SafetyEnvelope, step: f64) -> Option<f64> {
    let n = (env.v_max / step).round() as i64;
    let reach = (env.a_max * env.t / step).ceil() as i64 + 1;
    (0..=n).rev().find_map(|i| {
        let v1 = i as f64 * step;
        let alone = (env.v0 + v1) * env.t <= 2.0 * env.s1 + 1e-12 && (v1 - env.v0).abs() <= env.a_max * env.t + 1e-12;
        let ok = alone
            && ((i - reach).max(0)..=(i + reach).min(n)).any(|j| env.admits(v1, j as f64 * step, 1e-12));
        ok.then_some(v1)
    })
}

fn safe_speed_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(15);
    let envs: Vec<SafetyEnvelope> = (0..1000)
        .map(|_| {
            let s1 = r.gen_range(0.0..8.0);
            SafetyEnvelope::new(r.gen_range(0.0..5.0), s1, s1 + r.gen_range(0.0..8.0))
        })
        .collect();
    let t = Instant::now();
    let answers: Vec<(f64, f64)> = envs.iter().map(safe_speed).collect();
    let (mut worst, mut violations, mut stops, mut disagree) = (0.0f64, 0, 0, 0);
    for (env, &(v1, v2)) in envs.iter().zip(&answers) {
        match brute_force_v1(env, 1e-3) {
            Some(b) => {
                worst = worst.max((v1 - b).abs());
                if !env.admits(v1, v2, 1e-9) {
                    violations += 1;
                }
            }
            None => {
                stops += 1;
                if (v1, v2) != (0.0, 0.0) {
                    disagree += 1;
                }
            }
        }
    }
    let took = t.elapsed();
    Ok((
        worst <= 2e-3 && violations == 0 && disagree == 0 && took < Duration::from_secs(10),
        format!(
            "1000 envelopes, max |v1 - grid| {worst:.2e}, {violations} violations, {stops} infeasible (stop), {took:.1?} incl. brute force"
        ),
    ))
}

fn loss_arithmetic() -> Outcome {
    let w = LossWeights::default();
    let total = total_loss(1.0, 1.0, 1.0, &w);
    let text = RunConfig::default().to_kv();
    let cfg = RunConfig::from_kv(&text)?;
    let read = |k: &str| -> Result<f64, Box<dyn std::error::Error>> {
        Ok(cfg.get(k).ok_or_else(|| format!("missing {k}"))?.parse::<f64>()?)
    };
    let traffic = [read("loss.tl")?, read("loss.sl")?, read("loss.i")?];
    Ok((
        total == 2.6 && traffic == [0.5, 0.1, 0.1] && cfg.loss.traffic() == traffic,
        format!("total_loss(1,1,1) = {total:?}, traffic weights {traffic:?}"),
    ))
}

fn harness_identities() -> Outcome {
    let cfg = HarnessConfig::default();
    let mut all: Vec<RouteResult> = Vec::new();
    let routes = route_set(20, 0)?;
    let mut expert_ds = Vec::new();
    for route in &routes {
        let route = Arc::new(route.clone());
        let mut e = Expert::new(cfg.expert.clone(), cfg.controller.clone(), cfg.vehicle.clone());
        let limit = expert_route_ticks(&route, &cfg) * 4;
        let r = run_route(&mut e, &route, 0, &cfg, limit);
        expert_ds.push(r.ds);
        all.push(r);
    }
    let p = Penalties::default();
    let injected = RouteResult::new(
        0,
        80.0,
        InfractionCounts {
            ped: 1,
            ..Default::default()
        },
        &p,
    );
    let mut r = ChaCha8Rng::seed_from_u64(16);
    for i in 0..200 {
        let counts = InfractionCounts {
            ped: r.gen_range(0..3),
            veh: r.gen_range(0..3),
            stat: r.gen_range(0..3),
            red: r.gen_range(0..3),
            timeout: r.gen_range(0..2),
            block: r.gen_range(0..2),
        };
        all.push(RouteResult::new(i, r.gen_range(0.0..=100.0), counts, &p));
    }
    all.push(injected.clone());
    let identity = all.iter().all(|x| x.ds == x.rc * x.is);
    let perfect = expert_ds.iter().all(|&d| d == 100.0);
    Ok((
        identity && perfect && injected.ds == 40.0,
        format!(
            "DS == RC*IS on {} results, expert DS=100 on {}/{} routes, RC 80 + 1 ped -> DS {:?}",
            all.len(),
            expert_ds.iter().filter(|&&d| d == 100.0).count(),
            routes.len(),
            injected.ds
        ),
    ))
}

struct Bench {
    data: Dataset,
    fixtures: Vec<fusiondrive::sim::Route>,
    cfg: HarnessConfig,
}

impl Bench {
    fn new() -> Result<Self, Box<dyn std::error::Error>> {
        let cfg = HarnessConfig::default();
        Ok(Self {
            data: collect_frames(2000, 0, &cfg, &CollectConfig::default())?,
            fixtures: route_set(4, 0)?,
            cfg,
        })
    }

    fn eval(&self, model: &DrivingModel) -> BenchmarkReport {
        evaluate_benchmark(
            || ModelPolicy::new(model, self.cfg.controller.clone()),
            &self.fixtures,
            3,
            0,
            &self.cfg,
        )
    }

    fn trained(&self, use_da_mask: bool, lva_fusion: bool) -> Result<DrivingModel, Box<dyn std::error::Error>> {
        let mut m = DrivingModel::new(ModelConfig {
            use_da_mask,
            lva_fusion,
            ..Default::default()
        })?;
        let rc = RunConfig::default();
        train(&mut m, &self.data, &TrainConfig::default(), &rc.saliency_train, &rc.loss, |_, _| {})?;
        Ok(m)
    }
}

fn learning_signal(bench: &Bench, full_ds: &mut Option<f64>) -> Outcome {
    let t = Instant::now();
    let fresh = DrivingModel::new(ModelConfig::default())?;
    let before = bench.eval(&fresh).ds.mean;
    let model = bench.trained(true, true)?;
    let after = bench.eval(&model).ds.mean;
    let took = t.elapsed();
    *full_ds = Some(after);
    Ok((
        after >= 1.5 * before && took < Duration::from_secs(30 * 60),
        format!(
            "2000 frames, 30 epochs: untrained DS {before:.2}, trained DS {after:.2} ({:.2}x), {took:.0?} incl. collection",
            after / before
        ),
    ))
}

fn ablation(bench: &Bench, full_ds: Option<f64>) -> Outcome {
    let base = bench.eval(&bench.trained(false, false)?).ds.mean;
    let da = bench.eval(&bench.trained(true, false)?).ds.mean;
    let lva = bench.eval(&bench.trained(false, true)?).ds.mean;
    let full = full_ds.map_or("n/a".to_string(), |d| format!("{d:.2}"));
    Ok((
        da >= base && lva >= base,
        format!("concat baseline DS {base:.2}, +DA mask {da:.2}, +LVAFusion {lva:.2}, both {full}"),
    ))
}

fn report(name: &str, outcome: Outcome, took: Duration) -> bool {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{} {name}: {detail} [{took:.1?}]", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() -> ExitCode {
    let quick: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradients),
        ("rasterizer conservation", rasterizer),
        ("metric identities", metrics),
        ("dabn identity", dabn_identity),
        ("lvafusion shape and determinism", fusion_checksum),
        ("safe_speed oracle", safe_speed_oracle),
        ("loss arithmetic", loss_arithmetic),
        ("harness identities", harness_identities),
    ];
    let mut ok = true;
    for (name, f) in quick {
        let t = Instant::now();
        let o = f();
        ok &= report(name, o, t.elapsed());
    }

    let t = Instant::now();
    match Bench::new() {
        Ok(bench) => {
            let mut full = None;
            let o = learning_signal(&bench, &mut full);
            ok &= report("learning signal", o, t.elapsed());
            let t = Instant::now();
            let o = ablation(&bench, full);
            ok &= report("ablation ordering", o, t.elapsed());
        }
        Err(e) => {
            ok &= report("learning signal", Err(e), t.elapsed());
            ok &= report("ablation ordering", Err("no dataset".into()), Duration::ZERO);
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
