//! Closed-loop evaluation: route completion, infraction score, driving score.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use super::expert::{Expert, ExpertConfig};
use super::route::{AgentKind, Route};
use super::sensors::{render, SensorBundle, SensorConfig};
use super::world::{Scene, VehicleParams};
use crate::controller::{ControlSignal, ControllerConfig};
use crate::error::Result;
use crate::par;

/// Multiplicative penalty per infraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalties {
    pub ped: f64,
    pub veh: f64,
    pub stat: f64,
    pub red: f64,
    pub timeout: f64,
    pub block: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self {
            ped: 0.50,
            veh: 0.60,
            stat: 0.65,
            red: 0.70,
            timeout: 0.70,
            block: 0.70,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InfractionCounts {
    pub ped: u32,
    pub veh: u32,
    pub stat: u32,
    pub red: u32,
    pub timeout: u32,
    pub block: u32,
}

impl InfractionCounts {
    pub fn as_array(&self) -> [u32; 6] {
        [self.ped, self.veh, self.stat, self.red, self.timeout, self.block]
    }

    pub fn total(&self) -> u32 {
        self.as_array().iter().sum()
    }

    /// Π penalty^count.
    pub fn infraction_score(&self, p: &Penalties) -> f64 {
        let pen = [p.ped, p.veh, p.stat, p.red, p.timeout, p.block];
        pen.iter().zip(self.as_array()).map(|(q, n)| q.powi(n as i32)).product()
    }

    fn add_collision(&mut self, kind: AgentKind) {
        match kind {
            AgentKind::Pedestrian => self.ped += 1,
            AgentKind::Vehicle => self.veh += 1,
            AgentKind::Static => self.stat += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Timeout,
    Blocked,
    RouteLost,
    PolicyError,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::Timeout => "timeout",
            Outcome::Blocked => "blocked",
            Outcome::RouteLost => "route_lost",
            Outcome::PolicyError => "policy_error",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteResult {
    pub route_id: usize,
    pub rc: f64,
    pub is: f64,
    pub ds: f64,
    pub infractions: InfractionCounts,
    /// Distance driven along the route, km.
    pub km: f64,
    pub ticks: u32,
    pub outcome: Outcome,
}

impl RouteResult {
    pub fn new(route_id: usize, rc: f64, infractions: InfractionCounts, p: &Penalties) -> Self {
        let is = infractions.infraction_score(p);
        Self {
            route_id,
            rc,
            is,
            ds: rc * is,
            infractions,
            km: 0.0,
            ticks: 0,
            outcome: Outcome::Completed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub timeout_factor: f64,
    pub block_ticks: u32,
    pub block_speed: f64,
    pub route_lost: f64,
    pub complete_tolerance: f64,
    pub penalties: Penalties,
    pub vehicle: VehicleParams,
    pub sensors: SensorConfig,
    pub controller: ControllerConfig,
    pub expert: ExpertConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            timeout_factor: 4.0,
            block_ticks: 180,
            block_speed: 0.1,
            route_lost: 6.0,
            complete_tolerance: 2.0,
            penalties: Penalties::default(),
            vehicle: VehicleParams::default(),
            sensors: SensorConfig::default(),
            controller: ControllerConfig::default(),
            expert: ExpertConfig::default(),
        }
    }
}

/// What a policy sees each tick.
pub struct Observation<'a> {
    pub scene: &'a Scene,
    pub sensors: Option<&'a SensorBundle>,
    /// Next sparse route target in the ego frame.
    pub target: (f64, f64),
}

pub trait Policy {
    fn reset(&mut self, route: &Route);
    fn needs_sensors(&self) -> bool;
    fn act(&mut self, obs: &Observation<'_>) -> Result<(Vec<[f64; 2]>, ControlSignal)>;
}

impl Policy for Expert {
    fn reset(&mut self, _route: &Route) {
        Expert::reset(self);
    }

    fn needs_sensors(&self) -> bool {
        false
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<(Vec<[f64; 2]>, ControlSignal)> {
        Expert::act(self, obs.scene)
    }
}

/// Lead distance used to pick the sparse route target.
pub const TARGET_LEAD: f64 = 4.0;

pub fn target_in_ego(scene: &Scene) -> (f64, f64) {
    scene.ego.pose.to_ego(scene.route.target_after(scene.progress, TARGET_LEAD))
}

/// Per-tick callback payload for tracing a run.
pub struct TickRecord<'a> {
    pub scene: &'a Scene,
    pub sensors: Option<&'a SensorBundle>,
    pub waypoints: &'a [[f64; 2]],
    pub control: ControlSignal,
}

/// Runs `policy` on `route` until completion, timeout, block, route loss or
/// a policy error. `max_ticks` is the timeout budget.
pub fn run_route_traced<P: Policy + ?Sized>(
    policy: &mut P,
    route: &Arc<Route>,
    seed: u64,
    cfg: &HarnessConfig,
    max_ticks: u32,
    mut on_tick: impl FnMut(&TickRecord<'_>),
) -> RouteResult {
    policy.reset(route);
    let mut scene = Scene::new(Arc::clone(route));
    let mut counts = InfractionCounts::default();
    let mut collided = BTreeSet::new();
    let mut ran_red = BTreeSet::new();
    let mut still = 0u32;
    let end = route.length() - cfg.complete_tolerance;
    let outcome = loop {
        if scene.tick >= max_ticks {
            counts.timeout += 1;
            break Outcome::Timeout;
        }
        let sensors = policy.needs_sensors().then(|| render(&scene, &cfg.sensors, seed));
        let obs = Observation {
            scene: &scene,
            sensors: sensors.as_ref(),
            target: target_in_ego(&scene),
        };
        let (waypoints, control) = match policy.act(&obs) {
            Ok(a) => a,
            Err(_) => break Outcome::PolicyError,
        };
        on_tick(&TickRecord {
            scene: &scene,
            sensors: sensors.as_ref(),
            waypoints: &waypoints,
            control,
        });
        let (next, events) = scene.step(&control, &cfg.vehicle);
        scene = next;
        for (id, kind) in events.collisions {
            if collided.insert(id) {
                counts.add_collision(kind);
            }
        }
        for l in events.red_lights {
            if ran_red.insert(l) {
                counts.red += 1;
            }
        }
        if scene.progress >= end {
            break Outcome::Completed;
        }
        if scene.lateral.abs() > cfg.route_lost {
            break Outcome::RouteLost;
        }
        still = if scene.ego.speed < cfg.block_speed { still + 1 } else { 0 };
        if still >= cfg.block_ticks {
            counts.block += 1;
            break Outcome::Blocked;
        }
    };
    let rc = if outcome == Outcome::Completed {
        100.0
    } else {
        (100.0 * scene.progress / route.length()).clamp(0.0, 100.0)
    };
    let mut r = RouteResult::new(route.id, rc, counts, &cfg.penalties);
    r.km = scene.progress / 1000.0;
    r.ticks = scene.tick;
    r.outcome = outcome;
    r
}

pub fn run_route<P: Policy + ?Sized>(policy: &mut P, route: &Arc<Route>, seed: u64, cfg: &HarnessConfig, max_ticks: u32) -> RouteResult {
    run_route_traced(policy, route, seed, cfg, max_ticks, |_| {})
}

/// Ticks the expert needs to finish `route`, used to set the timeout.
pub fn expert_route_ticks(route: &Arc<Route>, cfg: &HarnessConfig) -> u32 {
    let mut e = Expert::new(cfg.expert.clone(), cfg.controller.clone(), cfg.vehicle.clone());
    let r = run_route(&mut e, route, 0, cfg, 10_000);
    r.ticks.max(1)
}

pub fn timeout_ticks(route: &Arc<Route>, cfg: &HarnessConfig) -> u32 {
    (expert_route_ticks(route, cfg) as f64 * cfg.timeout_factor).ceil() as u32
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; zero std for a single value.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteSummary {
    pub route_id: usize,
    pub name: String,
    pub town: u32,
    pub rc: MeanStd,
    pub is: MeanStd,
    pub ds: MeanStd,
    pub infractions: InfractionCounts,
    pub km: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    /// `results[repeat][route]`.
    pub results: Vec<Vec<RouteResult>>,
    pub routes: Vec<RouteSummary>,
    /// Statistics over repeats of the per-repeat route mean.
    pub rc: MeanStd,
    pub is: MeanStd,
    pub ds: MeanStd,
    pub infractions: InfractionCounts,
    pub km: f64,
}

fn per_km(n: u32, km: f64) -> f64 {
    if km > 0.0 {
        n as f64 / km
    } else {
        0.0
    }
}

impl BenchmarkReport {
    pub fn from_results(routes: &[Arc<Route>], results: Vec<Vec<RouteResult>>) -> Self {
        let mut summaries = Vec::with_capacity(routes.len());
        let mut total = InfractionCounts::default();
        let mut km = 0.0;
        for (i, route) in routes.iter().enumerate() {
            let col: Vec<&RouteResult> = results.iter().map(|rep| &rep[i]).collect();
            let pick = |f: fn(&RouteResult) -> f64| MeanStd::of(&col.iter().map(|r| f(r)).collect::<Vec<_>>());
            let mut inf = InfractionCounts::default();
            let mut rkm = 0.0;
            for r in &col {
                let a = r.infractions;
                inf.ped += a.ped;
                inf.veh += a.veh;
                inf.stat += a.stat;
                inf.red += a.red;
                inf.timeout += a.timeout;
                inf.block += a.block;
                rkm += r.km;
            }
            for (t, v) in [
                (&mut total.ped, inf.ped),
                (&mut total.veh, inf.veh),
                (&mut total.stat, inf.stat),
                (&mut total.red, inf.red),
                (&mut total.timeout, inf.timeout),
                (&mut total.block, inf.block),
            ] {
                *t += v;
            }
            km += rkm;
            summaries.push(RouteSummary {
                route_id: route.id,
                name: route.name.clone(),
                town: route.town,
                rc: pick(|r| r.rc),
                is: pick(|r| r.is),
                ds: pick(|r| r.ds),
                infractions: inf,
                km: rkm,
            });
        }
        let per_repeat = |f: fn(&RouteResult) -> f64| {
            let means: Vec<f64> = results
                .iter()
                .map(|rep| rep.iter().map(f).sum::<f64>() / rep.len().max(1) as f64)
                .collect();
            MeanStd::of(&means)
        };
        Self {
            rc: per_repeat(|r| r.rc),
            is: per_repeat(|r| r.is),
            ds: per_repeat(|r| r.ds),
            results,
            routes: summaries,
            infractions: total,
            km,
        }
    }

    /// Line-oriented summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.routes {
            let _ = writeln!(
                s,
                "route {} {} town={} ds={:.2}±{:.2} rc={:.2}±{:.2} is={:.3}±{:.3}",
                r.route_id, r.name, r.town, r.ds.mean, r.ds.std, r.rc.mean, r.rc.std, r.is.mean, r.is.std
            );
        }
        for (k, rep) in self.results.iter().enumerate() {
            for r in rep {
                let i = r.infractions;
                let _ = writeln!(
                    s,
                    "repeat {k} route {} outcome={} ticks={} ds={:.2} rc={:.2} is={:.3} ped={} veh={} stat={} red={} to={} block={}",
                    r.route_id,
                    r.outcome.name(),
                    r.ticks,
                    r.ds,
                    r.rc,
                    r.is,
                    i.ped,
                    i.veh,
                    i.stat,
                    i.red,
                    i.timeout,
                    i.block
                );
            }
        }
        let _ = writeln!(
            s,
            "mean ds={:.2}±{:.2} rc={:.2}±{:.2} is={:.3}±{:.3} km={:.3}",
            self.ds.mean, self.ds.std, self.rc.mean, self.rc.std, self.is.mean, self.is.std, self.km
        );
        let t = self.infractions;
        let _ = writeln!(
            s,
            "infractions_per_km ped={:.3} veh={:.3} stat={:.3} red={:.3} to={:.3} block={:.3}",
            per_km(t.ped, self.km),
            per_km(t.veh, self.km),
            per_km(t.stat, self.km),
            per_km(t.red, self.km),
            per_km(t.timeout, self.km),
            per_km(t.block, self.km)
        );
        s
    }

    /// Comma-separated table, one row per route plus a `mean` row;
    /// infraction columns are per km driven.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("route,DS,RC,IS,Ped,Veh,Stat,Red,TO,Block\n");
        let row = |s: &mut String, name: &str, ds: f64, rc: f64, is: f64, i: &InfractionCounts, km: f64| {
            let _ = writeln!(
                s,
                "{name},{ds:.4},{rc:.4},{is:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                per_km(i.ped, km),
                per_km(i.veh, km),
                per_km(i.stat, km),
                per_km(i.red, km),
                per_km(i.timeout, km),
                per_km(i.block, km)
            );
        };
        for r in &self.routes {
            row(&mut s, &r.route_id.to_string(), r.ds.mean, r.rc.mean, r.is.mean, &r.infractions, r.km);
        }
        row(&mut s, "mean", self.ds.mean, self.rc.mean, self.is.mean, &self.infractions, self.km);
        s
    }
}

/// Runs every route `repeats` times, repeat `k` with sensor seed `seed + k`.
/// Routes run in parallel with a fresh policy each; results come back in
/// route order.
pub fn evaluate_benchmark<P, F>(make_policy: F, routes: &[Route], repeats: usize, seed: u64, cfg: &HarnessConfig) -> BenchmarkReport
where
    P: Policy,
    F: Fn() -> P + Sync + Send,
{
    let routes: Vec<Arc<Route>> = routes.iter().cloned().map(Arc::new).collect();
    let limits = par::map(&routes, |r| timeout_ticks(r, cfg));
    let jobs: Vec<(usize, usize)> = (0..repeats).flat_map(|k| (0..routes.len()).map(move |i| (k, i))).collect();
    let flat = par::map(&jobs, |&(k, i)| {
        let mut p = make_policy();
        run_route(&mut p, &routes[i], seed.wrapping_add(k as u64), cfg, limits[i])
    });
    let results = flat.chunks(routes.len().max(1)).map(|c| c.to_vec()).collect();
    BenchmarkReport::from_results(&routes, results)
}
