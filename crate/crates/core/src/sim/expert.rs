//! Privileged rule-based teacher: plans a speed profile along the route
//! centerline around signals and agents, emits ten waypoints, and drives them
//! through the same controller a learned policy uses.

use super::route::{LightState, TICK};
use super::world::{Scene, VehicleParams};
use crate::controller::{ControlSignal, Controller, ControllerConfig, Pose};
use crate::error::{Error, Result};
use crate::heads::{wrap_angle, DetectedObject, TrafficState, WAYPOINTS};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConfig {
    pub cruise_speed: f64,
    pub plan_accel: f64,
    pub plan_decel: f64,
    /// Deceleration the expert is willing to use to stop for a signal.
    pub hard_decel: f64,
    /// A signal turning red within this many ticks is treated as red.
    pub light_horizon: u32,
    pub stop_margin: f64,
    pub follow_gap: f64,
    pub corridor_margin: f64,
    /// Ticks of agent lookahead per planned waypoint.
    pub agent_lookahead: usize,
    pub route_lost: f64,
    /// Front-bumper distance to a red stop line that sets the red-light flag.
    pub red_trigger: f64,
    pub intersection_radius: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 5.0,
            plan_accel: 1.0,
            plan_decel: 1.5,
            hard_decel: 3.0,
            light_horizon: 4,
            stop_margin: 0.5,
            follow_gap: 2.5,
            corridor_margin: 0.6,
            agent_lookahead: 3,
            route_lost: 6.0,
            red_trigger: 10.0,
            intersection_radius: 12.0,
        }
    }
}

/// Every agent as an ego-frame object (x forward, y right, yaw clockwise).
pub fn ground_truth_objects(scene: &Scene) -> Vec<DetectedObject> {
    let pose = scene.ego.pose;
    scene
        .agents
        .iter()
        .map(|a| {
            let (x, y) = pose.to_ego((a.x, a.y));
            DetectedObject {
                x,
                y,
                width: a.width,
                length: a.length,
                speed: a.speed,
                yaw: wrap_angle(-(a.yaw - pose.yaw)),
            }
        })
        .collect()
}

pub fn ground_truth_traffic(scene: &Scene, cfg: &ExpertConfig, v: &VehicleParams) -> TrafficState {
    let front = scene.progress + v.length / 2.0;
    let lights = &scene.route.lights;
    let red = lights.iter().any(|l| {
        let d = l.s_stop - front;
        l.state(scene.tick) == LightState::Red && d > -cfg.stop_margin && d <= cfg.red_trigger
    });
    let junction = lights.iter().any(|l| (l.s_stop - scene.progress).abs() <= cfg.intersection_radius);
    TrafficState {
        red_light: if red { 1.0 } else { 0.0 },
        stop_sign: 0.0,
        intersection: if junction { 1.0 } else { 0.0 },
    }
}

/// Ego-frame points along the route at the arclengths `s`.
fn route_points(scene: &Scene, s: &[f64]) -> Vec<[f64; 2]> {
    s.iter()
        .map(|&si| {
            let p = scene.ego.pose.to_ego(scene.route.path.point_at(si));
            [p.0, p.1]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub config: ExpertConfig,
    pub vehicle: VehicleParams,
    controller: Controller,
}

impl Expert {
    pub fn new(config: ExpertConfig, controller: ControllerConfig, vehicle: VehicleParams) -> Self {
        Self {
            config,
            vehicle,
            controller: Controller::new(controller),
        }
    }

    pub fn reset(&mut self) {
        self.controller.reset();
    }

    /// Arclength limits for the ego center from signals (one value) and from
    /// agents (one value per future tick).
    fn stop_limits(&self, scene: &Scene) -> (f64, Vec<f64>) {
        let cfg = &self.config;
        let half = self.vehicle.length / 2.0;
        let s0 = scene.progress;
        let v = scene.ego.speed;
        let mut light_limit = f64::INFINITY;
        for l in &scene.route.lights {
            let d = l.s_stop - (s0 + half);
            if d <= -cfg.stop_margin || !l.red_within(scene.tick, cfg.light_horizon) {
                continue;
            }
            let red_now = l.state(scene.tick) == LightState::Red;
            let can_stop = v * v / (2.0 * cfg.hard_decel) <= d + cfg.stop_margin;
            if red_now || can_stop {
                light_limit = light_limit.min(l.s_stop - half - cfg.stop_margin);
            }
        }
        let horizon = WAYPOINTS + cfg.agent_lookahead + 1;
        let mut agent_limits = vec![f64::INFINITY; horizon];
        let route = &scene.route;
        for (j, lim) in agent_limits.iter_mut().enumerate() {
            let t = scene.time() + j as f64 * TICK;
            for a in route.agent_states(t) {
                let p = route.path.project_window((a.x, a.y), s0 - 5.0, s0 + 60.0);
                let clear = self.vehicle.width / 2.0 + a.width / 2.0 + cfg.corridor_margin;
                if p.lateral.abs() >= clear || p.s <= s0 {
                    continue;
                }
                *lim = lim.min(p.s - a.length / 2.0 - half - cfg.follow_gap);
            }
        }
        (light_limit, agent_limits)
    }

    /// Planned centerline arclengths for the next ten ticks.
    pub fn plan(&self, scene: &Scene) -> Vec<f64> {
        let cfg = &self.config;
        let (light_limit, agent_limits) = self.stop_limits(scene);
        let mut v = scene.ego.speed;
        let mut s = scene.progress;
        let mut out = Vec::with_capacity(WAYPOINTS);
        for k in 1..=WAYPOINTS {
            let window = &agent_limits[k - 1..=(k + cfg.agent_lookahead).min(agent_limits.len() - 1)];
            let limit = window.iter().copied().fold(light_limit, f64::min);
            let room = (limit - s).max(0.0);
            let next = (v + cfg.plan_accel * TICK)
                .min(cfg.cruise_speed)
                .min((2.0 * cfg.plan_decel * room).sqrt());
            let advanced = s + 0.5 * (v + next) * TICK;
            s = advanced.min(limit.max(s));
            v = next;
            out.push(s);
        }
        out
    }

    /// Waypoints and control for the current scene.
    pub fn act(&mut self, scene: &Scene) -> Result<(Vec<[f64; 2]>, ControlSignal)> {
        if scene.lateral.abs() > self.config.route_lost {
            return Err(Error::RouteLost(scene.lateral.abs()));
        }
        let waypoints = route_points(scene, &self.plan(scene));
        let traffic = ground_truth_traffic(scene, &self.config, &self.vehicle);
        let objects = ground_truth_objects(scene);
        let pose: Pose = scene.ego.pose;
        let (control, _) = self
            .controller
            .control_step(&waypoints, &traffic, &objects, scene.ego.speed, &pose)?;
        Ok((waypoints, control))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::route::{AgentScript, Route};
    use std::sync::Arc;

    fn expert() -> Expert {
        Expert::new(ExpertConfig::default(), ControllerConfig::default(), VehicleParams::default())
    }

    fn empty_straight() -> Arc<Route> {
        Arc::new(Route {
            agents: vec![],
            ..Route::fixture(2).unwrap()
        })
    }

    #[test]
    fn straight_road_equal_spacing() {
        let mut scene = Scene::new(empty_straight());
        scene.ego.speed = 5.0;
        let (wp, _) = expert().act(&scene).unwrap();
        assert_eq!(wp.len(), WAYPOINTS);
        for (k, w) in wp.iter().enumerate() {
            assert!((w[0] - 2.5 * (k + 1) as f64).abs() < 1e-9);
            assert!(w[1].abs() < 1e-9);
        }
    }

    #[test]
    fn red_light_waypoints_converge_to_stop_line() {
        let route = Route::fixture(0).unwrap();
        let light = route.lights[0];
        let tick = (0..64).find(|&t| light.state(t) == LightState::Red).unwrap();
        let mut scene = Scene::new(Arc::new(route));
        scene.tick = tick;
        scene.agents = scene.route.agent_states(scene.time());
        let s = light.s_stop - 12.0;
        let (x, y) = scene.route.path.point_at(s);
        scene.ego.pose.x = x;
        scene.ego.pose.y = y;
        scene.progress = s;
        scene.ego.speed = 4.0;
        let e = expert();
        let plan = e.plan(&scene);
        let stop = light.s_stop - e.vehicle.length / 2.0 - e.config.stop_margin;
        assert!(plan.iter().all(|&p| p <= stop + 1e-9));
        assert!((plan[WAYPOINTS - 1] - stop).abs() < 1e-6);
        assert!(plan.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn stops_behind_blocking_car() {
        let route = Arc::new(Route {
            agents: vec![AgentScript::parked(20.0, 0.0)],
            ..Route::fixture(2).unwrap()
        });
        let mut scene = Scene::new(route);
        scene.ego.speed = 3.0;
        let plan = expert().plan(&scene);
        let limit = 20.0 - 2.25 - 2.0 - 2.5;
        assert!(plan.iter().all(|&p| p <= limit + 1e-9));
    }

    #[test]
    fn route_lost_is_an_error() {
        let mut scene = Scene::new(empty_straight());
        scene.lateral = 7.0;
        assert!(matches!(expert().act(&scene), Err(Error::RouteLost(_))));
    }

    #[test]
    fn ground_truth_frames() {
        let scene = Scene::new(Arc::new(Route {
            agents: vec![AgentScript::parked(10.0, 2.0)],
            ..Route::fixture(2).unwrap()
        }));
        let o = ground_truth_objects(&scene);
        assert!((o[0].x - 10.0).abs() < 1e-12 && (o[0].y - 2.0).abs() < 1e-12);
        assert_eq!(o[0].yaw, 0.0);
        let t = ground_truth_traffic(&scene, &ExpertConfig::default(), &VehicleParams::default());
        assert_eq!(t.red_light, 0.0);
    }
}
