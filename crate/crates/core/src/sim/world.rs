//! Scene state and the kinematic bicycle step.

use std::sync::Arc;

use super::geometry::Rect;
use super::route::{AgentKind, AgentState, LightState, Route, TICK};
use crate::controller::{ControlSignal, Pose};

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleParams {
    pub wheelbase: f64,
    /// Front wheel angle at full steer, radians.
    pub max_wheel_angle: f64,
    /// Acceleration at full throttle from rest, m/s².
    pub accel: f64,
    /// Deceleration at full brake, m/s².
    pub brake_decel: f64,
    /// Linear drag coefficient, 1/s.
    pub drag: f64,
    pub length: f64,
    pub width: f64,
    pub substeps: usize,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            max_wheel_angle: 0.6,
            accel: 2.0,
            brake_decel: 4.0,
            drag: 0.2,
            length: 4.0,
            width: 1.8,
            substeps: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EgoState {
    pub pose: Pose,
    pub speed: f64,
}

/// Infractions raised during one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepEvents {
    pub collisions: Vec<(usize, AgentKind)>,
    pub red_lights: Vec<usize>,
}

/// Full simulator state at one tick.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub route: Arc<Route>,
    pub ego: EgoState,
    pub tick: u32,
    /// Arclength of the ego center's furthest projection on the route.
    pub progress: f64,
    /// Signed lateral offset of the ego from the route.
    pub lateral: f64,
    pub agents: Vec<AgentState>,
}

impl Scene {
    /// Ego at rest on the route start, aligned with it.
    pub fn new(route: Arc<Route>) -> Self {
        let (x, y) = route.path.point_at(0.0);
        let yaw = route.path.heading_at(0.0);
        let agents = route.agent_states(0.0);
        Self {
            route,
            ego: EgoState {
                pose: Pose { x, y, yaw },
                speed: 0.0,
            },
            tick: 0,
            progress: 0.0,
            lateral: 0.0,
            agents,
        }
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * TICK
    }

    pub fn light_states(&self) -> Vec<LightState> {
        self.route.lights.iter().map(|l| l.state(self.tick)).collect()
    }

    pub fn ego_rect(&self, v: &VehicleParams) -> Rect {
        Rect {
            x: self.ego.pose.x,
            y: self.ego.pose.y,
            yaw: self.ego.pose.yaw,
            half_length: v.length / 2.0,
            half_width: v.width / 2.0,
        }
    }

    /// Advances one tick under `control`. Agents follow their scripts;
    /// collisions are tested at every substep and stop-line crossings at the
    /// front bumper.
    pub fn step(&self, control: &ControlSignal, v: &VehicleParams) -> (Scene, StepEvents) {
        let route = &self.route;
        let n = v.substeps.max(1);
        let h = TICK / n as f64;
        let delta = control.steer() * v.max_wheel_angle;
        let mut pose = self.ego.pose;
        let mut speed = self.ego.speed;
        let mut events = StepEvents::default();
        let mut hit = vec![false; route.agents.len()];
        for k in 1..=n {
            let acc = v.accel * control.throttle() - v.brake_decel * control.brake() - v.drag * speed;
            let next = (speed + acc * h).max(0.0);
            let mid = 0.5 * (speed + next);
            // Positive steer turns right, i.e. clockwise.
            let yaw_rate = -mid / v.wheelbase * delta.tan();
            let yaw_mid = pose.yaw + 0.5 * yaw_rate * h;
            pose.x += mid * yaw_mid.cos() * h;
            pose.y += mid * yaw_mid.sin() * h;
            pose.yaw += yaw_rate * h;
            speed = next;

            let ego = Rect {
                x: pose.x,
                y: pose.y,
                yaw: pose.yaw,
                half_length: v.length / 2.0,
                half_width: v.width / 2.0,
            };
            let t = self.time() + k as f64 * h;
            for a in route.agent_states(t) {
                if !hit[a.id] && ego.overlaps(&a.rect()) {
                    hit[a.id] = true;
                }
            }
        }
        for (id, flag) in hit.iter().enumerate() {
            if *flag {
                events.collisions.push((id, route.agents[id].kind));
            }
        }

        let proj = route.path.project_window((pose.x, pose.y), self.progress - 10.0, self.progress + 15.0);
        let progress = self.progress.max(proj.s);
        let tick = self.tick + 1;
        let front_before = self.progress + v.length / 2.0;
        let front_after = progress + v.length / 2.0;
        for (i, l) in route.lights.iter().enumerate() {
            if front_before < l.s_stop && front_after >= l.s_stop && l.state(tick) == LightState::Red {
                events.red_lights.push(i);
            }
        }
        let scene = Scene {
            route: Arc::clone(route),
            ego: EgoState { pose, speed },
            tick,
            progress,
            lateral: proj.lateral,
            agents: route.agent_states(tick as f64 * TICK),
        };
        (scene, events)
    }
}
