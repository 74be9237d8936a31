//! Waypoint-following control: lateral and longitudinal PID loops with the
//! target speed capped by a two-step safe-speed program.
//!
//! Ego frame: x forward, y right (meters). Positive steer turns right.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::heads::{DetectedObject, TrafficState};

/// Steer in `[−1, 1]`, throttle and brake in `[0, 1]`, never both nonzero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControlSignal {
    steer: f64,
    throttle: f64,
    brake: f64,
}

impl ControlSignal {
    pub fn new(steer: f64, throttle: f64, brake: f64) -> Result<Self> {
        let ok = (-1.0..=1.0).contains(&steer) && (0.0..=1.0).contains(&throttle) && (0.0..=1.0).contains(&brake);
        if !ok || throttle * brake != 0.0 {
            return Err(Error::Precondition(format!(
                "invalid control steer={steer} throttle={throttle} brake={brake}"
            )));
        }
        Ok(Self { steer, throttle, brake })
    }

    /// Clamps into range; a positive brake wins over throttle.
    pub fn clamped(steer: f64, throttle: f64, brake: f64) -> Self {
        let brake = if brake.is_finite() { brake.clamp(0.0, 1.0) } else { 1.0 };
        let throttle = if brake > 0.0 || !throttle.is_finite() {
            0.0
        } else {
            throttle.clamp(0.0, 1.0)
        };
        let steer = if steer.is_finite() { steer.clamp(-1.0, 1.0) } else { 0.0 };
        Self { steer, throttle, brake }
    }

    pub fn steer(&self) -> f64 {
        self.steer
    }

    pub fn throttle(&self) -> f64 {
        self.throttle
    }

    pub fn brake(&self) -> f64 {
        self.brake
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyEnvelope {
    pub v0: f64,
    pub s1: f64,
    pub s2: f64,
    pub t: f64,
    pub a_max: f64,
    pub v_max: f64,
}

impl SafetyEnvelope {
    pub fn new(v0: f64, s1: f64, s2: f64) -> Self {
        Self {
            v0,
            s1,
            s2,
            t: 0.5,
            a_max: 1.0,
            v_max: 5.0,
        }
    }

    /// Checks a speed pair against every constraint of the program.
    pub fn admits(&self, v1: f64, v2: f64, tol: f64) -> bool {
        let t = self.t;
        let at = self.a_max * t;
        (self.v0 + v1) * t <= 2.0 * self.s1 + tol
            && (self.v0 + v1) * t + (v1 + v2) * t <= 2.0 * self.s2 + tol
            && (v1 - self.v0).abs() <= at + tol
            && (v2 - v1).abs() <= at + tol
            && (-tol..=self.v_max + tol).contains(&v1)
            && (-tol..=self.v_max + tol).contains(&v2)
    }
}

/// Largest `v1` (with the `v2` that permits it) such that
///
/// ```text
/// (v0+v1)t ≤ 2s1,  (v0+v1)t + (v1+v2)t ≤ 2s2,
/// |v1−v0| ≤ a·t,  |v2−v1| ≤ a·t,  v1, v2 ∈ [0, v_max]
/// ```
///
/// `v2 = max(0, v1 − a·t)` is the loosest choice for the second constraint,
/// which is then increasing in `v1` and inverts piecewise. Returns `(0, 0)`
/// when no pair is feasible.
pub fn safe_speed(env: &SafetyEnvelope) -> (f64, f64) {
    let SafetyEnvelope { v0, s1, s2, t, a_max, v_max } = *env;
    let at = a_max * t;
    let lower = (v0 - at).max(0.0);
    let bound_s1 = 2.0 * s1 / t - v0;
    let b = 2.0 * s2 / t - v0;
    let bound_s2 = if b / 2.0 <= at { b / 2.0 } else { (b + at) / 3.0 };
    let upper = bound_s1.min(bound_s2).min(v0 + at).min(v_max);
    if !(upper >= lower) {
        return (0.0, 0.0);
    }
    (upper, (upper - at).max(0.0))
}

/// PID with a clamped integral term.
#[derive(Clone, Debug, PartialEq)]
pub struct Pid {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub dt: f64,
    pub integral_cap: f64,
    integral: f64,
    prev_error: Option<f64>,
}

impl Pid {
    pub fn new(kp: f64, ki: f64, kd: f64, dt: f64, integral_cap: f64) -> Self {
        Self {
            kp,
            ki,
            kd,
            dt,
            integral_cap,
            integral: 0.0,
            prev_error: None,
        }
    }

    pub fn step(&mut self, error: f64) -> f64 {
        self.integral = (self.integral + error * self.dt).clamp(-self.integral_cap, self.integral_cap);
        let derivative = self.prev_error.map_or(0.0, |p| (error - p) / self.dt);
        self.prev_error = Some(error);
        self.kp * error + self.ki * self.integral + self.kd * derivative
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = None;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    pub lateral: (f64, f64, f64),
    pub longitudinal: (f64, f64, f64),
    pub dt: f64,
    pub integral_cap: f64,
    pub a_max: f64,
    pub v_max: f64,
    /// Collision buffer (length, width) in meters.
    pub buffer: (f64, f64),
    pub red_light_threshold: f64,
    pub brake_speed: f64,
    pub max_throttle: f64,
    /// Negative PID output must exceed this before the brake engages.
    pub brake_deadband: f64,
    pub aim_points: usize,
    pub track_window: usize,
    pub track_gate: f64,
    pub horizon: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            lateral: (1.25, 0.75, 0.3),
            longitudinal: (5.0, 0.5, 1.0),
            dt: 0.5,
            integral_cap: 1.0,
            a_max: 1.0,
            v_max: 5.0,
            buffer: (3.7, 2.0),
            red_light_threshold: 0.5,
            brake_speed: 0.4,
            max_throttle: 0.5,
            brake_deadband: 2.5,
            aim_points: 3,
            track_window: 3,
            track_gate: 2.0,
            horizon: 1e3,
        }
    }
}

/// Steer from the heading error to the mean of the first `aim_points`
/// waypoints.
pub fn lateral_pid(pid: &mut Pid, waypoints: &[[f64; 2]], aim_points: usize) -> Result<f64> {
    if waypoints.len() < 2 {
        return Err(Error::Precondition("lateral control needs at least two waypoints".into()));
    }
    let n = aim_points.clamp(1, waypoints.len());
    let (sx, sy) = waypoints[..n].iter().fold((0.0, 0.0), |(a, b), w| (a + w[0], b + w[1]));
    let (ax, ay) = (sx / n as f64, sy / n as f64);
    let heading = if ax.hypot(ay) < 1e-6 { 0.0 } else { ay.atan2(ax) };
    Ok(pid.step(heading).clamp(-1.0, 1.0))
}

/// Throttle for positive PID output (capped at `max_throttle`), brake for
/// the part of a negative output beyond `deadband`, coasting in between.
pub fn longitudinal_pid(pid: &mut Pid, target_speed: f64, current_speed: f64, max_throttle: f64, deadband: f64) -> (f64, f64) {
    let u = pid.step(target_speed - current_speed);
    if u > 0.0 {
        (u.min(max_throttle), 0.0)
    } else if -u > deadband {
        (0.0, (-u - deadband).min(1.0))
    } else {
        (0.0, 0.0)
    }
}

/// Ego pose in the world frame: position and counter-clockwise yaw.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    /// Ego-frame point (x forward, y right) to world.
    pub fn to_world(&self, p: (f64, f64)) -> (f64, f64) {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        (self.x + p.0 * c + p.1 * s, self.y + p.0 * s - p.1 * c)
    }

    /// World point to ego frame.
    pub fn to_ego(&self, p: (f64, f64)) -> (f64, f64) {
        let (dx, dy) = (p.0 - self.x, p.1 - self.y);
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        (dx * c + dy * s, dx * s - dy * c)
    }
}

#[derive(Clone, Debug)]
struct Track {
    history: VecDeque<(f64, f64)>,
    seen: bool,
}

/// Constant-velocity forecasting from a sliding window of past positions.
#[derive(Clone, Debug, Default)]
pub struct ObjectTracker {
    tracks: Vec<Track>,
}

/// An object with its world-frame velocity estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackedObject {
    pub object: DetectedObject,
    /// Ego-frame velocity (x forward, y right).
    pub velocity: (f64, f64),
}

impl ObjectTracker {
    pub fn reset(&mut self) {
        self.tracks.clear();
    }

    pub fn update(&mut self, objects: &[DetectedObject], ego: &Pose, cfg: &ControllerConfig) -> Vec<TrackedObject> {
        for t in &mut self.tracks {
            t.seen = false;
        }
        let mut out = Vec::with_capacity(objects.len());
        for o in objects {
            let w = ego.to_world((o.x, o.y));
            let predicted = |t: &Track| -> (f64, f64) {
                let last = *t.history.back().expect("tracks are nonempty");
                if t.history.len() >= 2 {
                    let prev = t.history[t.history.len() - 2];
                    (2.0 * last.0 - prev.0, 2.0 * last.1 - prev.1)
                } else {
                    last
                }
            };
            let best = self
                .tracks
                .iter()
                .enumerate()
                .filter(|(_, t)| !t.seen)
                .map(|(i, t)| {
                    let p = predicted(t);
                    (i, (p.0 - w.0).hypot(p.1 - w.1))
                })
                .filter(|&(_, d)| d < cfg.track_gate)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let idx = match best {
                Some((i, _)) => i,
                None => {
                    self.tracks.push(Track {
                        history: VecDeque::new(),
                        seen: false,
                    });
                    self.tracks.len() - 1
                }
            };
            let track = &mut self.tracks[idx];
            track.seen = true;
            track.history.push_back(w);
            while track.history.len() > cfg.track_window.max(2) {
                track.history.pop_front();
            }
            let velocity = if track.history.len() >= 2 {
                let first = track.history[0];
                let span = (track.history.len() - 1) as f64 * cfg.dt;
                let vw = ((w.0 - first.0) / span, (w.1 - first.1) / span);
                let (c, s) = (ego.yaw.cos(), ego.yaw.sin());
                (vw.0 * c + vw.1 * s, vw.0 * s - vw.1 * c)
            } else {
                (o.speed * o.yaw.cos(), o.speed * o.yaw.sin())
            };
            out.push(TrackedObject { object: *o, velocity });
        }
        self.tracks.retain(|t| t.seen);
        out
    }
}

/// Ego path through the waypoints, extended straight past the last one.
fn corridor(waypoints: &[[f64; 2]], extend: f64) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 0.0)];
    for w in waypoints {
        let last = *pts.last().expect("nonempty");
        if (w[0] - last.0).hypot(w[1] - last.1) > 1e-3 {
            pts.push((w[0], w[1]));
        }
    }
    let n = pts.len();
    let dir = if n >= 2 {
        let (a, b) = (pts[n - 2], pts[n - 1]);
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        ((b.0 - a.0) / len, (b.1 - a.1) / len)
    } else {
        (1.0, 0.0)
    };
    let last = pts[n - 1];
    pts.push((last.0 + dir.0 * extend, last.1 + dir.1 * extend));
    pts
}

/// Along-path distance and unsigned lateral offset of `p` from the polyline.
fn project(path: &[(f64, f64)], p: (f64, f64)) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::INFINITY);
    let mut acc = 0.0;
    for seg in path.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let len = len2.sqrt();
        let u = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
        let (qx, qy) = (a.0 + u * dx, a.1 + u * dy);
        let lat = (p.0 - qx).hypot(p.1 - qy);
        if lat < best.1 {
            best = (acc + u * len, lat);
        }
        acc += len;
    }
    best
}

/// Free distances `(s1, s2)` along the waypoint corridor for forecasts at
/// one and two control periods ahead.
pub fn free_distances(waypoints: &[[f64; 2]], objects: &[TrackedObject], cfg: &ControllerConfig) -> (f64, f64) {
    let path = corridor(waypoints, 30.0);
    let mut s = [cfg.horizon, cfg.horizon];
    for o in objects {
        for (k, tau) in [cfg.dt, 2.0 * cfg.dt].into_iter().enumerate() {
            let p = (o.object.x + o.velocity.0 * tau, o.object.y + o.velocity.1 * tau);
            let (along, lat) = project(&path, p);
            if along <= 0.0 || lat >= (cfg.buffer.1 + o.object.width) / 2.0 {
                continue;
            }
            let free = (along - o.object.length / 2.0 - cfg.buffer.0 / 2.0).max(0.0);
            s[k] = s[k].min(free);
        }
    }
    (s[0], s[1])
}

/// Diagnostics of one control step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControlTrace {
    pub desired_speed: f64,
    pub target_speed: f64,
    pub s1: f64,
    pub s2: f64,
}

/// Stateful controller for one ego vehicle.
#[derive(Clone, Debug)]
pub struct Controller {
    pub config: ControllerConfig,
    lateral: Pid,
    longitudinal: Pid,
    tracker: ObjectTracker,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        let (lp, li, ld) = config.lateral;
        let (gp, gi, gd) = config.longitudinal;
        Self {
            lateral: Pid::new(lp, li, ld, config.dt, config.integral_cap),
            longitudinal: Pid::new(gp, gi, gd, config.dt, config.integral_cap),
            tracker: ObjectTracker::default(),
            config,
        }
    }

    pub fn reset(&mut self) {
        self.lateral.reset();
        self.longitudinal.reset();
        self.tracker.reset();
    }

    pub fn control_step(
        &mut self,
        waypoints: &[[f64; 2]],
        traffic: &TrafficState,
        objects: &[DetectedObject],
        speed: f64,
        pose: &Pose,
    ) -> Result<(ControlSignal, ControlTrace)> {
        let cfg = &self.config;
        if waypoints.len() < 2 {
            return Err(Error::Precondition("control needs at least two waypoints".into()));
        }
        let tracked = self.tracker.update(objects, pose, cfg);
        let (s1, s2) = free_distances(waypoints, &tracked, cfg);
        let env = SafetyEnvelope {
            v0: speed.max(0.0),
            s1,
            s2,
            t: cfg.dt,
            a_max: cfg.a_max,
            v_max: cfg.v_max,
        };
        let (v1, _) = safe_speed(&env);
        let (w0, w1) = (waypoints[0], waypoints[1]);
        let desired = ((w1[0] - w0[0]).hypot(w1[1] - w0[1]) / cfg.dt).min(cfg.v_max);
        let mut target = desired.min(v1);
        if traffic.red_light > cfg.red_light_threshold {
            target = 0.0;
        }
        let steer = lateral_pid(&mut self.lateral, waypoints, cfg.aim_points)?;
        let (throttle, brake) = if target < cfg.brake_speed {
            self.longitudinal.reset();
            (0.0, 1.0)
        } else {
            longitudinal_pid(&mut self.longitudinal, target, speed, cfg.max_throttle, cfg.brake_deadband)
        };
        Ok((
            ControlSignal::clamped(steer, throttle, brake),
            ControlTrace {
                desired_speed: desired,
                target_speed: target,
                s1,
                s2,
            },
        ))
    }
}
