//! Scripted routes: a centerline, signalized stop lines and agents whose
//! motion is a closed-form function of the tick.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::{Polyline, Rect};
use crate::error::Result;

/// Tick period in seconds (2 Hz).
pub const TICK: f64 = 0.5;

/// Number of built-in fixture routes.
pub const FIXTURE_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LightState {
    Green,
    Red,
}

/// A fixed-cycle signal with its stop line across the route at `s_stop`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrafficLight {
    pub s_stop: f64,
    pub green_ticks: u32,
    pub red_ticks: u32,
    pub offset: u32,
}

impl TrafficLight {
    pub fn state(&self, tick: u32) -> LightState {
        let period = self.green_ticks + self.red_ticks;
        if (tick + self.offset) % period < self.green_ticks {
            LightState::Green
        } else {
            LightState::Red
        }
    }

    /// Red now or at any tick within the next `horizon` ticks.
    pub fn red_within(&self, tick: u32, horizon: u32) -> bool {
        (tick..=tick + horizon).any(|t| self.state(t) == LightState::Red)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    Pedestrian,
    Vehicle,
    Static,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Pedestrian => "pedestrian",
            AgentKind::Vehicle => "vehicle",
            AgentKind::Static => "static",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// Fixed at route arclength `s`, offset to the right by `lateral`.
    Parked { s: f64, lateral: f64 },
    /// Travels along the route at a constant offset; `direction` is ±1.
    Lane {
        s0: f64,
        lateral: f64,
        speed: f64,
        start_tick: u32,
        direction: f64,
    },
    /// Walks straight across the route at arclength `s`.
    Crossing {
        s: f64,
        from: f64,
        to: f64,
        speed: f64,
        start_tick: u32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentScript {
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub motion: Motion,
}

/// An agent's world-frame state at one tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub id: usize,
    pub kind: AgentKind,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    pub fn rect(&self) -> Rect {
        Rect {
            x: self.x,
            y: self.y,
            yaw: self.yaw,
            half_length: self.length / 2.0,
            half_width: self.width / 2.0,
        }
    }
}

impl AgentScript {
    pub fn vehicle(motion: Motion) -> Self {
        Self {
            kind: AgentKind::Vehicle,
            length: 4.5,
            width: 1.9,
            motion,
        }
    }

    pub fn parked(s: f64, lateral: f64) -> Self {
        Self {
            kind: AgentKind::Static,
            length: 4.5,
            width: 1.9,
            motion: Motion::Parked { s, lateral },
        }
    }

    pub fn pedestrian(motion: Motion) -> Self {
        Self {
            kind: AgentKind::Pedestrian,
            length: 0.6,
            width: 0.6,
            motion,
        }
    }

    /// State at time `t` seconds; `None` once a lane vehicle has left the
    /// route by more than 30 m.
    pub fn state_at(&self, id: usize, path: &Polyline, t: f64) -> Option<AgentState> {
        let (x, y, yaw, speed) = match self.motion {
            Motion::Parked { s, lateral } => {
                let (x, y) = path.offset_point(s, lateral);
                (x, y, path.heading_at(s), 0.0)
            }
            Motion::Lane {
                s0,
                lateral,
                speed,
                start_tick,
                direction,
            } => {
                let moving = (t - start_tick as f64 * TICK).max(0.0);
                let s = s0 + direction * speed * moving;
                if s < -30.0 || s > path.length() + 30.0 {
                    return None;
                }
                let (x, y) = path.offset_point(s, lateral);
                let h = path.heading_at(s) + if direction < 0.0 { PI } else { 0.0 };
                (x, y, h, if moving > 0.0 { speed } else { 0.0 })
            }
            Motion::Crossing {
                s,
                from,
                to,
                speed,
                start_tick,
            } => {
                let moving = (t - start_tick as f64 * TICK).max(0.0);
                let dir = (to - from).signum();
                let lateral = from + dir * speed * moving;
                let (x, y) = path.offset_point(s, lateral);
                // Facing the walking direction: right of the path is heading − π/2.
                let h = path.heading_at(s) - dir * PI / 2.0;
                (x, y, h, if moving > 0.0 { speed } else { 0.0 })
            }
        };
        Some(AgentState {
            id,
            kind: self.kind,
            x,
            y,
            yaw,
            speed,
            length: self.length,
            width: self.width,
        })
    }
}

/// Centerline construction from straight and circular pieces.
#[derive(Clone, Debug)]
pub struct PathBuilder {
    points: Vec<(f64, f64)>,
    heading: f64,
    step: f64,
}

impl PathBuilder {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            points: vec![(x, y)],
            heading,
            step: 1.0,
        }
    }

    fn last(&self) -> (f64, f64) {
        *self.points.last().unwrap()
    }

    pub fn straight(mut self, length: f64) -> Self {
        let n = (length / self.step).ceil().max(1.0) as usize;
        let (x0, y0) = self.last();
        for i in 1..=n {
            let d = length * i as f64 / n as f64;
            self.points.push((x0 + d * self.heading.cos(), y0 + d * self.heading.sin()));
        }
        self
    }

    /// Circular arc; positive `degrees` turns left.
    pub fn arc(mut self, radius: f64, degrees: f64) -> Self {
        let sweep = degrees.to_radians();
        let n = ((radius * sweep.abs()) / self.step).ceil().max(1.0) as usize;
        let (x0, y0) = self.last();
        let side = sweep.signum();
        let (cx, cy) = (
            x0 - side * radius * self.heading.sin(),
            y0 + side * radius * self.heading.cos(),
        );
        let start = self.heading - side * PI / 2.0;
        for i in 1..=n {
            let a = start + sweep * i as f64 / n as f64;
            self.points.push((cx + radius * a.cos(), cy + radius * a.sin()));
        }
        self.heading += sweep;
        self
    }

    pub fn build(self) -> Result<Polyline> {
        Polyline::new(self.points)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub id: usize,
    pub name: String,
    pub town: u32,
    pub path: Polyline,
    pub lights: Vec<TrafficLight>,
    pub agents: Vec<AgentScript>,
    /// Spacing of the sparse target points along the route, meters.
    pub target_spacing: f64,
}

impl Route {
    pub fn length(&self) -> f64 {
        self.path.length()
    }

    pub fn agent_states(&self, t: f64) -> Vec<AgentState> {
        self.agents
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.state_at(i, &self.path, t))
            .collect()
    }

    /// Next sparse target strictly beyond `progress + lead`, capped at the end.
    pub fn target_after(&self, progress: f64, lead: f64) -> (f64, f64) {
        let k = ((progress + lead) / self.target_spacing).floor() + 1.0;
        self.path.point_at((k * self.target_spacing).min(self.length()))
    }

    /// One of the built-in routes; index `i` maps to town `i`.
    pub fn fixture(i: usize) -> Result<Route> {
        Self::variant(i, None)
    }

    /// Fixture geometry with agent timing and signal phases jittered by `seed`.
    pub fn variant(i: usize, seed: Option<u64>) -> Result<Route> {
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let mut jit = |lo: f64, hi: f64| -> f64 {
            match rng.as_mut() {
                Some(r) => r.gen_range(lo..hi),
                None => 0.0,
            }
        };
        let kind = i % FIXTURE_COUNT;
        let (name, path, lights, agents) = match kind {
            0 => {
                let path = PathBuilder::new(0.0, 0.0, 0.0).straight(70.0).arc(15.0, 90.0).straight(50.0).build()?;
                let light = TrafficLight {
                    s_stop: 45.0,
                    green_ticks: 16,
                    red_ticks: 16,
                    offset: jit(0.0, 12.0) as u32,
                };
                let agents = vec![
                    AgentScript::parked(100.0 + jit(-8.0, 8.0), 4.5),
                    AgentScript::vehicle(Motion::Lane {
                        s0: 130.0,
                        lateral: -3.5,
                        speed: 4.0 + jit(-1.0, 1.0),
                        start_tick: 0,
                        direction: -1.0,
                    }),
                ];
                ("signal-left-turn", path, vec![light], agents)
            }
            1 => {
                let path = PathBuilder::new(0.0, 0.0, PI / 2.0).straight(40.0).arc(20.0, -60.0).straight(70.0).build()?;
                let agents = vec![
                    AgentScript::vehicle(Motion::Lane {
                        s0: 25.0 + jit(-5.0, 10.0),
                        lateral: 0.0,
                        speed: 3.0 + jit(-0.5, 0.5),
                        start_tick: 0,
                        direction: 1.0,
                    }),
                    AgentScript::vehicle(Motion::Lane {
                        s0: 120.0,
                        lateral: -3.5,
                        speed: 4.0,
                        start_tick: jit(0.0, 10.0) as u32,
                        direction: -1.0,
                    }),
                    AgentScript::parked(60.0 + jit(-10.0, 10.0), 4.5),
                ];
                ("lead-vehicle-right-bend", path, vec![], agents)
            }
            2 => {
                let path = PathBuilder::new(0.0, 0.0, 0.0).straight(130.0).build()?;
                let agents = vec![
                    AgentScript::pedestrian(Motion::Crossing {
                        s: 65.0 + jit(-10.0, 10.0),
                        from: -7.0,
                        to: 7.0,
                        speed: 1.2 + jit(-0.2, 0.3),
                        start_tick: (24.0 + jit(-6.0, 6.0)) as u32,
                    }),
                    AgentScript::parked(30.0 + jit(-5.0, 5.0), 4.5),
                    AgentScript::vehicle(Motion::Lane {
                        s0: 125.0,
                        lateral: -3.5,
                        speed: 4.0 + jit(-1.0, 1.0),
                        start_tick: 4,
                        direction: -1.0,
                    }),
                ];
                ("pedestrian-crossing", path, vec![], agents)
            }
            _ => {
                let path = PathBuilder::new(0.0, 0.0, -PI / 4.0)
                    .straight(30.0)
                    .arc(18.0, 45.0)
                    .arc(18.0, -45.0)
                    .straight(80.0)
                    .build()?;
                let light = TrafficLight {
                    s_stop: 85.0,
                    green_ticks: 20,
                    red_ticks: 12,
                    offset: (10.0 + jit(-8.0, 8.0)) as u32,
                };
                let agents = vec![
                    AgentScript::parked(50.0 + jit(-5.0, 5.0), 4.5),
                    AgentScript::pedestrian(Motion::Lane {
                        s0: 20.0,
                        lateral: 6.0,
                        speed: 1.3,
                        start_tick: 0,
                        direction: 1.0,
                    }),
                    AgentScript::vehicle(Motion::Lane {
                        s0: 135.0,
                        lateral: -3.5,
                        speed: 4.5,
                        start_tick: jit(0.0, 8.0) as u32,
                        direction: -1.0,
                    }),
                ];
                ("s-curve-signal", path, vec![light], agents)
            }
        };
        Ok(Route {
            id: i,
            name: name.to_string(),
            town: kind as u32,
            path,
            lights,
            agents,
            target_spacing: 15.0,
        })
    }
}

/// `count` routes: the fixtures for indices below [`FIXTURE_COUNT`], seeded
/// variants of them beyond.
pub fn route_set(count: usize, seed: u64) -> Result<Vec<Route>> {
    (0..count)
        .map(|i| {
            if i < FIXTURE_COUNT {
                Route::fixture(i)
            } else {
                Route::variant(i, Some(seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
            }
        })
        .collect()
}
