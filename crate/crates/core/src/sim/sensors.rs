//! Procedural sensors: three top-down occupancy "cameras" and a lidar cloud,
//! all in the ego frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::route::{AgentKind, LightState};
use super::world::Scene;
use crate::bev::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

/// Channel order of every camera raster.
pub const CH_LANE: usize = 0;
pub const CH_AGENTS: usize = 1;
pub const CH_SIGNAL: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SensorConfig {
    /// Depth covered by each camera raster, meters.
    pub camera_range: f64,
    /// Camera axis angles, clockwise from straight ahead: left, front, right.
    pub camera_yaws_deg: [f64; 3],
    pub noise_std: f64,
    pub lane_half_width: f64,
    pub stop_band: f64,
    pub lidar_range: f64,
    pub lidar_spacing: f64,
    pub lidar_jitter: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            camera_range: 32.0,
            camera_yaws_deg: [-60.0, 0.0, 60.0],
            noise_std: 0.03,
            lane_half_width: 1.75,
            stop_band: 0.75,
            lidar_range: 40.0,
            lidar_spacing: 0.4,
            lidar_jitter: 0.03,
        }
    }
}

/// `3×64×64` raster quantized to bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CameraImage {
    data: Vec<u8>,
}

impl CameraImage {
    pub fn from_bytes(data: Vec<u8>) -> Result<Self> {
        if data.len() != IMAGE_LEN {
            return Err(Error::Format {
                what: "camera image",
                detail: format!("{} bytes, expected {IMAGE_LEN}", data.len()),
            });
        }
        Ok(Self { data })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[(ch * IMAGE_SIZE + r) * IMAGE_SIZE + c] as f64 / 255.0
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(&[IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("fixed shape")
    }
}

/// One frame of synthetic sensing.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorBundle {
    /// Left, front, right.
    pub cameras: [CameraImage; 3],
    pub lidar: PointCloud,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Route centerline near the ego, in the ego frame, with arclengths.
fn local_path(scene: &Scene, behind: f64, ahead: f64) -> Vec<(f64, f64, f64)> {
    let path = &scene.route.path;
    let (lo, hi) = ((scene.progress - behind).max(0.0), (scene.progress + ahead).min(path.length()));
    let mut out = Vec::new();
    let mut s = lo;
    while s < hi {
        let p = scene.ego.pose.to_ego(path.point_at(s));
        out.push((p.0, p.1, s));
        s += 1.0;
    }
    let p = scene.ego.pose.to_ego(path.point_at(hi));
    out.push((p.0, p.1, hi));
    out
}

/// Distance and arclength of the closest centerline point.
fn nearest_on(path: &[(f64, f64, f64)], p: (f64, f64)) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for w in path.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        if len2 <= 0.0 {
            continue;
        }
        let u = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
        let d = (p.0 - a.0 - u * dx).hypot(p.1 - a.1 - u * dy);
        if d < best.0 {
            best = (d, a.2 + u * (b.2 - a.2));
        }
    }
    best
}

fn agent_value(kind: AgentKind) -> f64 {
    match kind {
        AgentKind::Vehicle => 1.0,
        AgentKind::Pedestrian => 0.8,
        AgentKind::Static => 0.6,
    }
}

/// Renders the three camera rasters. Pixel `(r, c)` of a camera with axis
/// angle φ sits at depth `range·(1 − (r+½)/64)` along the axis and
/// `range·((c+½)/64 − ½)` to its right.
pub fn render_cameras(scene: &Scene, cfg: &SensorConfig, rng: &mut ChaCha8Rng) -> [CameraImage; 3] {
    let path = local_path(scene, 10.0, cfg.camera_range * 2.0);
    let pose = scene.ego.pose;
    let rects: Vec<_> = scene
        .agents
        .iter()
        .map(|a| {
            let c = pose.to_ego((a.x, a.y));
            let yaw = -(a.yaw - pose.yaw);
            (c, yaw, a.length / 2.0, a.width / 2.0, agent_value(a.kind))
        })
        .collect();
    let red_lines: Vec<f64> = scene
        .route
        .lights
        .iter()
        .filter(|l| l.state(scene.tick) == LightState::Red)
        .map(|l| l.s_stop)
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("finite std");
    let px = cfg.camera_range / IMAGE_SIZE as f64;
    cfg.camera_yaws_deg.map(|deg| {
        let phi = deg.to_radians();
        let (cp, sp) = (phi.cos(), phi.sin());
        let mut data = vec![0u8; IMAGE_LEN];
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                let u = cfg.camera_range - (r as f64 + 0.5) * px;
                let v = (c as f64 + 0.5) * px - cfg.camera_range / 2.0;
                let p = (u * cp - v * sp, u * sp + v * cp);
                let (d, s) = nearest_on(&path, p);
                let lane = if d <= cfg.lane_half_width { 1.0 } else { 0.0 };
                let agents = rects
                    .iter()
                    .filter(|(ctr, yaw, hl, hw, _)| {
                        let (dx, dy) = (p.0 - ctr.0, p.1 - ctr.1);
                        let (cy, sy) = (yaw.cos(), yaw.sin());
                        (dx * cy + dy * sy).abs() <= *hl && (-dx * sy + dy * cy).abs() <= *hw
                    })
                    .map(|r| r.4)
                    .fold(0.0, f64::max);
                let signal = if d <= 2.0 * cfg.lane_half_width && red_lines.iter().any(|&l| (s - l).abs() <= cfg.stop_band) {
                    1.0
                } else {
                    0.0
                };
                let i = r * IMAGE_SIZE + c;
                for (ch, val) in [lane, agents, signal].into_iter().enumerate() {
                    let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                    data[ch * plane + i] = quantize(val + n);
                }
            }
        }
        CameraImage { data }
    })
}

/// Points on agent outlines at a few heights plus road-edge markers.
pub fn render_lidar(scene: &Scene, cfg: &SensorConfig, rng: &mut ChaCha8Rng) -> PointCloud {
    let pose = scene.ego.pose;
    let jitter = Normal::new(0.0, cfg.lidar_jitter.max(1e-12)).expect("finite std");
    let mut j = |v: f64| if cfg.lidar_jitter > 0.0 { v + jitter.sample(rng) } else { v };
    let mut pts = Vec::new();
    let in_range = |p: (f64, f64)| p.0.hypot(p.1) <= cfg.lidar_range;
    for a in &scene.agents {
        let corners = a.rect().corners();
        let heights: &[f64] = match a.kind {
            AgentKind::Pedestrian => &[0.4, 0.9, 1.4],
            _ => &[0.3, 0.8, 1.3],
        };
        for k in 0..4 {
            let (p0, p1) = (corners[k], corners[(k + 1) % 4]);
            let len = (p1.0 - p0.0).hypot(p1.1 - p0.1);
            let n = (len / cfg.lidar_spacing).ceil().max(1.0) as usize;
            for i in 0..n {
                let u = i as f64 / n as f64;
                let e = pose.to_ego((p0.0 + u * (p1.0 - p0.0), p0.1 + u * (p1.1 - p0.1)));
                if !in_range(e) {
                    continue;
                }
                for &z in heights {
                    pts.push([j(e.0) as f32, j(e.1) as f32, j(z) as f32]);
                }
            }
        }
    }
    let path = &scene.route.path;
    let (lo, hi) = ((scene.progress - 10.0).max(0.0), (scene.progress + cfg.lidar_range).min(path.length()));
    let mut s = lo.ceil();
    while s <= hi {
        for lateral in [-7.0, 3.5] {
            let e = pose.to_ego(path.offset_point(s, lateral));
            if in_range(e) {
                pts.push([j(e.0) as f32, j(e.1) as f32, j(0.15) as f32]);
            }
        }
        s += 1.0;
    }
    PointCloud::new(pts).expect("finite points")
}

/// Deterministic in `(seed, tick)`.
pub fn render(scene: &Scene, cfg: &SensorConfig, seed: u64) -> SensorBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((scene.tick as u64) << 32) ^ 0x5eed);
    let cameras = render_cameras(scene, cfg, &mut rng);
    let lidar = render_lidar(scene, cfg, &mut rng);
    SensorBundle { cameras, lidar }
}
