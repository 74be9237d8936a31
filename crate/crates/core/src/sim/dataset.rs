//! Expert demonstrations recorded at every tick, and their binary format.
//!
//! Layout (little-endian): magic `FDDS`, `u32` version, `u64` record count,
//! then per record the scalar header, three `3×64×64` byte rasters, the
//! lidar cloud, waypoints, objects and traffic state. Floats are stored as
//! their bit patterns so a reload is exact.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::expert::{ground_truth_objects, ground_truth_traffic, Expert};
use super::harness::{run_route_traced, HarnessConfig};
use super::route::{Route, FIXTURE_COUNT};
use super::sensors::{CameraImage, SensorBundle, IMAGE_LEN};
use crate::bev::PointCloud;
use crate::controller::{ControlSignal, Pose};
use crate::error::{Error, Result};
use crate::heads::{encode_objects, DetectedObject, Heatmap, TrafficState, WAYPOINTS};
use crate::par;

const MAGIC: &[u8; 4] = b"FDDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRecord {
    pub route_id: u32,
    pub town: u32,
    pub tick: u32,
    pub speed: f64,
    pub pose: Pose,
    /// Sparse route target, ego frame.
    pub target: (f64, f64),
    pub sensors: SensorBundle,
    /// Expert waypoints, ego frame.
    pub waypoints: Vec<[f64; 2]>,
    /// Ground-truth agents, ego frame.
    pub objects: Vec<DetectedObject>,
    pub traffic: TrafficState,
}

impl ExpertRecord {
    pub fn heatmap(&self) -> Heatmap {
        encode_objects(&self.objects)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<ExpertRecord>,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_bits().to_le_bytes())?)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn bad(detail: String) -> Error {
    Error::Format {
        what: "dataset",
        detail,
    }
}

impl ExpertRecord {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for v in [self.route_id, self.town, self.tick] {
            put_u32(w, v)?;
        }
        for v in [self.speed, self.pose.x, self.pose.y, self.pose.yaw, self.target.0, self.target.1] {
            put_f64(w, v)?;
        }
        for c in &self.sensors.cameras {
            w.write_all(c.bytes())?;
        }
        self.sensors.lidar.write_to(w)?;
        put_u32(w, self.waypoints.len() as u32)?;
        for p in &self.waypoints {
            put_f64(w, p[0])?;
            put_f64(w, p[1])?;
        }
        put_u32(w, self.objects.len() as u32)?;
        for o in &self.objects {
            for v in [o.x, o.y, o.width, o.length, o.speed, o.yaw] {
                put_f64(w, v)?;
            }
        }
        for v in self.traffic.to_array() {
            put_f64(w, v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let route_id = get_u32(r)?;
        let town = get_u32(r)?;
        let tick = get_u32(r)?;
        let speed = get_f64(r)?;
        let pose = Pose {
            x: get_f64(r)?,
            y: get_f64(r)?,
            yaw: get_f64(r)?,
        };
        let target = (get_f64(r)?, get_f64(r)?);
        let mut cam = || -> Result<CameraImage> {
            let mut b = vec![0u8; IMAGE_LEN];
            r.read_exact(&mut b)?;
            CameraImage::from_bytes(b)
        };
        let cameras = [cam()?, cam()?, cam()?];
        let lidar = PointCloud::read_from(r)?;
        let n = get_u32(r)? as usize;
        if n != WAYPOINTS {
            return Err(bad(format!("{n} waypoints, expected {WAYPOINTS}")));
        }
        let mut waypoints = Vec::with_capacity(n);
        for _ in 0..n {
            waypoints.push([get_f64(r)?, get_f64(r)?]);
        }
        let n = get_u32(r)? as usize;
        let mut objects = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            objects.push(DetectedObject {
                x: get_f64(r)?,
                y: get_f64(r)?,
                width: get_f64(r)?,
                length: get_f64(r)?,
                speed: get_f64(r)?,
                yaw: get_f64(r)?,
            });
        }
        let traffic = TrafficState::from_slice(&[get_f64(r)?, get_f64(r)?, get_f64(r)?])?;
        Ok(Self {
            route_id,
            town,
            tick,
            speed,
            pose,
            target,
            sensors: SensorBundle { cameras, lidar },
            waypoints,
            objects,
            traffic,
        })
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            r.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut m = [0u8; 4];
        r.read_exact(&mut m)?;
        if &m != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let v = get_u32(r)?;
        if v != VERSION {
            return Err(bad(format!("version {v}")));
        }
        let n = get_u64(r)? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for i in 0..n {
            records.push(ExpertRecord::read_from(r).map_err(|e| bad(format!("record {i}: {e}")))?);
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// `count` seeded variants of the built-in routes, numbered after them so
/// the fixtures themselves stay held out.
pub fn training_routes(count: usize, seed: u64) -> Result<Vec<Route>> {
    (FIXTURE_COUNT..FIXTURE_COUNT + count)
        .map(|i| Route::variant(i, Some(seed.wrapping_mul(1_000_003).wrapping_add(i as u64))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectConfig {
    /// Gaussian noise added to the executed steer; labels stay clean.
    pub steer_noise: f64,
    pub max_ticks: u32,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            steer_noise: 0.05,
            max_ticks: 1000,
        }
    }
}

/// Expert wrapper that perturbs the steer it executes.
struct NoisyExpert {
    inner: Expert,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl super::harness::Policy for NoisyExpert {
    fn reset(&mut self, _route: &Route) {
        self.inner.reset();
    }

    fn needs_sensors(&self) -> bool {
        true
    }

    fn act(&mut self, obs: &super::harness::Observation<'_>) -> Result<(Vec<[f64; 2]>, ControlSignal)> {
        let (wp, c) = self.inner.act(obs.scene)?;
        let Some(n) = self.noise else { return Ok((wp, c)) };
        let steer = c.steer() + n.sample(&mut self.rng);
        Ok((wp, ControlSignal::clamped(steer, c.throttle(), c.brake())))
    }
}

/// One record per expert tick on every route, routes in order.
pub fn collect_dataset(routes: &[Route], seed: u64, cfg: &HarnessConfig, collect: &CollectConfig) -> Result<Dataset> {
    let noise = if collect.steer_noise > 0.0 {
        Some(Normal::new(0.0, collect.steer_noise).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let per_route = par::map_range(routes.len(), |i| {
        let route = Arc::new(routes[i].clone());
        let mut policy = NoisyExpert {
            inner: Expert::new(cfg.expert.clone(), cfg.controller.clone(), cfg.vehicle.clone()),
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        };
        let mut out = Vec::new();
        run_route_traced(&mut policy, &route, seed.wrapping_add(i as u64), cfg, collect.max_ticks, |t| {
            let scene = t.scene;
            let Some(sensors) = t.sensors else { return };
            out.push(ExpertRecord {
                route_id: route.id as u32,
                town: route.town,
                tick: scene.tick,
                speed: scene.ego.speed,
                pose: scene.ego.pose,
                target: super::harness::target_in_ego(scene),
                sensors: sensors.clone(),
                waypoints: t.waypoints.to_vec(),
                objects: ground_truth_objects(scene),
                traffic: ground_truth_traffic(scene, &cfg.expert, &cfg.vehicle),
            });
        });
        out
    });
    Ok(Dataset {
        records: per_route.into_iter().flatten().collect(),
    })
}

/// Collects from training routes until at least `frames` records exist,
/// then truncates to exactly `frames`.
pub fn collect_frames(frames: usize, seed: u64, cfg: &HarnessConfig, collect: &CollectConfig) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut next = 0;
    while records.len() < frames {
        let batch = training_routes(next + 8, seed)?.split_off(next);
        next += batch.len();
        records.extend(collect_dataset(&batch, seed, cfg, collect)?.records);
    }
    records.truncate(frames);
    Ok(Dataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::harness::run_route;
    use crate::sim::route::route_set;

    fn tiny() -> Dataset {
        let cfg = HarnessConfig::default();
        let routes = vec![Route::fixture(2).unwrap()];
        let collect = CollectConfig {
            max_ticks: 6,
            ..Default::default()
        };
        collect_dataset(&routes, 3, &cfg, &collect).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = tiny();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, d);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
        buf[0] = b'X';
        assert!(Dataset::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn one_record_per_tick_at_two_hertz() {
        let d = tiny();
        assert_eq!(d.len(), 6);
        for (k, r) in d.records.iter().enumerate() {
            assert_eq!(r.tick as usize, k);
            assert_eq!(r.waypoints.len(), WAYPOINTS);
        }
        let h = d.records[0].heatmap();
        assert_eq!(h.tensor().shape(), &[20, 20, 7]);
    }

    #[test]
    fn count_matches_expert_ticks() {
        let cfg = HarnessConfig::default();
        let routes = route_set(2, 0).unwrap();
        let collect = CollectConfig {
            steer_noise: 0.0,
            ..Default::default()
        };
        let d = collect_dataset(&routes, 0, &cfg, &collect).unwrap();
        let ticks: u32 = routes
            .iter()
            .map(|r| {
                let mut e = Expert::new(cfg.expert.clone(), cfg.controller.clone(), cfg.vehicle.clone());
                run_route(&mut e, &Arc::new(r.clone()), 0, &cfg, collect.max_ticks).ticks
            })
            .sum();
        assert_eq!(d.len(), ticks as usize);
    }

    #[test]
    fn training_routes_exclude_fixtures() {
        let r = training_routes(3, 1).unwrap();
        assert_eq!(r.iter().map(|r| r.id).collect::<Vec<_>>(), vec![4, 5, 6]);
    }
}
