//! Flat `key = value` configuration covering every loss weight, controller
//! gain, penalty, threshold and harness constant.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error; missing keys keep their defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::heads::DETECTION_THRESHOLD;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::saliency::SaliencyTrainConfig;
use crate::sim::dataset::CollectConfig;
use crate::sim::harness::HarnessConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub loss: LossWeights,
    pub harness: HarnessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub saliency_train: SaliencyTrainConfig,
    pub collect: CollectConfig,
    pub detection_threshold: f64,
    /// Expert frames gathered by `collect`.
    pub frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossWeights::default(),
            harness: HarnessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            saliency_train: SaliencyTrainConfig::default(),
            collect: CollectConfig::default(),
            detection_threshold: DETECTION_THRESHOLD,
            frames: 2000,
        }
    }
}

/// Mutable view of one configuration entry.
pub enum Field<'a> {
    F64(&'a mut f64),
    Usize(&'a mut usize),
    U32(&'a mut u32),
    U64(&'a mut u64),
    Bool(&'a mut bool),
}

impl Field<'_> {
    fn render(&self) -> String {
        match self {
            Field::F64(v) => format!("{v:?}"),
            Field::Usize(v) => v.to_string(),
            Field::U32(v) => v.to_string(),
            Field::U64(v) => v.to_string(),
            Field::Bool(v) => v.to_string(),
        }
    }

    fn parse(self, key: &str, s: &str) -> Result<()> {
        let bad = |e: String| Error::Config(format!("{key}: {e}"));
        match self {
            Field::F64(v) => *v = s.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            Field::Usize(v) => *v = s.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            Field::U32(v) => *v = s.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            Field::U64(v) => *v = s.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            Field::Bool(v) => *v = s.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?,
        }
        Ok(())
    }
}

fn controller_fields(c: &mut ControllerConfig, f: &mut dyn FnMut(&str, Field<'_>)) {
    f("pid.lateral.kp", Field::F64(&mut c.lateral.0));
    f("pid.lateral.ki", Field::F64(&mut c.lateral.1));
    f("pid.lateral.kd", Field::F64(&mut c.lateral.2));
    f("pid.longitudinal.kp", Field::F64(&mut c.longitudinal.0));
    f("pid.longitudinal.ki", Field::F64(&mut c.longitudinal.1));
    f("pid.longitudinal.kd", Field::F64(&mut c.longitudinal.2));
    f("pid.dt", Field::F64(&mut c.dt));
    f("pid.integral_cap", Field::F64(&mut c.integral_cap));
    f("controller.a_max", Field::F64(&mut c.a_max));
    f("controller.v_max", Field::F64(&mut c.v_max));
    f("controller.buffer_length", Field::F64(&mut c.buffer.0));
    f("controller.buffer_width", Field::F64(&mut c.buffer.1));
    f("controller.red_light_threshold", Field::F64(&mut c.red_light_threshold));
    f("controller.brake_speed", Field::F64(&mut c.brake_speed));
    f("controller.max_throttle", Field::F64(&mut c.max_throttle));
    f("controller.brake_deadband", Field::F64(&mut c.brake_deadband));
    f("controller.aim_points", Field::Usize(&mut c.aim_points));
    f("controller.track_window", Field::Usize(&mut c.track_window));
    f("controller.track_gate", Field::F64(&mut c.track_gate));
    f("controller.horizon", Field::F64(&mut c.horizon));
}

impl RunConfig {
    /// Visits every entry in a fixed order.
    pub fn visit(&mut self, f: &mut dyn FnMut(&str, Field<'_>)) {
        let l = &mut self.loss;
        f("loss.wp", Field::F64(&mut l.wp));
        f("loss.ht", Field::F64(&mut l.ht));
        f("loss.tf", Field::F64(&mut l.tf));
        f("loss.tl", Field::F64(&mut l.tl));
        f("loss.sl", Field::F64(&mut l.sl));
        f("loss.i", Field::F64(&mut l.i));
        let d = &mut self.saliency_train.weights;
        f("loss.kld", Field::F64(&mut d.kld));
        f("loss.cc", Field::F64(&mut d.cc));
        f("loss.sim", Field::F64(&mut d.sim));

        controller_fields(&mut self.harness.controller, f);
        f("detection.threshold", Field::F64(&mut self.detection_threshold));

        let h = &mut self.harness;
        let p = &mut h.penalties;
        f("penalty.ped", Field::F64(&mut p.ped));
        f("penalty.veh", Field::F64(&mut p.veh));
        f("penalty.stat", Field::F64(&mut p.stat));
        f("penalty.red", Field::F64(&mut p.red));
        f("penalty.timeout", Field::F64(&mut p.timeout));
        f("penalty.block", Field::F64(&mut p.block));
        f("harness.timeout_factor", Field::F64(&mut h.timeout_factor));
        f("harness.block_ticks", Field::U32(&mut h.block_ticks));
        f("harness.block_speed", Field::F64(&mut h.block_speed));
        f("harness.route_lost", Field::F64(&mut h.route_lost));
        f("harness.complete_tolerance", Field::F64(&mut h.complete_tolerance));

        let v = &mut h.vehicle;
        f("vehicle.wheelbase", Field::F64(&mut v.wheelbase));
        f("vehicle.max_wheel_angle", Field::F64(&mut v.max_wheel_angle));
        f("vehicle.accel", Field::F64(&mut v.accel));
        f("vehicle.brake_decel", Field::F64(&mut v.brake_decel));
        f("vehicle.drag", Field::F64(&mut v.drag));
        f("vehicle.length", Field::F64(&mut v.length));
        f("vehicle.width", Field::F64(&mut v.width));
        f("vehicle.substeps", Field::Usize(&mut v.substeps));

        let s = &mut h.sensors;
        f("sensors.camera_range", Field::F64(&mut s.camera_range));
        f("sensors.camera_left_deg", Field::F64(&mut s.camera_yaws_deg[0]));
        f("sensors.camera_front_deg", Field::F64(&mut s.camera_yaws_deg[1]));
        f("sensors.camera_right_deg", Field::F64(&mut s.camera_yaws_deg[2]));
        f("sensors.noise_std", Field::F64(&mut s.noise_std));
        f("sensors.lane_half_width", Field::F64(&mut s.lane_half_width));
        f("sensors.stop_band", Field::F64(&mut s.stop_band));
        f("sensors.lidar_range", Field::F64(&mut s.lidar_range));
        f("sensors.lidar_spacing", Field::F64(&mut s.lidar_spacing));
        f("sensors.lidar_jitter", Field::F64(&mut s.lidar_jitter));

        let e = &mut h.expert;
        f("expert.cruise_speed", Field::F64(&mut e.cruise_speed));
        f("expert.plan_accel", Field::F64(&mut e.plan_accel));
        f("expert.plan_decel", Field::F64(&mut e.plan_decel));
        f("expert.hard_decel", Field::F64(&mut e.hard_decel));
        f("expert.light_horizon", Field::U32(&mut e.light_horizon));
        f("expert.stop_margin", Field::F64(&mut e.stop_margin));
        f("expert.follow_gap", Field::F64(&mut e.follow_gap));
        f("expert.corridor_margin", Field::F64(&mut e.corridor_margin));
        f("expert.agent_lookahead", Field::Usize(&mut e.agent_lookahead));
        f("expert.route_lost", Field::F64(&mut e.route_lost));
        f("expert.red_trigger", Field::F64(&mut e.red_trigger));
        f("expert.intersection_radius", Field::F64(&mut e.intersection_radius));

        let m = &mut self.model;
        f("model.dim", Field::Usize(&mut m.dim));
        f("model.grid", Field::Usize(&mut m.grid));
        f("model.encoder_layers", Field::Usize(&mut m.encoder_layers));
        f("model.decoder_layers", Field::Usize(&mut m.decoder_layers));
        f("model.heads", Field::Usize(&mut m.heads));
        f("model.mlp_hidden", Field::Usize(&mut m.mlp_hidden));
        f("model.gru_hidden", Field::Usize(&mut m.gru_hidden));
        f("model.token_dropout", Field::F64(&mut m.token_dropout));
        f("model.camera_channels", Field::Usize(&mut m.camera_channels));
        f("model.lidar_channels_1", Field::Usize(&mut m.lidar_channels.0));
        f("model.lidar_channels_2", Field::Usize(&mut m.lidar_channels.1));
        f("model.use_da_mask", Field::Bool(&mut m.use_da_mask));
        f("model.lva_fusion", Field::Bool(&mut m.lva_fusion));
        f("model.self_attention", Field::Bool(&mut m.self_attention));
        f("model.init_seed", Field::U64(&mut m.init_seed));

        let t = &mut self.train;
        f("train.epochs", Field::Usize(&mut t.epochs));
        f("train.batch_size", Field::Usize(&mut t.batch_size));
        f("train.lr", Field::F64(&mut t.lr));
        f("train.backbone_lr", Field::F64(&mut t.backbone_lr));
        f("train.weight_decay", Field::F64(&mut t.weight_decay));
        f("train.grad_clip", Field::F64(&mut t.grad_clip));
        f("train.seed", Field::U64(&mut t.seed));
        f("train.saliency_stride", Field::Usize(&mut t.saliency_stride));

        let st = &mut self.saliency_train;
        f("da_train.epochs", Field::Usize(&mut st.epochs));
        f("da_train.batch_size", Field::Usize(&mut st.batch_size));
        f("da_train.lr", Field::F64(&mut st.lr));
        f("da_train.lr_decay", Field::F64(&mut st.lr_decay));
        f("da_train.momentum", Field::F64(&mut st.momentum));
        f("da_train.weight_decay", Field::F64(&mut st.weight_decay));
        f("da_train.seed", Field::U64(&mut st.seed));

        f("collect.frames", Field::Usize(&mut self.frames));
        f("collect.steer_noise", Field::F64(&mut self.collect.steer_noise));
        f("collect.max_ticks", Field::U32(&mut self.collect.max_ticks));
    }

    pub fn keys(&self) -> Vec<String> {
        let mut c = self.clone();
        let mut keys = Vec::new();
        c.visit(&mut |k, _| keys.push(k.to_string()));
        keys
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let mut c = self.clone();
        let mut out = None;
        c.visit(&mut |k, f| {
            if k == key {
                out = Some(f.render());
            }
        });
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut result = Err(Error::Config(format!("unknown key {key}")));
        self.visit(&mut |k, f| {
            if k == key {
                result = f.parse(k, value.trim());
            }
        });
        result
    }

    /// Every entry as `key = value`, one per line.
    pub fn to_kv(&self) -> String {
        let mut c = self.clone();
        let mut s = String::new();
        c.visit(&mut |k, f| {
            let _ = writeln!(s, "{k} = {}", f.render());
        });
        s
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        self.model.validate()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }
}

/// Splits `key = value` lines; later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}
