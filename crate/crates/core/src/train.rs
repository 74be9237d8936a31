//! Imitation training of [`DrivingModel`] on expert records, and the
//! closed-loop policy that drives with it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::controller::{ControlSignal, Controller, ControllerConfig};
use crate::error::{Error, Result};
use crate::heads::{decode_heatmap, dropout_mask, TrafficState, DETECTION_THRESHOLD};
use crate::losses::{
    heatmap_attr_loss_var, heatmap_prob_loss_var, total_loss_var, traffic_loss_var, waypoint_loss_var, LossWeights,
};
use crate::model::{forward_var, prepare_input, DrivingModel, ModelInput, CAMERA_PREFIX, LIDAR_PREFIX};
use crate::nn::{Binder, ParamStore};
use crate::optim::{accumulate, clip_grad_norm, scale_grads, AdamW, Grads};
use crate::par;
use crate::saliency::{synthetic_gaze, train_saliency, SaliencyMap, SaliencySample, SaliencyStream, SaliencyTrainConfig};
use crate::sim::dataset::{Dataset, ExpertRecord};
use crate::sim::harness::{Observation, Policy};
use crate::sim::route::Route;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate for the fusion, transformer and heads.
    pub lr: f64,
    /// Peak learning rate for the convolutional encoders.
    pub backbone_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Every n-th record becomes a driver-attention training sample.
    pub saliency_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            backbone_lr: 8e-4,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            seed: 0,
            saliency_stride: 4,
        }
    }
}

/// Cosine decay from `peak` at epoch 0 towards zero at `epochs`.
pub fn cosine_lr(peak: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return peak;
    }
    0.5 * peak * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// Network input plus labels for one record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: ModelInput,
    pub waypoints: Tensor,
    pub heatmap: Tensor,
    pub traffic: TrafficState,
}

/// Records in order; the attention stream restarts whenever the route or
/// tick sequence breaks.
fn for_each_stream<'a, T>(
    records: &'a [ExpertRecord],
    mut f: impl FnMut(&'a ExpertRecord, Option<&'a ExpertRecord>) -> Result<T>,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let prev = i
            .checked_sub(1)
            .map(|j| &records[j])
            .filter(|p| p.route_id == r.route_id && p.tick + 1 == r.tick);
        out.push(f(r, prev)?);
    }
    Ok(out)
}

/// Attention maps for every record, predicted with the running stream.
pub fn attention_maps(model: &DrivingModel, records: &[ExpertRecord]) -> Result<Vec<SaliencyMap>> {
    let mut stream = SaliencyStream::new();
    for_each_stream(records, |r, prev| {
        if prev.is_none() {
            stream.reset();
        }
        model.saliency.predict(&mut stream, &r.sensors.cameras[1].to_tensor(), r.town)
    })
}

pub fn build_samples(model: &DrivingModel, records: &[ExpertRecord]) -> Result<Vec<TrainSample>> {
    let maps = if model.config.use_da_mask {
        Some(attention_maps(model, records)?)
    } else {
        None
    };
    let built = par::map_range(records.len(), |i| -> Result<TrainSample> {
        let r = &records[i];
        let mask = maps.as_ref().map(|m| &m[i]);
        Ok(TrainSample {
            input: prepare_input(&model.config, &r.sensors, r.target, mask)?,
            waypoints: Tensor::new(&[r.waypoints.len(), 2], r.waypoints.iter().flatten().copied().collect())?,
            heatmap: r.heatmap().tensor().clone(),
            traffic: r.traffic,
        })
    });
    built.into_iter().collect()
}

/// Driver-attention supervision: synthetic gaze targets on every
/// `stride`-th front image, with the preceding frame when it exists.
pub fn saliency_samples(records: &[ExpertRecord], stride: usize) -> Result<Vec<SaliencySample>> {
    let all = for_each_stream(records, |r, prev| Ok((r, prev)))?;
    all.into_iter()
        .step_by(stride.max(1))
        .map(|(r, prev)| {
            let front = r.sensors.cameras[1].to_tensor();
            Ok(SaliencySample {
                prev_front: prev.map(|p| p.sensors.cameras[1].to_tensor()),
                gaze: synthetic_gaze(&front)?,
                front,
                town: r.town,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub waypoint: f64,
    pub heatmap: f64,
    pub traffic: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.waypoint += o.waypoint;
        self.heatmap += o.heatmap;
        self.traffic += o.traffic;
    }

    fn scale(&mut self, c: f64) {
        self.total *= c;
        self.waypoint *= c;
        self.heatmap *= c;
        self.traffic *= c;
    }
}

/// Loss and parameter gradients for one sample.
pub fn sample_loss(
    model_cfg: &crate::model::ModelConfig,
    params: &ParamStore,
    s: &TrainSample,
    w: &LossWeights,
    drop: Option<&[bool]>,
) -> Result<(LossBreakdown, Grads)> {
    let tape = Tape::new();
    let b = Binder::new(&tape, params, true);
    let out = forward_var(&b, model_cfg, &s.input, drop)?;
    let l_wp = waypoint_loss_var(out.waypoints, &s.waypoints)?;
    let l_ht = heatmap_prob_loss_var(out.heatmap, &s.heatmap)?.add(heatmap_attr_loss_var(out.heatmap, &s.heatmap)?)?;
    let l_tf = traffic_loss_var(out.traffic, &s.traffic, w)?;
    let total = total_loss_var(l_wp, l_ht, l_tf, w)?;
    tape.backward(total)?;
    Ok((
        LossBreakdown {
            total: total.scalar_value(),
            waypoint: l_wp.scalar_value(),
            heatmap: l_ht.scalar_value(),
            traffic: l_tf.scalar_value(),
        },
        b.grads(),
    ))
}

/// Mean losses over `samples` without dropout or updates.
pub fn evaluate_loss(model: &DrivingModel, samples: &[TrainSample], w: &LossWeights) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::EmptySequence("training samples"));
    }
    let parts = par::map(samples, |s| sample_loss(&model.config, &model.params, s, w, None).map(|r| r.0));
    let mut acc = LossBreakdown::default();
    for p in parts {
        acc.add(&p?);
    }
    acc.scale(1.0 / samples.len() as f64);
    Ok(acc)
}

fn split_backbone(grads: Grads) -> (Grads, Grads) {
    grads
        .into_iter()
        .partition(|(k, _)| k.starts_with(CAMERA_PREFIX) || k.starts_with(LIDAR_PREFIX))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub saliency_loss: Vec<f64>,
    pub epoch_loss: Vec<LossBreakdown>,
}

/// Trains the attention predictor first (when the mask is enabled), then the
/// driving network with AdamW under a per-epoch cosine schedule and separate
/// backbone and head learning rates.
pub fn train(
    model: &mut DrivingModel,
    data: &Dataset,
    cfg: &TrainConfig,
    saliency_cfg: &SaliencyTrainConfig,
    w: &LossWeights,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptySequence("dataset"));
    }
    let mut saliency_loss = Vec::new();
    if model.config.use_da_mask && saliency_cfg.epochs > 0 {
        let ss = saliency_samples(&data.records, cfg.saliency_stride)?;
        saliency_loss = train_saliency(&mut model.saliency, &ss, saliency_cfg)?;
    }
    let samples = build_samples(model, &data.records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head_opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut backbone_opt = AdamW::new(cfg.backbone_lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let n_tokens = model.config.fusion().total_tokens();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        head_opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        backbone_opt.lr = cosine_lr(cfg.backbone_lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let masks: Vec<Vec<bool>> = chunk
                .iter()
                .map(|_| dropout_mask(n_tokens, model.config.token_dropout, &mut rng))
                .collect();
            let jobs: Vec<(usize, &Vec<bool>)> = chunk.iter().copied().zip(&masks).collect();
            let (mc, params) = (&model.config, &model.params);
            let results = par::map(&jobs, |&(i, m)| sample_loss(mc, params, &samples[i], w, Some(m)));
            let mut grads = Grads::new();
            for r in results {
                let (l, g) = r?;
                acc.add(&l);
                accumulate(&mut grads, &g);
            }
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            let (bb, rest) = split_backbone(grads);
            backbone_opt.step(&mut model.params, &bb);
            head_opt.step(&mut model.params, &rest);
        }
        acc.scale(1.0 / samples.len() as f64);
        on_epoch(epoch, &acc);
        epoch_loss.push(acc);
    }
    Ok(TrainReport {
        saliency_loss,
        epoch_loss,
    })
}

/// Drives with the network: predicted waypoints, heatmap detections and
/// traffic state feed the shared controller.
#[derive(Clone, Debug)]
pub struct ModelPolicy<'m> {
    pub model: &'m DrivingModel,
    pub controller: Controller,
    pub threshold: f64,
    stream: SaliencyStream,
}

impl<'m> ModelPolicy<'m> {
    pub fn new(model: &'m DrivingModel, controller: ControllerConfig) -> Self {
        Self {
            model,
            controller: Controller::new(controller),
            threshold: DETECTION_THRESHOLD,
            stream: SaliencyStream::new(),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn reset(&mut self, _route: &Route) {
        self.controller.reset();
        self.stream.reset();
    }

    fn needs_sensors(&self) -> bool {
        true
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<(Vec<[f64; 2]>, ControlSignal)> {
        let sensors = obs
            .sensors
            .ok_or_else(|| Error::Precondition("model policy needs rendered sensors".into()))?;
        let scene = obs.scene;
        let mask = if self.model.config.use_da_mask {
            let front = sensors.cameras[1].to_tensor();
            Some(self.model.saliency.predict(&mut self.stream, &front, scene.route.town)?)
        } else {
            None
        };
        let input = prepare_input(&self.model.config, sensors, obs.target, mask.as_ref())?;
        let p = self.model.predict(&input)?;
        let objects = decode_heatmap(&p.heatmap, self.threshold)?;
        let (control, _) = self
            .controller
            .control_step(&p.waypoints, &p.traffic, &objects, scene.ego.speed, &scene.ego.pose)?;
        Ok((p.waypoints, control))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sim::dataset::{collect_dataset, CollectConfig};
    use crate::sim::harness::{run_route, HarnessConfig};
    use std::sync::Arc;

    fn small_data(ticks: u32) -> Dataset {
        let cfg = HarnessConfig::default();
        let collect = CollectConfig {
            max_ticks: ticks,
            ..Default::default()
        };
        collect_dataset(&[Route::fixture(0).unwrap()], 1, &cfg, &collect).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 9, 10) > 0.0);
    }

    #[test]
    fn streams_restart_on_route_change() {
        let d = small_data(3);
        let mut recs = d.records.clone();
        recs[2].route_id = 9;
        let flags = for_each_stream(&recs, |_, p| Ok(p.is_some())).unwrap();
        assert_eq!(flags, vec![false, true, false]);
        let ss = saliency_samples(&recs, 2).unwrap();
        assert_eq!(ss.len(), 2);
        assert!(ss[0].prev_front.is_none() && ss[1].prev_front.is_none());
    }

    #[test]
    fn training_reduces_loss_on_a_small_set() {
        let d = small_data(8);
        let cfg = ModelConfig {
            use_da_mask: false,
            token_dropout: 0.0,
            ..Default::default()
        };
        let mut m = DrivingModel::new(cfg).unwrap();
        let w = LossWeights::default();
        let samples = build_samples(&m, &d.records).unwrap();
        let before = evaluate_loss(&m, &samples, &w).unwrap();
        let tc = TrainConfig {
            epochs: 15,
            batch_size: 4,
            ..Default::default()
        };
        train(&mut m, &d, &tc, &SaliencyTrainConfig::default(), &w, |_, _| {}).unwrap();
        let after = evaluate_loss(&m, &samples, &w).unwrap();
        assert!(after.total < 0.7 * before.total, "{before:?} -> {after:?}");
    }

    #[test]
    fn model_policy_runs_closed_loop() {
        let m = DrivingModel::new(ModelConfig::default()).unwrap();
        let cfg = HarnessConfig::default();
        let route = Arc::new(Route::fixture(2).unwrap());
        let mut p = ModelPolicy::new(&m, cfg.controller.clone());
        let a = run_route(&mut p, &route, 4, &cfg, 12);
        let b = run_route(&mut p, &route, 4, &cfg, 12);
        assert_eq!(a, b);
        assert_eq!(a.ds, a.rc * a.is);
    }
}
