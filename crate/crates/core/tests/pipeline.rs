use std::sync::Arc;

use fusiondrive::checkpoint;
use fusiondrive::config::RunConfig;
use fusiondrive::model::{prepare_input, DrivingModel, ModelConfig};
use fusiondrive::saliency::SaliencyTrainConfig;
use fusiondrive::sim::harness::timeout_ticks;
use fusiondrive::sim::{collect_dataset, route_set, run_route, training_routes, CollectConfig, Dataset, HarnessConfig};
use fusiondrive::train::{train, ModelPolicy, TrainConfig};

fn small_run(model: ModelConfig) -> (DrivingModel, Dataset) {
    let cfg = HarnessConfig::default();
    let mut data = collect_dataset(&training_routes(1, 5).unwrap(), 5, &cfg, &CollectConfig::default()).unwrap();
    data.records.truncate(24);
    let mut m = DrivingModel::new(model).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..Default::default()
    };
    let sc = SaliencyTrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let mut losses = Vec::new();
    train(&mut m, &data, &tc, &sc, &RunConfig::default().loss, |_, l| losses.push(l.total)).unwrap();
    assert_eq!(losses.len(), 1);
    assert!(losses[0].is_finite());
    (m, data)
}

#[test]
fn dataset_checkpoint_and_policy_round_trip() {
    let (model, data) = small_run(ModelConfig::default());
    let dir = tempfile::tempdir().unwrap();

    let ds_path = dir.path().join("frames.bin");
    data.save(&ds_path).unwrap();
    assert_eq!(Dataset::load(&ds_path).unwrap(), data);

    let ck = dir.path().join("model.ckpt");
    checkpoint::save(&ck, &model).unwrap();
    let back = checkpoint::load(&ck).unwrap();
    assert_eq!(back, model);

    let r = &data.records[3];
    let mut stream = fusiondrive::saliency::SaliencyStream::new();
    let mask = model.saliency.predict(&mut stream, &r.sensors.cameras[1].to_tensor(), r.town).unwrap();
    let input = prepare_input(&model.config, &r.sensors, r.target, Some(&mask)).unwrap();
    assert_eq!(back.predict(&input).unwrap(), model.predict(&input).unwrap());

    let cfg = HarnessConfig::default();
    let route = Arc::new(route_set(1, 0).unwrap().remove(0));
    let limit = timeout_ticks(&route, &cfg);
    let a = run_route(&mut ModelPolicy::new(&model, cfg.controller.clone()), &route, 0, &cfg, limit);
    let b = run_route(&mut ModelPolicy::new(&back, cfg.controller.clone()), &route, 0, &cfg, limit);
    assert_eq!(a, b);
    assert_eq!(a.ds, a.rc * a.is);
}

#[test]
fn concat_baseline_trains_and_saves() {
    let (model, _) = small_run(ModelConfig {
        use_da_mask: false,
        lva_fusion: false,
        ..Default::default()
    });
    let mut buf = Vec::new();
    checkpoint::write_model(&mut buf, &model).unwrap();
    let back = checkpoint::read_model(&mut buf.as_slice()).unwrap();
    assert!(!back.config.lva_fusion && !back.config.use_da_mask);
    assert_eq!(back, model);
}

#[test]
fn config_file_overrides_reach_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(
        &path,
        "# desk-scale overrides\nloss.wp = 0.5\npid.longitudinal.kp = 4\npenalty.ped = 0.45\nmodel.use_da_mask = false\ntrain.epochs = 3\ncollect.frames = 100\n",
    )
    .unwrap();
    let c = RunConfig::load(&path).unwrap();
    assert_eq!(c.loss.wp, 0.5);
    assert_eq!(c.harness.controller.longitudinal.0, 4.0);
    assert_eq!(c.harness.penalties.ped, 0.45);
    assert!(!c.model.use_da_mask);
    assert_eq!(c.train.epochs, 3);
    assert_eq!(c.frames, 100);
    assert_eq!(RunConfig::from_kv(&c.to_kv()).unwrap(), c);

    std::fs::write(&path, "loss.nope = 1\n").unwrap();
    assert!(RunConfig::load(&path).is_err());
}
