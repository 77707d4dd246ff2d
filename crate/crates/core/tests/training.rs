use asma_core::segnet::{self, TrainConfig};
use asma_core::synthdata::generate;
use asma_core::{GenConfig, ModelParams, SegNet};

const UNTRAINED_IOU: f64 = 0.094_427_890_731_109;

#[test]
fn trained_network_segments_the_synthetic_set() {
    let data = generate(&GenConfig::default()).unwrap();
    let init = ModelParams::init(2, 0).unwrap();
    let untrained = segnet::mean_iou(&SegNet::new(init.clone()), &data).unwrap();
    assert!((untrained - UNTRAINED_IOU).abs() < 1e-9, "untrained IoU {untrained}");

    let (params, log) = segnet::train(&init, &data, &TrainConfig { epochs: 40, lr: 0.1, seed: 0 }).unwrap();
    assert!(log.last().unwrap().loss < log[0].loss);
    let clean = segnet::mean_iou(&SegNet::new(params), &data).unwrap();
    assert!(clean >= 0.85, "clean IoU {clean}");
}
