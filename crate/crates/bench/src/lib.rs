//! Shared fixtures for the kernel benchmarks.

use bevsync::geometry::BevGrid;
use bevsync::heads::PredictionBundle;
use bevsync::instances::bundle_from_ground_truth;
use bevsync::model::Model;
use bevsync::pipeline::{encode_scene, load_model, synth_scene, RunConfig};
use bevsync::posesync::TemporalBevMap;
use bevsync::synthscene::{GroundTruth, Scenario};

/// Desk configuration on an `n × n` grid with `depth` pyramid scales.
pub fn config(n: usize, depth: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.grid = BevGrid::new(n, n, 16.0 / n as f64, cfg.grid.z_anchors.clone()).expect("valid grid");
    cfg.stpt.depth = depth;
    cfg
}

pub struct Fixture {
    pub cfg: RunConfig,
    pub model: Model,
    pub scenario: Scenario,
    pub gt: GroundTruth,
    pub map: TemporalBevMap,
    /// Ground truth dressed as head outputs.
    pub gt_bundle: PredictionBundle,
}

pub fn fixture(cfg: RunConfig) -> Fixture {
    let (scenario, gt) = synth_scene(&cfg).expect("scene");
    let model = load_model(&cfg, None).expect("model");
    let (map, _) = encode_scene(&cfg, &model, &scenario).expect("encoding");
    let gt_bundle = bundle_from_ground_truth(&gt, 10.0);
    Fixture { cfg, model, scenario, gt, map, gt_bundle }
}
