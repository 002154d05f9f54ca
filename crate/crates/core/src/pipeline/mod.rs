//! End-to-end orchestration over a run directory.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory, so any stage can be rerun or resumed on its own.

mod bench;
mod config;
mod viz;

pub use bench::{bench, BenchReport, REFERENCE_CONTEXT};
pub use config::{AugConfig, PosesyncConfig, PyramidConfig, RunConfig, SceneConfig};
pub use viz::{to_gray, viz_attn, AttentionViz, Pnm, QUERY_COLOR, TOP_COLOR};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_image_aug, BevAug, ImageAug};
use crate::error::{Error, Result};
use crate::heads::{run_heads, HeadKind, PredictionBundle};
use crate::instances::{decode_instances, vehicle_probability, IdMap, InstanceVideo};
use crate::metrics::{evaluate, EvalReport};
use crate::model::Model;
use crate::params::ParamStore;
use crate::posesync::{build_temporal_map, frame_projections_with, EncodedFrame, TemporalBevMap};
use crate::stpt::{map_feature_prior, AttentionCache, StptOutput};
use crate::synthscene::{generate_scenario, render_features, render_gt, FrameLabels, GroundTruth, Scenario};
use crate::tensor::{load_btf, save_btf, Tensor};
use crate::warp::{distortion_report, report_csv, WarpMode};

pub const CONFIG_FILE: &str = "config.ini";
pub const SCENARIO_FILE: &str = "scenario.ini";
pub const GT_DIR: &str = "gt";
pub const WEIGHTS_DIR: &str = "weights";
pub const AUG_FILE: &str = "augment.json";
pub const BEV_FILE: &str = "bev.btf";
pub const D0_FILE: &str = "d0.btf";
pub const ATTENTION_FILE: &str = "attention.btf";
pub const PRED_DIR: &str = "pred";
pub const INSTANCES_DIR: &str = "instances";
pub const REPORT_FILE: &str = "report.json";

/// RNG streams derived from the run seed.
const IMAGE_AUG_STREAM: u64 = 3;
const BEV_AUG_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Encode,
    Predict,
    Heads,
    Decode,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Synth, Stage::Encode, Stage::Predict, Stage::Heads, Stage::Decode, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Encode => "encode",
            Stage::Predict => "predict",
            Stage::Heads => "heads",
            Stage::Decode => "decode",
            Stage::Eval => "eval",
        }
    }

    /// Artifact whose presence marks the stage complete.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Synth => GT_DIR,
            Stage::Encode => BEV_FILE,
            Stage::Predict => D0_FILE,
            Stage::Heads => PRED_DIR,
            Stage::Decode => INSTANCES_DIR,
            Stage::Eval => REPORT_FILE,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Error,
    },
}

impl PipelineError {
    /// 2 for configuration errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

pub type StageResult<T> = std::result::Result<T, PipelineError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| match source {
            Error::Config(_) => PipelineError::Config(source),
            source => PipelineError::Stage { stage, source },
        })
    }
}

/// Augmentations applied during encoding, recorded so evaluation can move
/// the labels identically.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugRecord {
    /// `image[t][camera]` for input frame `−t`.
    pub image: Vec<Vec<ImageAug>>,
    pub bev: Option<BevAug>,
}

impl AugRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain record") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("augmentation record", e.to_string()))
    }
}

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    fn read(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    }

    /// The run's recorded configuration.
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.read(CONFIG_FILE)?, Some(&self.root))
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::parse(&self.read(SCENARIO_FILE)?)
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        gt_from_store(&ParamStore::load_dir(self.path(GT_DIR))?)
    }

    pub fn temporal_map(&self) -> Result<TemporalBevMap> {
        Ok(TemporalBevMap { maps: load_btf(self.path(BEV_FILE))? })
    }

    pub fn aug_record(&self) -> Result<AugRecord> {
        AugRecord::from_json(&self.read(AUG_FILE)?)
    }

    pub fn d0(&self) -> Result<Tensor> {
        load_btf(self.path(D0_FILE))
    }

    /// The cached first-block attention; its layout follows from `cfg`.
    pub fn attention(&self, cfg: &RunConfig) -> Result<AttentionCache> {
        let p = self.path(ATTENTION_FILE);
        if !p.exists() {
            return Err(Error::MissingCache(format!("{} not found", p.display())));
        }
        let t = load_btf(&p)?;
        let (wh, ww) = cfg.stpt.window;
        let windows = (cfg.grid.x_cells / wh, cfg.grid.y_cells / ww);
        if t.rank() != 4 || t.dims()[0] != windows.0 * windows.1 || t.dims()[2] != (cfg.past + 1) * wh * ww {
            return Err(Error::shape("attention cache", format!("{:?} does not match the run configuration", t.dims())));
        }
        Ok(AttentionCache {
            frames: cfg.past + 1,
            window: (wh, ww),
            windows,
            probs: (0..t.dims()[0]).map(|i| t.slice0(i)).collect(),
        })
    }

    pub fn predictions(&self) -> Result<PredictionBundle> {
        PredictionBundle::load_dir(self.path(PRED_DIR))
    }

    pub fn instances(&self) -> Result<InstanceVideo> {
        InstanceVideo::load_dir(self.path(INSTANCES_DIR))
    }

    pub fn report(&self) -> Result<EvalReport> {
        EvalReport::from_json(&self.read(REPORT_FILE)?)
    }
}

pub fn gt_to_store(gt: &GroundTruth) -> ParamStore {
    let mut s = ParamStore::new();
    for (t, f) in gt.frames.iter().enumerate() {
        s.insert(format!("seg.t{t}"), f.seg.clone());
        s.insert(format!("instance.t{t}"), f.instance.to_tensor());
        s.insert(format!("center.t{t}"), f.center.clone());
        s.insert(format!("offset.t{t}"), f.offset.clone());
        s.insert(format!("flow.t{t}"), f.flow.clone());
    }
    s.insert("hdmap", gt.hdmap.clone());
    s
}

pub fn gt_from_store(s: &ParamStore) -> Result<GroundTruth> {
    let n = (0..).take_while(|t| s.get(&format!("seg.t{t}")).is_ok()).count();
    if n == 0 {
        return Err(Error::format("ground truth", "no seg.t0 entry"));
    }
    let frames = (0..n)
        .map(|t| {
            Ok(FrameLabels {
                seg: s.get(&format!("seg.t{t}"))?.clone(),
                instance: IdMap::from_tensor(s.get(&format!("instance.t{t}"))?)?,
                center: s.get(&format!("center.t{t}"))?.clone(),
                offset: s.get(&format!("offset.t{t}"))?.clone(),
                flow: s.get(&format!("flow.t{t}"))?.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(GroundTruth { frames, hdmap: s.get("hdmap")?.clone() })
}

/// Validates `cfg`, creates the directory and records the configuration.
pub fn prepare(cfg: &RunConfig, dir: &RunDir) -> StageResult<()> {
    cfg.validate().map_err(PipelineError::Config)?;
    fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e)).at(Stage::Synth)?;
    dir.write(CONFIG_FILE, &cfg.render()).at(Stage::Synth)
}

/// Supplied weights, or the seeded initializer (recorded in the run).
pub fn load_model(cfg: &RunConfig, dir: Option<&RunDir>) -> Result<Model> {
    let model = match &cfg.weights {
        Some(w) => Model::from_store(&ParamStore::load_dir(w)?, cfg.model())?,
        None => Model::init(cfg.model(), cfg.seed)?,
    };
    if let Some(d) = dir {
        model.to_store().save_dir(d.path(WEIGHTS_DIR))?;
    }
    Ok(model)
}

pub fn synth_scene(cfg: &RunConfig) -> Result<(Scenario, GroundTruth)> {
    let scn = generate_scenario(cfg.seed, &cfg.generator())?;
    let gt = render_gt(&scn, &cfg.grid, cfg.scene.center_sigma);
    Ok((scn, gt))
}

pub fn synth(cfg: &RunConfig, dir: &RunDir) -> StageResult<(Scenario, GroundTruth)> {
    let (scn, gt) = synth_scene(cfg).at(Stage::Synth)?;
    dir.write(SCENARIO_FILE, &scn.render_text()).at(Stage::Synth)?;
    gt_to_store(&gt).save_dir(dir.path(GT_DIR)).at(Stage::Synth)?;
    Ok((scn, gt))
}

/// Renders and encodes input frames `0, −1, …, −T`, applying the configured
/// augmentations.
pub fn encode_scene(cfg: &RunConfig, model: &Model, scn: &Scenario) -> Result<(TemporalBevMap, AugRecord)> {
    if scn.past != cfg.past || scn.rig.len() != cfg.rig.len() {
        return Err(Error::invalid("scenario", "does not match the run configuration"));
    }
    let mut record = AugRecord::default();
    let mut img_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    img_rng.set_stream(IMAGE_AUG_STREAM);
    let mut frames = Vec::with_capacity(cfg.past + 1);
    for t in 0..=cfg.past as i32 {
        let images = render_features(scn, -t, cfg.channels)?;
        let mut features = Vec::with_capacity(images.len());
        let mut mats = Vec::with_capacity(images.len());
        let mut augs = Vec::new();
        for (img, cam) in images.iter().zip(&scn.rig.cameras) {
            if cfg.aug.mode.image() {
                let aug = ImageAug::sample(&mut img_rng, &cfg.aug.image);
                let (f, k) = apply_image_aug(&img.features, &cam.matrix(), &aug)?;
                features.push(f);
                mats.push(k);
                augs.push(aug);
            } else {
                features.push(img.features.clone());
                mats.push(cam.matrix());
            }
        }
        let proj = frame_projections_with(scn, -t, &mats);
        let bev = model.encoder.encode_frame(&cfg.grid, &features, &proj)?;
        frames.push(EncodedFrame { offset: -t, bev });
        if cfg.aug.mode.image() {
            record.image.push(augs);
        }
    }
    let mut map = build_temporal_map(&frames, cfg.past)?;
    if cfg.aug.mode.bev() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(BEV_AUG_STREAM);
        let aug = BevAug::sample_right_angle(&mut rng);
        map.maps = aug.apply_temporal(&map.maps)?;
        record.bev = Some(aug);
    }
    Ok((map, record))
}

pub fn encode(cfg: &RunConfig, dir: &RunDir) -> StageResult<TemporalBevMap> {
    let scn = dir.scenario().at(Stage::Encode)?;
    let model = load_model(cfg, Some(dir)).at(Stage::Encode)?;
    let (map, record) = encode_scene(cfg, &model, &scn).at(Stage::Encode)?;
    save_btf(&map.maps, dir.path(BEV_FILE)).at(Stage::Encode)?;
    dir.write(AUG_FILE, &record.to_json()).at(Stage::Encode)?;
    Ok(map)
}

/// Pyramid forward pass with the map-feature prior.
pub fn predict_map(model: &Model, map: &TemporalBevMap, cache: bool) -> Result<StptOutput> {
    let prior = map_feature_prior(&map.frame(0), model.heads.get(HeadKind::Hdmap), model.config.stpt.depth)?;
    model.stpt.forward(&map.maps, &prior, cache)
}

pub fn predict(cfg: &RunConfig, dir: &RunDir) -> StageResult<StptOutput> {
    let map = dir.temporal_map().at(Stage::Predict)?;
    let model = load_model(cfg, Some(dir)).at(Stage::Predict)?;
    let out = predict_map(&model, &map, true).at(Stage::Predict)?;
    save_btf(&out.d0, dir.path(D0_FILE)).at(Stage::Predict)?;
    if let Some(a) = &out.attention {
        save_btf(&a.to_tensor().at(Stage::Predict)?, dir.path(ATTENTION_FILE)).at(Stage::Predict)?;
    }
    Ok(out)
}

pub fn heads(cfg: &RunConfig, dir: &RunDir) -> StageResult<PredictionBundle> {
    let d0 = dir.d0().at(Stage::Heads)?;
    let model = load_model(cfg, None).at(Stage::Heads)?;
    let bundle = run_heads(&d0, &model.heads).at(Stage::Heads)?;
    bundle.save_dir(dir.path(PRED_DIR)).at(Stage::Heads)?;
    Ok(bundle)
}

pub fn decode(cfg: &RunConfig, dir: &RunDir) -> StageResult<InstanceVideo> {
    let bundle = dir.predictions().at(Stage::Decode)?;
    let video = decode_instances(&bundle, &cfg.decode).at(Stage::Decode)?;
    video.save_dir(dir.path(INSTANCES_DIR)).at(Stage::Decode)?;
    Ok(video)
}

/// Vehicle occupancy per frame: predicted probability above the threshold,
/// or the one-hot label.
pub fn occupancy(seg: &[Tensor], threshold: f64) -> Result<Vec<Vec<bool>>> {
    seg.iter().map(|s| Ok(vehicle_probability(s)?.data().iter().map(|&p| p > threshold).collect())).collect()
}

pub fn score(cfg: &RunConfig, bundle: &PredictionBundle, video: &InstanceVideo, gt: &GroundTruth, record: &AugRecord) -> Result<EvalReport> {
    let gt = match &record.bev {
        Some(aug) => aug.apply_ground_truth(gt)?,
        None => gt.clone(),
    };
    let gt_video = InstanceVideo::from_ground_truth(&gt)?;
    let gt_occ: Vec<Vec<bool>> = gt.frames.iter().map(|f| f.seg.slice0(1).data().iter().map(|&v| v > 0.5).collect()).collect();
    let pred_occ = occupancy(&bundle.seg, cfg.decode.seg_threshold)?;
    evaluate(video, &gt_video, &pred_occ, &gt_occ, cfg.grid.resolution)
}

pub fn eval(cfg: &RunConfig, dir: &RunDir) -> StageResult<EvalReport> {
    let gt = dir.ground_truth().at(Stage::Eval)?;
    let bundle = dir.predictions().at(Stage::Eval)?;
    let video = dir.instances().at(Stage::Eval)?;
    let record = dir.aug_record().at(Stage::Eval)?;
    let report = score(cfg, &bundle, &video, &gt, &record).at(Stage::Eval)?;
    dir.write(REPORT_FILE, &report.to_json()).at(Stage::Eval)?;
    Ok(report)
}

/// Runs one stage against the run directory.
pub fn run_stage(stage: Stage, cfg: &RunConfig, dir: &RunDir) -> StageResult<()> {
    match stage {
        Stage::Synth => synth(cfg, dir).map(drop),
        Stage::Encode => encode(cfg, dir).map(drop),
        Stage::Predict => predict(cfg, dir).map(drop),
        Stage::Heads => heads(cfg, dir).map(drop),
        Stage::Decode => decode(cfg, dir).map(drop),
        Stage::Eval => eval(cfg, dir).map(drop),
    }
}

/// All stages in order. With `resume`, stages whose artifact already exists
/// are skipped; returns the stages that ran.
pub fn run_pipeline(cfg: &RunConfig, dir: &RunDir, resume: bool) -> StageResult<Vec<Stage>> {
    prepare(cfg, dir)?;
    let mut ran = Vec::new();
    for stage in Stage::ALL {
        if resume && dir.has(stage.artifact()) {
            continue;
        }
        run_stage(stage, cfg, dir)?;
        ran.push(stage);
    }
    Ok(ran)
}

/// Warp-vs-synchronization report on a static version of the run's scene.
pub fn compare_sync(cfg: &RunConfig, mode: WarpMode) -> Result<String> {
    let mut gen = cfg.generator();
    gen.static_boxes = true;
    let scn = generate_scenario(cfg.seed, &gen)?;
    Ok(report_csv(&distortion_report(&scn, &cfg.grid, cfg.channels, mode)?))
}

/// Relative paths and contents of every file under `root`, sorted.
pub fn snapshot(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.push((p.strip_prefix(root).expect("under root").to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::desk();
        c.stpt.depth = 2;
        c.seed = 3;
        c
    }

    #[test]
    fn desk_run_emits_all_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("run"));
        let cfg = RunConfig::desk();
        let ran = run_pipeline(&cfg, &dir, false).unwrap();
        assert_eq!(ran, Stage::ALL.to_vec());
        for name in [CONFIG_FILE, SCENARIO_FILE, GT_DIR, WEIGHTS_DIR, AUG_FILE, BEV_FILE, D0_FILE, ATTENTION_FILE, PRED_DIR, INSTANCES_DIR, REPORT_FILE] {
            assert!(dir.has(name), "{name}");
        }
        assert_eq!(dir.temporal_map().unwrap().maps.dims(), &[3, 32, 32, 16]);
        assert_eq!(dir.d0().unwrap().dims(), &[5, 32, 32, 16]);
        assert_eq!(dir.predictions().unwrap().frames(), 5);
        assert_eq!(dir.instances().unwrap().len(), 5);
        let r = dir.report().unwrap();
        assert!((0.0..=1.0).contains(&r.vpq));
        assert_eq!(dir.config().unwrap(), cfg);
        let cache = dir.attention(&cfg).unwrap();
        assert_eq!(cache.probs.len(), 64);
    }

    #[test]
    fn resume_skips_finished_stages() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path());
        let cfg = small();
        run_pipeline(&cfg, &dir, false).unwrap();
        fs::remove_dir_all(dir.path(INSTANCES_DIR)).unwrap();
        fs::remove_file(dir.path(REPORT_FILE)).unwrap();
        assert_eq!(run_pipeline(&cfg, &dir, true).unwrap(), vec![Stage::Decode, Stage::Eval]);
    }

    #[test]
    fn gt_store_round_trip() {
        let (_, gt) = synth_scene(&small()).unwrap();
        assert_eq!(gt_from_store(&gt_to_store(&gt)).unwrap(), gt);
    }

    #[test]
    fn gt_predictions_score_perfectly_through_eval() {
        let cfg = small();
        let (_, gt) = synth_scene(&cfg).unwrap();
        let bundle = crate::instances::bundle_from_ground_truth(&gt, 10.0);
        let video = decode_instances(&bundle, &cfg.decode).unwrap();
        let r = score(&cfg, &bundle, &video, &gt, &AugRecord::default()).unwrap();
        assert_eq!((r.vpq, r.iou_short, r.iou_long), (1.0, 1.0, 1.0));
        // labels move with the recorded augmentation
        let aug = BevAug::right_angle(1, true);
        let moved = aug.apply_bundle(&bundle).unwrap();
        let mv = decode_instances(&moved, &cfg.decode).unwrap();
        let r = score(&cfg, &moved, &mv, &gt, &AugRecord { image: Vec::new(), bev: Some(aug) }).unwrap();
        assert_eq!(r.vpq, 1.0);
    }

    #[test]
    fn augmented_encoding_records_transforms() {
        let mut cfg = small();
        cfg.aug.mode = crate::augment::AugMode::Both;
        let (scn, _) = synth_scene(&cfg).unwrap();
        let model = load_model(&cfg, None).unwrap();
        let (map, rec) = encode_scene(&cfg, &model, &scn).unwrap();
        assert_eq!(rec.image.len(), 3);
        assert!(rec.image.iter().all(|v| v.len() == 2));
        assert!(rec.bev.is_some());
        assert_eq!(AugRecord::from_json(&rec.to_json()).unwrap(), rec);
        assert_eq!(map.maps.dims(), &[3, 32, 32, 16]);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path());
        let err = predict(&small(), &dir).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("stage `predict`"));
        let mut bad = small();
        bad.stpt.heads = 3;
        assert_eq!(prepare(&bad, &dir).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn compare_sync_csv() {
        let csv = compare_sync(&small(), WarpMode::Bilinear).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("frame,method,displacement,oob_fraction,cosine"));
        assert_eq!(lines.count(), 2 * 2);
    }
}
