//! Run configuration: one plain-text document covering every stage.

use std::path::{Path, PathBuf};

use crate::augment::{AugMode, ImageAugRanges};
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraRig};
use crate::ini::{join_floats, Document, Section};
use crate::instances::DecodeConfig;
use crate::model::ModelConfig;
use crate::posesync::EncoderConfig;
use crate::stpt::StptConfig;
use crate::synthscene::{default_rig, GeneratorConfig, DEFAULT_CENTER_SIGMA, MIN_FEATURE_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub vehicles: usize,
    pub pedestrians: usize,
    pub lanes: usize,
    pub max_ego_speed: f64,
    pub max_ego_yaw_rate: f64,
    pub margin_cells: f64,
    pub center_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosesyncConfig {
    pub heads: usize,
    pub points: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidConfig {
    pub depth: usize,
    pub window: (usize, usize),
    pub heads: usize,
    pub shift: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugConfig {
    pub mode: AugMode,
    pub image: ImageAugRanges,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: BevGrid,
    pub rig: CameraRig,
    pub past: usize,
    pub future: usize,
    pub frame_period: f64,
    pub channels: usize,
    pub posesync: PosesyncConfig,
    pub stpt: PyramidConfig,
    pub decode: DecodeConfig,
    pub aug: AugConfig,
    pub scene: SceneConfig,
    /// Weights directory with a manifest; seeded initialization when absent.
    pub weights: Option<PathBuf>,
}

impl RunConfig {
    /// 2 cameras at 64×64 px, 32×32 BEV at 0.5 m, C = 16, T = 2, T′ = 4,
    /// four pyramid scales.
    pub fn desk() -> Self {
        let gen = GeneratorConfig::desk();
        Self {
            seed: 0,
            grid: gen.grid,
            rig: gen.rig,
            past: 2,
            future: 4,
            frame_period: gen.frame_period,
            channels: 16,
            posesync: PosesyncConfig { heads: 4, points: 4, layers: 1 },
            stpt: PyramidConfig { depth: 4, window: (4, 4), heads: 4, shift: true },
            decode: DecodeConfig::default(),
            aug: AugConfig { mode: AugMode::None, image: ImageAugRanges::default() },
            scene: SceneConfig {
                vehicles: gen.vehicles,
                pedestrians: gen.pedestrians,
                lanes: gen.lanes,
                max_ego_speed: gen.max_ego_speed,
                max_ego_yaw_rate: gen.max_ego_yaw_rate,
                margin_cells: gen.margin_cells,
                center_sigma: DEFAULT_CENTER_SIGMA,
            },
            weights: None,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                x: self.grid.x_cells,
                y: self.grid.y_cells,
                channels: self.channels,
                heads: self.posesync.heads,
                points: self.posesync.points,
                layers: self.posesync.layers,
            },
            stpt: StptConfig {
                depth: self.stpt.depth,
                window: self.stpt.window,
                heads: self.stpt.heads,
                channels: self.channels,
                past: self.past,
                future: self.future,
                shift: self.stpt.shift,
            },
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            grid: self.grid.clone(),
            rig: self.rig.clone(),
            past: self.past,
            future: self.future,
            frame_period: self.frame_period,
            vehicles: self.scene.vehicles,
            pedestrians: self.scene.pedestrians,
            lanes: self.scene.lanes,
            max_ego_speed: self.scene.max_ego_speed,
            max_ego_yaw_rate: self.scene.max_ego_yaw_rate,
            margin_cells: self.scene.margin_cells,
            static_boxes: false,
        }
    }

    /// Checks every cross-module constraint; all failures are
    /// [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if self.channels < MIN_FEATURE_CHANNELS {
            return Err(Error::Config(format!(
                "C = {} is below the {MIN_FEATURE_CHANNELS} rendered feature channels",
                self.channels
            )));
        }
        if self.rig.is_empty() {
            return Err(Error::Config("camera rig is empty".into()));
        }
        if self.future == 0 {
            return Err(Error::Config("T′ must be at least 1".into()));
        }
        if !(self.frame_period > 0.0) {
            return Err(Error::Config("frame_period must be positive".into()));
        }
        let (lo, hi) = self.aug.image.scale;
        if !(lo > 0.0 && lo <= hi) || !(0.0..=1.0).contains(&self.aug.image.flip_probability) {
            return Err(Error::Config("image augmentation ranges are inconsistent".into()));
        }
        if !(0.0..=1.0).contains(&self.decode.seg_threshold) || self.decode.max_k == 0 || !(self.decode.radius > 0.0) {
            return Err(Error::Config("decode parameters out of range".into()));
        }
        if self.scene.vehicles < 2 {
            return Err(Error::Config("scenes need at least a moving and a turning vehicle".into()));
        }
        self.model().validate().map_err(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    /// Missing keys keep their desk defaults. A relative `[rig] file` is
    /// resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let doc = Document::parse(text)?;
        let mut c = Self::desk();
        let empty = Section::default();
        let sec = |name: &str| doc.section(name).unwrap_or(&empty);

        c.seed = sec("run").parse_or("seed", c.seed)?;
        let g = sec("grid");
        let z = if g.get("z_anchors").is_some() { g.floats("z_anchors")? } else { c.grid.z_anchors.clone() };
        c.grid = BevGrid::new(
            g.parse_or("x", c.grid.x_cells)?,
            g.parse_or("y", c.grid.y_cells)?,
            g.parse_or("resolution", c.grid.resolution)?,
            z,
        )
        .map_err(|e| Error::Config(e.to_string()))?;

        let r = sec("rig");
        c.rig = if let Some(file) = r.get("file") {
            let p = base.map_or_else(|| PathBuf::from(file), |b| b.join(file));
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            CameraRig::from_document(&Document::parse(&text)?)?
        } else if doc.sections_with_prefix("camera").next().is_some() {
            CameraRig::from_document(&doc)?
        } else {
            let n = r.parse_or("cameras", c.rig.len())?;
            let w = r.parse_or("width", c.rig.cameras[0].intrinsics.width)?;
            let h = r.parse_or("height", c.rig.cameras[0].intrinsics.height)?;
            default_rig(n, w, h)
        };

        let t = sec("time");
        c.past = t.parse_or("past", c.past)?;
        c.future = t.parse_or("future", c.future)?;
        c.frame_period = t.parse_or("frame_period", c.frame_period)?;
        c.channels = sec("features").parse_or("channels", c.channels)?;

        let p = sec("posesync");
        c.posesync = PosesyncConfig {
            heads: p.parse_or("heads", c.posesync.heads)?,
            points: p.parse_or("points", c.posesync.points)?,
            layers: p.parse_or("layers", c.posesync.layers)?,
        };

        let s = sec("stpt");
        let window = match s.get("window") {
            None => c.stpt.window,
            Some(_) => match s.floats("window")?.as_slice() {
                &[a] => (a as usize, a as usize),
                &[a, b] => (a as usize, b as usize),
                _ => return Err(Error::Config("[stpt] `window` needs one or two sizes".into())),
            },
        };
        c.stpt = PyramidConfig {
            depth: s.parse_or("depth", c.stpt.depth)?,
            window,
            heads: s.parse_or("heads", c.stpt.heads)?,
            shift: s.parse_or("shift", c.stpt.shift)?,
        };

        let d = sec("decode");
        c.decode = DecodeConfig {
            threshold: d.parse_or("threshold", c.decode.threshold)?,
            max_k: d.parse_or("max_k", c.decode.max_k)?,
            radius: d.parse_or("radius", c.decode.radius)?,
            seg_threshold: d.parse_or("seg_threshold", c.decode.seg_threshold)?,
        };

        let a = sec("aug");
        let scale = if a.get("scale").is_some() {
            match a.floats("scale")?.as_slice() {
                &[lo, hi] => (lo, hi),
                _ => return Err(Error::Config("[aug] `scale` needs two bounds".into())),
            }
        } else {
            c.aug.image.scale
        };
        c.aug = AugConfig {
            mode: AugMode::parse(a.get("mode").unwrap_or(c.aug.mode.name()))?,
            image: ImageAugRanges {
                scale,
                rotation: a.parse_or("rotation", c.aug.image.rotation)?,
                flip_probability: a.parse_or("flip_probability", c.aug.image.flip_probability)?,
            },
        };

        let sc = sec("scene");
        c.scene = SceneConfig {
            vehicles: sc.parse_or("vehicles", c.scene.vehicles)?,
            pedestrians: sc.parse_or("pedestrians", c.scene.pedestrians)?,
            lanes: sc.parse_or("lanes", c.scene.lanes)?,
            max_ego_speed: sc.parse_or("max_ego_speed", c.scene.max_ego_speed)?,
            max_ego_yaw_rate: sc.parse_or("max_ego_yaw_rate", c.scene.max_ego_yaw_rate)?,
            margin_cells: sc.parse_or("margin_cells", c.scene.margin_cells)?,
            center_sigma: sc.parse_or("center_sigma", c.scene.center_sigma)?,
        };
        c.weights = sec("model").get("weights").map(|w| base.map_or_else(|| PathBuf::from(w), |b| b.join(w)));
        Ok(c)
    }

    /// Fully explicit form; parsing it back yields `self`.
    pub fn to_document(&self) -> Document {
        let mut sections = Vec::new();
        let mut run = Section::new("run");
        run.push("seed", self.seed);
        sections.push(run);
        let mut g = Section::new("grid");
        g.push("x", self.grid.x_cells)
            .push("y", self.grid.y_cells)
            .push("resolution", self.grid.resolution)
            .push("z_anchors", join_floats(&self.grid.z_anchors));
        sections.push(g);
        let mut t = Section::new("time");
        t.push("past", self.past).push("future", self.future).push("frame_period", self.frame_period);
        sections.push(t);
        let mut f = Section::new("features");
        f.push("channels", self.channels);
        sections.push(f);
        let mut p = Section::new("posesync");
        p.push("heads", self.posesync.heads)
            .push("points", self.posesync.points)
            .push("layers", self.posesync.layers);
        sections.push(p);
        let mut s = Section::new("stpt");
        s.push("depth", self.stpt.depth)
            .push("window", format!("{} {}", self.stpt.window.0, self.stpt.window.1))
            .push("heads", self.stpt.heads)
            .push("shift", self.stpt.shift);
        sections.push(s);
        let mut d = Section::new("decode");
        d.push("threshold", self.decode.threshold)
            .push("max_k", self.decode.max_k)
            .push("radius", self.decode.radius)
            .push("seg_threshold", self.decode.seg_threshold);
        sections.push(d);
        let mut a = Section::new("aug");
        a.push("mode", self.aug.mode.name())
            .push("scale", join_floats(&[self.aug.image.scale.0, self.aug.image.scale.1]))
            .push("rotation", self.aug.image.rotation)
            .push("flip_probability", self.aug.image.flip_probability);
        sections.push(a);
        let mut sc = Section::new("scene");
        sc.push("vehicles", self.scene.vehicles)
            .push("pedestrians", self.scene.pedestrians)
            .push("lanes", self.scene.lanes)
            .push("max_ego_speed", self.scene.max_ego_speed)
            .push("max_ego_yaw_rate", self.scene.max_ego_yaw_rate)
            .push("margin_cells", self.scene.margin_cells)
            .push("center_sigma", self.scene.center_sigma);
        sections.push(sc);
        if let Some(w) = &self.weights {
            let mut m = Section::new("model");
            m.push("weights", w.display());
            sections.push(m);
        }
        sections.extend(self.rig.to_sections());
        Document { sections }
    }

    pub fn render(&self) -> String {
        self.to_document().render()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_is_valid_and_round_trips() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        let text = c.render();
        let back = RunConfig::parse(&text, None).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), text);
    }

    #[test]
    fn partial_documents_keep_defaults() {
        let c = RunConfig::parse("[stpt]\ndepth = 2\nwindow = 8\n[aug]\nmode = bev\n", None).unwrap();
        assert_eq!(c.stpt.depth, 2);
        assert_eq!(c.stpt.window, (8, 8));
        assert_eq!(c.aug.mode, AugMode::Bev);
        assert_eq!(c.channels, 16);
        c.validate().unwrap();
    }

    #[test]
    fn default_rig_section() {
        let c = RunConfig::parse("[rig]\ncameras = 3\nwidth = 32\nheight = 24\n", None).unwrap();
        assert_eq!(c.rig.len(), 3);
        assert_eq!(c.rig.cameras[2].intrinsics.height, 24);
    }

    #[test]
    fn constraint_violations_are_config_errors() {
        let cases = [
            ("[stpt]\nwindow = 3\n", "window"),
            ("[stpt]\nheads = 3\n", "heads"),
            ("[stpt]\ndepth = 5\n", "depth"),
            ("[posesync]\nheads = 3\n", "divisible"),
            ("[features]\nchannels = 8\n[stpt]\nheads = 2\n[posesync]\nheads = 2\n", "rendered feature channels"),
            ("[grid]\nx = 24\n", "divisible"),
            ("[time]\nfuture = 0\n", "T′"),
        ];
        for (text, needle) in cases {
            let err = RunConfig::parse(text, None).unwrap().validate().unwrap_err();
            match err {
                Error::Config(m) => assert!(m.contains(needle), "{text}: {m}"),
                other => panic!("{text}: {other}"),
            }
        }
    }

    #[test]
    fn bad_values_rejected_at_parse() {
        assert!(matches!(RunConfig::parse("[run]\nseed = x\n", None), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[aug]\nmode = all\n", None), Err(Error::Config(_))));
    }
}
