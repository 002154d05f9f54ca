//! Synthetic driving scenes with analytically known ground truth.
//!
//! A [`Scenario`] is a planar ego trajectory, a set of box-shaped agents with
//! constant speed and yaw rate, straight road strips, and a camera rig. The
//! ray-cast renderer in [`render`] stands in for an image backbone: every
//! pixel's feature encodes the world position it sees, so projection errors
//! show up directly as feature errors.

mod generate;
mod gt;
mod render;

pub use generate::{default_rig, generate_scenario, GeneratorConfig};
pub use gt::{
    footprint_cells, footprint_contains, render_gt, FrameLabels, GroundTruth, DEFAULT_CENTER_SIGMA,
    LANE_MARKING_HALF_WIDTH, NUM_CLASSES,
};
pub use render::{
    decode_position, encode_position, render_camera, render_features, FeatureImage, Hit,
    BOX_CHANNEL, DEPTH_CHANNEL, ENCODING_FREQUENCIES, MIN_FEATURE_CHANNELS, WORLD_X_CHANNELS,
    WORLD_Y_CHANNELS,
};

use crate::error::{Error, Result};
use crate::geometry::{trajectory_from_document, trajectory_section, CameraRig, Se2};
use crate::ini::{join_floats, Document, Section};

pub const DEFAULT_BOX_HEIGHT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
}

impl AgentClass {
    /// Semantic class index (0 is background).
    pub fn index(self) -> usize {
        match self {
            AgentClass::Vehicle => 1,
            AgentClass::Pedestrian => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            AgentClass::Vehicle => "vehicle",
            AgentClass::Pedestrian => "pedestrian",
        }
    }
}

/// A box agent: footprint `size = (length, width)` along its heading, a
/// prism of `height` metres. Velocity rotates with the yaw rate, so a
/// non-zero `yaw_rate` traces a circular arc.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub id: u32,
    pub class: AgentClass,
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
    pub height: f64,
}

impl SceneBox {
    /// World pose at `time` seconds after the current frame.
    pub fn state_at(&self, time: f64) -> Se2 {
        let [vx, vy] = self.velocity;
        let w = self.yaw_rate;
        let (dx, dy) = if w.abs() < 1e-12 {
            (vx * time, vy * time)
        } else {
            let (s, c) = (w * time).sin_cos();
            ((s * vx + (c - 1.0) * vy) / w, ((1.0 - c) * vx + s * vy) / w)
        };
        Se2::new(self.center[0] + dx, self.center[1] + dy, self.yaw + w * time)
    }

    pub fn is_static(&self) -> bool {
        self.velocity == [0.0, 0.0] && self.yaw_rate == 0.0
    }
}

/// Straight road strip: a centreline through `origin` along `heading`, with
/// drivable surface `half_width` metres either side.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneStrip {
    pub origin: [f64; 2],
    pub heading: f64,
    pub half_width: f64,
}

impl LaneStrip {
    /// Signed lateral distance of a world point from the centreline.
    pub fn lateral(&self, wx: f64, wy: f64) -> f64 {
        let (s, c) = self.heading.sin_cos();
        -s * (wx - self.origin[0]) + c * (wy - self.origin[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Ego poses for frames `−past ..= future`, oldest first.
    pub ego: Vec<Se2>,
    pub boxes: Vec<SceneBox>,
    pub lanes: Vec<LaneStrip>,
    pub rig: CameraRig,
    pub frame_period: f64,
    pub past: usize,
    pub future: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_period > 0.0) {
            return Err(Error::invalid("scenario", "frame_period must be positive"));
        }
        if self.ego.len() != self.past + 1 + self.future {
            return Err(Error::invalid(
                "scenario",
                format!(
                    "{} ego poses for {} past + 1 + {} future frames",
                    self.ego.len(),
                    self.past,
                    self.future
                ),
            ));
        }
        let mut ids: Vec<u32> = self.boxes.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) || ids.first() == Some(&0) {
            return Err(Error::invalid("scenario", "box ids must be unique and non-zero"));
        }
        if self
            .boxes
            .iter()
            .any(|b| !(b.size[0] > 0.0 && b.size[1] > 0.0 && b.height > 0.0))
        {
            return Err(Error::invalid("scenario", "box sizes must be positive"));
        }
        if self.rig.is_empty() {
            return Err(Error::invalid("scenario", "no cameras"));
        }
        Ok(())
    }

    /// Ego pose at relative frame `k` (0 = current, negative = past).
    pub fn ego_at(&self, k: i32) -> Se2 {
        self.ego[(k + self.past as i32) as usize]
    }

    pub fn time(&self, k: i32) -> f64 {
        k as f64 * self.frame_period
    }

    pub fn is_static(&self) -> bool {
        self.boxes.iter().all(SceneBox::is_static)
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        let head = doc
            .section("scenario")
            .ok_or_else(|| Error::Config("missing [scenario] section".into()))?;
        let rig = CameraRig::from_document(doc)?;
        let ego = trajectory_from_document(doc)?;
        let mut boxes = Vec::new();
        for (label, s) in doc.sections_with_prefix("box") {
            let id: u32 = label
                .parse()
                .map_err(|_| Error::Config(format!("box label `{label}` is not an id")))?;
            let class = match s.get("class").unwrap_or("vehicle") {
                "vehicle" => AgentClass::Vehicle,
                "pedestrian" => AgentClass::Pedestrian,
                other => return Err(Error::Config(format!("unknown class `{other}`"))),
            };
            boxes.push(SceneBox {
                id,
                class,
                center: pair(s, "center")?,
                size: pair(s, "size")?,
                yaw: s.parse_or("yaw", 0.0)?,
                velocity: if s.get("velocity").is_some() {
                    pair(s, "velocity")?
                } else {
                    [0.0, 0.0]
                },
                yaw_rate: s.parse_or("yaw_rate", 0.0)?,
                height: s.parse_or("height", DEFAULT_BOX_HEIGHT)?,
            });
        }
        let lanes = doc
            .sections_named("lane")
            .map(|s| {
                Ok(LaneStrip {
                    origin: pair(s, "origin")?,
                    heading: s.parse("heading")?,
                    half_width: s.parse("half_width")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scn = Self {
            ego,
            boxes,
            lanes,
            rig,
            frame_period: head.parse("frame_period")?,
            past: head.parse("past_frames")?,
            future: head.parse("future_frames")?,
        };
        scn.validate()?;
        Ok(scn)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_document(&Document::parse(text)?)
    }

    pub fn to_document(&self) -> Document {
        let mut sections = Vec::new();
        let mut head = Section::new("scenario");
        head.push("frame_period", self.frame_period)
            .push("past_frames", self.past)
            .push("future_frames", self.future);
        sections.push(head);
        sections.push(trajectory_section(&self.ego));
        for b in &self.boxes {
            let mut s = Section::new(format!("box {}", b.id));
            s.push("class", b.class.name())
                .push("center", join_floats(&b.center))
                .push("size", join_floats(&b.size))
                .push("yaw", b.yaw)
                .push("velocity", join_floats(&b.velocity))
                .push("yaw_rate", b.yaw_rate)
                .push("height", b.height);
            sections.push(s);
        }
        for l in &self.lanes {
            let mut s = Section::new("lane");
            s.push("origin", join_floats(&l.origin))
                .push("heading", l.heading)
                .push("half_width", l.half_width);
            sections.push(s);
        }
        sections.extend(self.rig.to_sections());
        Document { sections }
    }

    pub fn render_text(&self) -> String {
        self.to_document().render()
    }
}

fn pair(s: &Section, key: &str) -> Result<[f64; 2]> {
    match s.floats(key)?.as_slice() {
        &[a, b] => Ok([a, b]),
        _ => Err(Error::Config(format!("[{}] `{key}` needs two values", s.name))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_and_turning_motion() {
        let mut b = SceneBox {
            id: 1,
            class: AgentClass::Vehicle,
            center: [1.0, 2.0],
            size: [4.0, 2.0],
            yaw: 0.0,
            velocity: [2.0, 0.0],
            yaw_rate: 0.0,
            height: 1.5,
        };
        assert_eq!(b.state_at(1.5), Se2::new(4.0, 2.0, 0.0));
        // quarter circle of radius v/w
        b.yaw_rate = 0.5;
        let s = b.state_at(std::f64::consts::PI);
        assert!((s.x - 5.0).abs() < 1e-12 && (s.y - 6.0).abs() < 1e-12);
        assert!((s.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn scenario_text_round_trip() {
        let cfg = GeneratorConfig::desk();
        let scn = generate_scenario(5, &cfg).unwrap();
        let text = scn.render_text();
        let back = Scenario::parse(&text).unwrap();
        assert_eq!(back, scn);
        assert_eq!(back.render_text(), text);
    }

    #[test]
    fn validation_rejects_duplicates() {
        let mut scn = generate_scenario(1, &GeneratorConfig::desk()).unwrap();
        let dup = scn.boxes[0].clone();
        scn.boxes.push(dup);
        assert!(scn.validate().is_err());
        let mut scn = generate_scenario(1, &GeneratorConfig::desk()).unwrap();
        scn.frame_period = 0.0;
        assert!(scn.validate().is_err());
    }
}
