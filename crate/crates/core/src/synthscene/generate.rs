//! Seeded scenario generator.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{default_z_anchors, BevGrid, Camera, CameraRig, Intrinsics, Mount, Se2};

use super::{AgentClass, LaneStrip, Scenario, SceneBox, DEFAULT_BOX_HEIGHT};

const MAX_TRIES: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub grid: BevGrid,
    pub rig: CameraRig,
    pub past: usize,
    pub future: usize,
    pub frame_period: f64,
    /// Vehicles in total; the first moves straight, the second turns.
    pub vehicles: usize,
    pub pedestrians: usize,
    pub lanes: usize,
    pub max_ego_speed: f64,
    pub max_ego_yaw_rate: f64,
    /// Boxes stay this many cells inside the grid at every frame.
    pub margin_cells: f64,
    /// All boxes static (for synchronization diagnostics).
    pub static_boxes: bool,
}

impl GeneratorConfig {
    /// 2 cameras at 64×64 px, 32×32 BEV at 0.5 m, 2 past and 4 future frames.
    pub fn desk() -> Self {
        Self {
            grid: BevGrid::new(32, 32, 0.5, default_z_anchors()).unwrap(),
            rig: default_rig(2, 64, 64),
            past: 2,
            future: 4,
            frame_period: 0.5,
            vehicles: 3,
            pedestrians: 0,
            lanes: 1,
            max_ego_speed: 2.0,
            max_ego_yaw_rate: 0.2,
            margin_cells: 1.0,
            static_boxes: false,
        }
    }
}

/// `n` cameras evenly spaced in yaw, 100° horizontal field of view, tilted
/// 0.35 rad down from 1.6 m.
pub fn default_rig(n: usize, width: usize, height: usize) -> CameraRig {
    let cameras = (0..n)
        .map(|i| Camera {
            name: format!("cam{i}"),
            intrinsics: Intrinsics::from_fov(width, height, 100f64.to_radians()).unwrap(),
            mount: Mount {
                yaw: TAU * i as f64 / n as f64,
                pitch: 0.35,
                roll: 0.0,
                position: [0.0, 0.0, 1.6],
            },
        })
        .collect();
    CameraRig { cameras }
}

/// Pose after `t` seconds of constant speed and yaw rate from `start`.
fn arc(start: Se2, speed: f64, yaw_rate: f64, t: f64) -> Se2 {
    let b = SceneBox {
        id: 1,
        class: AgentClass::Vehicle,
        center: [start.x, start.y],
        size: [1.0, 1.0],
        yaw: start.yaw,
        velocity: [speed * start.yaw.cos(), speed * start.yaw.sin()],
        yaw_rate,
        height: 1.0,
    };
    b.state_at(t)
}

pub fn generate_scenario(seed: u64, cfg: &GeneratorConfig) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = cfg.frame_period;
    let ego0 = Se2::new(
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-PI..PI),
    );
    let speed = rng.gen_range(0.0..=cfg.max_ego_speed);
    let yaw_rate = rng.gen_range(-cfg.max_ego_yaw_rate..=cfg.max_ego_yaw_rate);
    let frames: Vec<i32> = (-(cfg.past as i32)..=cfg.future as i32).collect();
    let ego: Vec<Se2> = frames
        .iter()
        .map(|&k| arc(ego0, speed, yaw_rate, k as f64 * dt))
        .collect();

    let mut scn = Scenario {
        ego,
        boxes: Vec::new(),
        lanes: Vec::new(),
        rig: cfg.rig.clone(),
        frame_period: dt,
        past: cfg.past,
        future: cfg.future,
    };

    let half_x = 0.5 * cfg.grid.x_cells as f64 * cfg.grid.resolution;
    let half_y = 0.5 * cfg.grid.y_cells as f64 * cfg.grid.resolution;
    let margin = cfg.margin_cells * cfg.grid.resolution;
    let agents = cfg.vehicles + cfg.pedestrians;
    for n in 0..agents {
        let pedestrian = n >= cfg.vehicles;
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let size = if pedestrian {
                [rng.gen_range(0.5..0.8), rng.gen_range(0.5..0.8)]
            } else {
                [rng.gen_range(3.0..4.5), rng.gen_range(1.6..2.0)]
            };
            let (lx, ly) = (rng.gen_range(-half_x..half_x), rng.gen_range(-half_y..half_y));
            let yaw_rel = rng.gen_range(-PI..PI);
            let now = scn.ego_at(0);
            let (wx, wy) = now.apply(lx, ly);
            let yaw = yaw_rel + now.yaw;
            let (v, w) = match (cfg.static_boxes, pedestrian, n) {
                (true, ..) => (0.0, 0.0),
                (false, true, _) => (rng.gen_range(0.3..1.0), 0.0),
                (false, false, 0) => (rng.gen_range(0.6..1.4), 0.0),
                (false, false, 1) => {
                    let w: f64 = rng.gen_range(0.2..0.4);
                    (rng.gen_range(0.6..1.4), if rng.gen_bool(0.5) { w } else { -w })
                }
                (false, false, _) => {
                    if rng.gen_bool(0.3) {
                        (0.0, 0.0)
                    } else {
                        (rng.gen_range(0.3..1.4), rng.gen_range(-0.3..0.3))
                    }
                }
            };
            let cand = SceneBox {
                id: n as u32 + 1,
                class: if pedestrian {
                    AgentClass::Pedestrian
                } else {
                    AgentClass::Vehicle
                },
                center: [wx, wy],
                size,
                yaw,
                velocity: [v * yaw.cos(), v * yaw.sin()],
                yaw_rate: w,
                height: DEFAULT_BOX_HEIGHT,
            };
            if fits(&scn, &cand, half_x - margin, half_y - margin) {
                placed = Some(cand);
                break;
            }
        }
        let b = placed.ok_or_else(|| {
            Error::invalid("generator", format!("could not place agent {} without overlap", n + 1))
        })?;
        scn.boxes.push(b);
    }

    for _ in 0..cfg.lanes {
        let now = scn.ego_at(0);
        let lateral = rng.gen_range(-0.3 * half_y..0.3 * half_y);
        let (ox, oy) = now.apply(0.0, lateral);
        scn.lanes.push(LaneStrip {
            origin: [ox, oy],
            heading: now.yaw + rng.gen_range(-0.3..0.3),
            half_width: rng.gen_range(3.0..4.0),
        });
    }
    scn.validate()?;
    Ok(scn)
}

fn radius(b: &SceneBox) -> f64 {
    0.5 * b.size[0].hypot(b.size[1])
}

/// Inside the grid at every frame, clear of the ego and of other boxes.
fn fits(scn: &Scenario, cand: &SceneBox, lim_x: f64, lim_y: f64) -> bool {
    let r = radius(cand);
    // one frame past the horizon: the last output frame's flow needs it
    for k in -(scn.past as i32)..=scn.future as i32 + 1 {
        let p = scn.box_in_current(cand, k);
        let (s, c) = p.yaw.sin_cos();
        for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let (dx, dy) = (0.5 * a * cand.size[0], 0.5 * b * cand.size[1]);
            let (x, y) = (p.x + c * dx - s * dy, p.y + s * dx + c * dy);
            if x.abs() > lim_x || y.abs() > lim_y {
                return false;
            }
        }
        let t = scn.time(k);
        let q = cand.state_at(t);
        if k <= scn.future as i32 {
            let e = scn.ego_at(k);
            if (q.x - e.x).hypot(q.y - e.y) < r + 2.5 {
                return false;
            }
        }
        for other in &scn.boxes {
            let o = other.state_at(t);
            if (q.x - o.x).hypot(q.y - o.y) < r + radius(other) + 0.5 {
                return false;
            }
        }
    }
    true
}
