//! Ray-cast feature renderer.
//!
//! Channel layout of a rendered pixel (remaining channels are zero):
//! `[φ(wx) ×4, φ(wy) ×4, box flag, depth]` with
//! `φ(w) = [sin 2πw/8, cos 2πw/8, sin 2πw/32, cos 2πw/32]`.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Scenario, SceneBox};

/// Encoding frequencies in cycles per metre.
pub const ENCODING_FREQUENCIES: [f64; 2] = [1.0 / 8.0, 1.0 / 32.0];
pub const WORLD_X_CHANNELS: std::ops::Range<usize> = 0..4;
pub const WORLD_Y_CHANNELS: std::ops::Range<usize> = 4..8;
pub const BOX_CHANNEL: usize = 8;
pub const DEPTH_CHANNEL: usize = 9;
pub const MIN_FEATURE_CHANNELS: usize = 10;

pub fn encode_position(w: f64) -> [f64; 4] {
    let (s0, c0) = (TAU * ENCODING_FREQUENCIES[0] * w).sin_cos();
    let (s1, c1) = (TAU * ENCODING_FREQUENCIES[1] * w).sin_cos();
    [s0, c0, s1, c1]
}

/// Recovers a coordinate in `[0, 32)` from its encoding: the slow pair fixes
/// the period, the fast pair refines within it.
pub fn decode_position(enc: &[f64]) -> f64 {
    let period = 1.0 / ENCODING_FREQUENCIES[1];
    let fine_period = 1.0 / ENCODING_FREQUENCIES[0];
    let coarse = (enc[2].atan2(enc[3]) / TAU * period).rem_euclid(period);
    let fine = (enc[0].atan2(enc[1]) / TAU * fine_period).rem_euclid(fine_period);
    let n = ((coarse - fine) / fine_period).round();
    (fine + n * fine_period).rem_euclid(period)
}

/// What a pixel's ray hit, with the world-frame hit point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hit {
    Sky,
    Ground([f64; 3]),
    Box { id: u32, point: [f64; 3] },
}

impl Hit {
    pub fn point(&self) -> Option<[f64; 3]> {
        match *self {
            Hit::Sky => None,
            Hit::Ground(p) | Hit::Box { point: p, .. } => Some(p),
        }
    }
}

/// One camera's rendered feature map at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub camera: usize,
    pub frame: i32,
    /// `H × W × C`.
    pub features: Tensor,
    /// Row-major per-pixel hits.
    pub hits: Vec<Hit>,
}

impl FeatureImage {
    pub fn hit(&self, u: usize, v: usize) -> Hit {
        self.hits[v * self.features.dims()[1] + u]
    }
}

/// Renders camera `camera` at relative frame `frame`.
pub fn render_camera(scn: &Scenario, camera: usize, frame: i32, channels: usize) -> Result<FeatureImage> {
    if channels < MIN_FEATURE_CHANNELS {
        return Err(Error::invalid(
            "feature channels",
            format!("{channels} < {MIN_FEATURE_CHANNELS}"),
        ));
    }
    let cam = scn
        .rig
        .cameras
        .get(camera)
        .ok_or_else(|| Error::invalid("camera index", format!("{camera}")))?;
    if frame < -(scn.past as i32) || frame > scn.future as i32 {
        return Err(Error::invalid("frame", format!("{frame} outside scenario")));
    }
    let k = cam.matrix();
    let k_inv = k.k.try_inverse().expect("camera matrix is invertible");
    let world_from_cam = scn
        .ego_at(frame)
        .to_pose()
        .compose(&cam.cam_from_ego().inverse());
    let origin = *world_from_cam.translation();
    let rot = *world_from_cam.rotation();
    let time = scn.time(frame);
    let boxes: Vec<(&SceneBox, crate::geometry::Se2)> =
        scn.boxes.iter().map(|b| (b, b.state_at(time))).collect();

    let (h, w) = (k.height, k.width);
    let mut data = vec![0.0; h * w * channels];
    let mut hits = vec![Hit::Sky; h * w];
    data.par_chunks_mut(w * channels)
        .zip(hits.par_chunks_mut(w))
        .enumerate()
        .for_each(|(v, (row, row_hits))| {
            for u in 0..w {
                let d_opt = k_inv * Vector3::new(u as f64, v as f64, 1.0);
                let dir = rot * (d_opt / d_opt.z);
                let (t, hit) = cast(&origin, &dir, &boxes);
                row_hits[u] = hit;
                let Some(p) = hit.point() else { continue };
                let f = &mut row[u * channels..(u + 1) * channels];
                f[WORLD_X_CHANNELS].copy_from_slice(&encode_position(p[0]));
                f[WORLD_Y_CHANNELS].copy_from_slice(&encode_position(p[1]));
                f[BOX_CHANNEL] = matches!(hit, Hit::Box { .. }) as u8 as f64;
                f[DEPTH_CHANNEL] = t;
            }
        });
    Ok(FeatureImage {
        camera,
        frame,
        features: Tensor::new(vec![h, w, channels], data)?,
        hits,
    })
}

/// All cameras at one frame, in rig order.
pub fn render_features(scn: &Scenario, frame: i32, channels: usize) -> Result<Vec<FeatureImage>> {
    (0..scn.rig.len())
        .into_par_iter()
        .map(|i| render_camera(scn, i, frame, channels))
        .collect()
}

/// Nearest intersection along `o + t·d`, `t > 0`. `t` is optical depth
/// because the optical-frame ray has unit z.
fn cast(o: &Vector3<f64>, d: &Vector3<f64>, boxes: &[(&SceneBox, crate::geometry::Se2)]) -> (f64, Hit) {
    let mut best = f64::INFINITY;
    let mut hit = Hit::Sky;
    if d.z < 0.0 && o.z > 0.0 {
        best = -o.z / d.z;
        let p = o + d * best;
        hit = Hit::Ground([p.x, p.y, 0.0]);
    }
    for (b, s) in boxes {
        if let Some(t) = ray_box(o, d, b, s) {
            if t < best {
                best = t;
                let p = o + d * t;
                hit = Hit::Box {
                    id: b.id,
                    point: [p.x, p.y, p.z],
                };
            }
        }
    }
    (best, hit)
}

/// Slab test against the box prism in its own frame.
fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, b: &SceneBox, s: &crate::geometry::Se2) -> Option<f64> {
    let (sn, cs) = s.yaw.sin_cos();
    let (rx, ry) = (o.x - s.x, o.y - s.y);
    let lo = [cs * rx + sn * ry, -sn * rx + cs * ry, o.z];
    let ld = [cs * d.x + sn * d.y, -sn * d.x + cs * d.y, d.z];
    let lo_b = [-0.5 * b.size[0], -0.5 * b.size[1], 0.0];
    let hi_b = [0.5 * b.size[0], 0.5 * b.size[1], b.height];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if ld[a].abs() < 1e-15 {
            if lo[a] < lo_b[a] || lo[a] > hi_b[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo_b[a] - lo[a]) / ld[a], (hi_b[a] - lo[a]) / ld[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_projection, Camera, CameraRig, Intrinsics, Mount, Se2};
    use crate::synthscene::{generate_scenario, AgentClass, GeneratorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn scene_with(cameras: Vec<Camera>, boxes: Vec<SceneBox>) -> Scenario {
        Scenario {
            ego: vec![Se2::default()],
            boxes,
            lanes: Vec::new(),
            rig: CameraRig { cameras },
            frame_period: 0.5,
            past: 0,
            future: 0,
        }
    }

    fn camera(pitch: f64, position: [f64; 3]) -> Camera {
        Camera {
            name: "c".into(),
            intrinsics: Intrinsics::from_fov(33, 33, 1.2).unwrap(),
            mount: Mount {
                yaw: 0.0,
                pitch,
                roll: 0.0,
                position,
            },
        }
    }

    #[test]
    fn downward_camera_sees_ground_point() {
        let scn = scene_with(vec![camera(FRAC_PI_2, [3.0, -2.0, 10.0])], Vec::new());
        let img = render_camera(&scn, 0, 0, 12).unwrap();
        let f = &img.features;
        let px: Vec<f64> = (0..12).map(|c| f.at(&[16, 16, c])).collect();
        let want_x = encode_position(3.0);
        let want_y = encode_position(-2.0);
        for i in 0..4 {
            assert!((px[i] - want_x[i]).abs() < 1e-12);
            assert!((px[4 + i] - want_y[i]).abs() < 1e-12);
        }
        assert_eq!(px[BOX_CHANNEL], 0.0);
        assert!((px[DEPTH_CHANNEL] - 10.0).abs() < 1e-9);
        assert_eq!(&px[10..], &[0.0, 0.0]);
    }

    #[test]
    fn horizontal_ray_is_sky() {
        let scn = scene_with(vec![camera(0.0, [0.0, 0.0, 1.5])], Vec::new());
        let img = render_camera(&scn, 0, 0, 10).unwrap();
        // centre row looks exactly at the horizon
        assert_eq!(img.hit(16, 16), Hit::Sky);
        assert!((0..10).all(|c| img.features.at(&[16, 16, c]) == 0.0));
        assert!(matches!(img.hit(16, 0), Hit::Sky));
        assert!(matches!(img.hit(16, 32), Hit::Ground(_)));
    }

    #[test]
    fn box_occludes_ground() {
        let b = SceneBox {
            id: 4,
            class: AgentClass::Vehicle,
            center: [6.0, 0.0],
            size: [2.0, 2.0],
            yaw: 0.3,
            velocity: [0.0, 0.0],
            yaw_rate: 0.0,
            height: 1.5,
        };
        let scn = scene_with(vec![camera(0.2, [0.0, 0.0, 1.5])], vec![b]);
        let img = render_camera(&scn, 0, 0, 10).unwrap();
        match img.hit(16, 16) {
            Hit::Box { id, point } => {
                assert_eq!(id, 4);
                assert!(point[0] < 6.0);
            }
            other => panic!("expected a box hit, got {other:?}"),
        }
        assert_eq!(img.features.at(&[16, 16, BOX_CHANNEL]), 1.0);
    }

    #[test]
    fn hit_points_reproject_to_their_pixels() {
        let scn = generate_scenario(3, &GeneratorConfig::desk()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for frame in [-2, 0] {
            for (ci, cam) in scn.rig.cameras.iter().enumerate() {
                let img = render_camera(&scn, ci, frame, 10).unwrap();
                let ego_t = scn.ego_at(frame).to_pose();
                let ego_now = scn.ego_at(0).to_pose();
                let proj = make_projection(&cam.matrix(), &cam.cam_from_ego(), &ego_t, &ego_now);
                let mut checked = 0;
                while checked < 20 {
                    let (u, v) = (rng.gen_range(0..64usize), rng.gen_range(0..64usize));
                    let Some(p) = img.hit(u, v).point() else { continue };
                    let (cx, cy) = scn.ego_at(0).apply_inverse(p[0], p[1]);
                    let q = proj.project(&Vector3::new(cx, cy, p[2]));
                    assert!(q.depth > 0.0);
                    assert!((q.u - u as f64).abs() <= 0.5 && (q.v - v as f64).abs() <= 0.5);
                    checked += 1;
                }
            }
        }
    }

    #[test]
    fn position_encoding_decodes() {
        for w in [-40.0, -3.25, 0.0, 0.1, 7.99, 8.0, 31.5] {
            let d = decode_position(&encode_position(w));
            let want = f64::rem_euclid(w, 32.0);
            let err = (d - want).abs().min(32.0 - (d - want).abs());
            assert!(err < 1e-9, "{w}: {d}");
        }
    }

    #[test]
    fn too_few_channels_is_an_error() {
        let scn = scene_with(vec![camera(0.0, [0.0, 0.0, 1.5])], Vec::new());
        assert!(render_camera(&scn, 0, 0, 9).is_err());
        assert!(render_camera(&scn, 1, 0, 10).is_err());
    }
}
