//! Cameras, ego poses, the BEV grid, and the BEV-to-image projection.
//!
//! Conventions:
//! - ego frame: x forward, y left, z up; the ego sits at the BEV grid centre.
//! - camera optical frame: +z forward, +x right, +y down.
//! - pixel `(u, v)` = (column, row), pixel centres at integer coordinates.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::ini::{join_floats, Document, Section};

/// Depth below which a projected point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-9;

/// Pinhole intrinsics for a `width × height` image (feature map).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid("intrinsics", format!("focal lengths {fx}, {fy}")));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::invalid(
                "intrinsics",
                format!("principal point ({cx}, {cy}) outside {width}x{height}"),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Centred principal point with a horizontal field of view in radians.
    pub fn from_fov(width: usize, height: usize, hfov: f64) -> Result<Self> {
        let f = 0.5 * (width as f64 - 1.0) / (0.5 * hfov).tan();
        Self::new(
            f,
            f,
            0.5 * (width as f64 - 1.0),
            0.5 * (height as f64 - 1.0),
            width,
            height,
        )
    }

    pub fn camera_matrix(&self) -> CameraMatrix {
        CameraMatrix {
            k: Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0),
            width: self.width,
            height: self.height,
        }
    }
}

/// A general affine-pinhole camera matrix (last row `0 0 1`).
///
/// Image-space augmentation (rotation, mirroring) produces matrices that are
/// no longer of the `fx, fy, cx, cy` form, so projection works on this type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraMatrix {
    pub k: Matrix3<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraMatrix {
    /// Viewing ray (optical frame, `z = 1`) through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let inv = self.k.try_inverse().expect("camera matrix is invertible");
        let d = inv * Vector3::new(u, v, 1.0);
        d / d.z
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= (self.width - 1) as f64 && v >= 0.0 && v <= (self.height - 1) as f64
    }
}

impl From<Intrinsics> for CameraMatrix {
    fn from(k: Intrinsics) -> Self {
        k.camera_matrix()
    }
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= ORTHO_TOL) {
            return Err(Error::invalid("pose", format!("RᵀR deviates from I by {ortho:e}")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::invalid("pose", format!("det(R) = {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose", "non-finite translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation_only(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Planar pose: yaw about +z, translation `(x, y, 0)`.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            rotation: rot_z(yaw),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    /// `Rz(yaw)·Ry(pitch)·Rx(roll)` with the given translation.
    pub fn from_euler(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rot_z(yaw) * rot_y(pitch) * rot_x(roll),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn matrix3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.set_column(3, &self.translation);
        m
    }
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Planar pose `(x, y, yaw)`, the form ego trajectories and boxes use.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Se2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Se2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn to_pose(self) -> Pose {
        Pose::planar(self.x, self.y, self.yaw)
    }

    /// Point in this frame → parent frame.
    pub fn apply(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * px - s * py + self.x, s * px + c * py + self.y)
    }

    /// Point in the parent frame → this frame.
    pub fn apply_inverse(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (wx - self.x, wy - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Camera body → optical axes: optical x = −body y, y = −body z, z = body x.
fn optical_from_body() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

/// Where a camera sits on the vehicle. Yaw turns left, positive pitch tilts
/// the view down, roll is about the viewing axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mount {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub position: [f64; 3],
}

impl Mount {
    pub fn cam_from_ego(&self) -> Pose {
        let p = self.position;
        let ego_from_body = Pose::from_euler(
            self.yaw,
            self.pitch,
            self.roll,
            Vector3::new(p[0], p[1], p[2]),
        );
        let body_from_ego = ego_from_body.inverse();
        Pose {
            rotation: optical_from_body() * body_from_ego.rotation,
            translation: optical_from_body() * body_from_ego.translation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub mount: Mount,
}

impl Camera {
    pub fn matrix(&self) -> CameraMatrix {
        self.intrinsics.camera_matrix()
    }

    pub fn cam_from_ego(&self) -> Pose {
        self.mount.cam_from_ego()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        let mut cameras = Vec::new();
        for (label, s) in doc.sections_with_prefix("camera") {
            let intrinsics = Intrinsics::new(
                s.parse("fx")?,
                s.parse("fy")?,
                s.parse("cx")?,
                s.parse("cy")?,
                s.parse("width")?,
                s.parse("height")?,
            )?;
            let pos = s.floats("position")?;
            if pos.len() != 3 {
                return Err(Error::Config(format!(
                    "[camera {label}] position needs 3 values"
                )));
            }
            cameras.push(Camera {
                name: label.to_string(),
                intrinsics,
                mount: Mount {
                    yaw: s.parse_or("yaw", 0.0)?,
                    pitch: s.parse_or("pitch", 0.0)?,
                    roll: s.parse_or("roll", 0.0)?,
                    position: [pos[0], pos[1], pos[2]],
                },
            });
        }
        if cameras.is_empty() {
            return Err(Error::Config("rig defines no [camera NAME] sections".into()));
        }
        Ok(Self { cameras })
    }

    pub fn to_sections(&self) -> Vec<Section> {
        self.cameras
            .iter()
            .map(|c| {
                let mut s = Section::new(format!("camera {}", c.name));
                let k = &c.intrinsics;
                s.push("fx", k.fx)
                    .push("fy", k.fy)
                    .push("cx", k.cx)
                    .push("cy", k.cy)
                    .push("width", k.width)
                    .push("height", k.height)
                    .push("yaw", c.mount.yaw)
                    .push("pitch", c.mount.pitch)
                    .push("roll", c.mount.roll)
                    .push("position", join_floats(&c.mount.position));
                s
            })
            .collect()
    }
}

/// Per-frame ego trajectory from a `[trajectory]` section (`pose = x y yaw`).
pub fn trajectory_from_document(doc: &Document) -> Result<Vec<Se2>> {
    let Some(s) = doc.section("trajectory") else {
        return Ok(Vec::new());
    };
    s.get_all("pose")
        .map(|raw| {
            let v = crate::ini::parse_floats(raw).map_err(Error::Config)?;
            match v.as_slice() {
                &[x, y, yaw] => Ok(Se2::new(x, y, yaw)),
                _ => Err(Error::Config(format!("trajectory pose `{raw}` needs x y yaw"))),
            }
        })
        .collect()
}

pub fn trajectory_section(traj: &[Se2]) -> Section {
    let mut s = Section::new("trajectory");
    for p in traj {
        s.push("pose", join_floats(&[p.x, p.y, p.yaw]));
    }
    s
}

/// Ego-centred BEV grid: `x_cells × y_cells` cells of `resolution` metres,
/// plus the height anchors summed over during cross-view attention.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub x_cells: usize,
    pub y_cells: usize,
    pub resolution: f64,
    pub z_anchors: Vec<f64>,
}

pub fn default_z_anchors() -> Vec<f64> {
    vec![-1.0, 0.0, 1.0, 2.0]
}

impl BevGrid {
    pub fn new(x_cells: usize, y_cells: usize, resolution: f64, z_anchors: Vec<f64>) -> Result<Self> {
        if x_cells < 2 || y_cells < 2 {
            return Err(Error::invalid("grid", format!("{x_cells}x{y_cells} (need ≥ 2)")));
        }
        if !(resolution > 0.0) {
            return Err(Error::invalid("grid", format!("resolution {resolution}")));
        }
        if z_anchors.is_empty() || z_anchors.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("grid", "z anchors must be non-empty and strictly increasing"));
        }
        Ok(Self {
            x_cells,
            y_cells,
            resolution,
            z_anchors,
        })
    }

    pub fn cells(&self) -> usize {
        self.x_cells * self.y_cells
    }

    /// Metric `(x, y)` of a cell centre in the current-ego frame.
    #[inline]
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            (ix as f64 - self.x_cells as f64 / 2.0 + 0.5) * self.resolution,
            (iy as f64 - self.y_cells as f64 / 2.0 + 0.5) * self.resolution,
        )
    }

    pub fn cell_to_metric(&self, ix: usize, iy: usize, iz: usize) -> Result<Vector3<f64>> {
        if ix >= self.x_cells || iy >= self.y_cells || iz >= self.z_anchors.len() {
            return Err(Error::invalid(
                "cell index",
                format!(
                    "({ix}, {iy}, {iz}) outside {}x{}x{}",
                    self.x_cells,
                    self.y_cells,
                    self.z_anchors.len()
                ),
            ));
        }
        let (x, y) = self.cell_center(ix, iy);
        Ok(Vector3::new(x, y, self.z_anchors[iz]))
    }

    /// Continuous cell coordinates of a metric position (inverse of
    /// [`cell_center`](Self::cell_center)).
    #[inline]
    pub fn metric_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x / self.resolution + self.x_cells as f64 / 2.0 - 0.5,
            y / self.resolution + self.y_cells as f64 / 2.0 - 0.5,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// `3×4` map from homogeneous current-ego points to depth-scaled pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix {
    pub t: Matrix3x4<f64>,
    pub width: usize,
    pub height: usize,
}

impl ProjectionMatrix {
    pub fn project(&self, p: &Vector3<f64>) -> Projected {
        let h = self.t * Vector4::new(p.x, p.y, p.z, 1.0);
        let depth = h.z;
        if !(depth > MIN_DEPTH) {
            return Projected {
                u: f64::NAN,
                v: f64::NAN,
                depth,
                valid: false,
            };
        }
        let (u, v) = (h.x / depth, h.y / depth);
        let valid =
            u >= 0.0 && u <= (self.width - 1) as f64 && v >= 0.0 && v <= (self.height - 1) as f64;
        Projected { u, v, depth, valid }
    }
}

/// `K · [R|t]` for current-ego → world (`ego_now`) → ego at capture time
/// (`ego_at_t⁻¹`) → camera (`cam_from_ego`).
pub fn make_projection(
    camera: &CameraMatrix,
    cam_from_ego: &Pose,
    ego_at_t: &Pose,
    ego_now: &Pose,
) -> ProjectionMatrix {
    let cam_from_current = cam_from_ego.compose(&ego_at_t.inverse()).compose(ego_now);
    ProjectionMatrix {
        t: camera.k * cam_from_current.matrix3x4(),
        width: camera.width,
        height: camera.height,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn cell_centres() {
        let g = BevGrid::new(200, 200, 0.5, vec![0.0]).unwrap();
        let p = g.cell_to_metric(100, 100, 0).unwrap();
        assert_eq!((p.x, p.y), (0.25, 0.25));
        let g = BevGrid::new(4, 4, 1.0, vec![0.0, 1.5]).unwrap();
        let p = g.cell_to_metric(0, 0, 1).unwrap();
        assert_eq!((p.x, p.y, p.z), (-1.5, -1.5, 1.5));
        assert!(g.cell_to_metric(4, 0, 0).is_err());
        assert!(g.cell_to_metric(0, 0, 2).is_err());
        let want = [-1.5, -0.5, 0.5, 1.5];
        for ix in 0..4 {
            for iy in 0..4 {
                let p = g.cell_to_metric(ix, iy, 0).unwrap();
                assert_eq!((p.x, p.y), (want[ix], want[iy]));
                let (cx, cy) = g.metric_to_cell(p.x, p.y);
                assert_eq!((cx, cy), (ix as f64, iy as f64));
            }
        }
    }

    #[test]
    fn grid_validation() {
        assert!(BevGrid::new(1, 4, 1.0, vec![0.0]).is_err());
        assert!(BevGrid::new(4, 4, 0.0, vec![0.0]).is_err());
        assert!(BevGrid::new(4, 4, 1.0, vec![1.0, 1.0]).is_err());
        assert_eq!(default_z_anchors(), vec![-1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn pose_validation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        let refl = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Pose::new(refl, Vector3::zeros()).is_err());
        let p = Pose::from_euler(0.3, -0.2, 0.1, Vector3::new(1.0, 2.0, 3.0));
        assert!(Pose::new(*p.rotation(), *p.translation()).is_ok());
        let back = p.compose(&p.inverse());
        assert!((back.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(back.translation().norm() < 1e-12);
    }

    fn test_camera() -> CameraMatrix {
        Intrinsics::new(100.0, 100.0, 120.0, 60.0, 240, 120)
            .unwrap()
            .camera_matrix()
    }

    #[test]
    fn principal_point() {
        let id = Pose::identity();
        let t = make_projection(&test_camera(), &id, &id, &id);
        let p = t.project(&Vector3::new(0.0, 0.0, 5.0));
        assert!(p.valid);
        assert_eq!((p.u, p.v, p.depth), (120.0, 60.0, 5.0));
        assert!(!t.project(&Vector3::new(0.0, 0.0, -1.0)).valid);
        assert!(!t.project(&Vector3::new(0.0, 0.0, 0.0)).valid);
        assert!(!t.project(&Vector3::new(100.0, 0.0, 1.0)).valid);
    }

    #[test]
    fn ego_translation_matches_static_shift() {
        let cam = test_camera();
        let id = Pose::identity();
        let moved = Pose::translation_only(Vector3::new(1.0, 0.0, 0.0));
        let t_moving = make_projection(&cam, &id, &id, &moved);
        let t_static = make_projection(&cam, &id, &id, &id);
        for z0 in [2.0, 5.0, 9.0] {
            let a = t_moving.project(&Vector3::new(0.0, 0.0, z0));
            let b = t_static.project(&Vector3::new(1.0, 0.0, z0));
            assert!((a.u - b.u).abs() < 1e-12 && (a.v - b.v).abs() < 1e-12);
        }
    }

    #[test]
    fn yaw_step_by_step_oracle() {
        let cam = test_camera();
        let mount = Mount {
            yaw: 0.1,
            pitch: 0.15,
            roll: 0.0,
            position: [1.5, 0.0, 1.6],
        };
        let cam_from_ego = mount.cam_from_ego();
        let ego_t = Se2::new(3.0, -1.0, 0.2);
        let ego_now = Se2::new(5.0, 1.0, 0.2 + FRAC_PI_2);
        let t = make_projection(&cam, &cam_from_ego, &ego_t.to_pose(), &ego_now.to_pose());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for _ in 0..400 {
            let p = Vector3::new(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-1.0..2.0),
            );
            // current ego -> world
            let (wx, wy) = ego_now.apply(p.x, p.y);
            // world -> ego at t
            let (ex, ey) = ego_t.apply_inverse(wx, wy);
            // ego -> camera body -> optical
            let bx = ex - 1.5;
            let by = ey;
            let bz = p.z - 1.6;
            let (sy, cy) = 0.1f64.sin_cos();
            let (x1, y1) = (cy * bx + sy * by, -sy * bx + cy * by);
            let (sp, cp) = 0.15f64.sin_cos();
            let (x2, z2) = (cp * x1 - sp * bz, sp * x1 + cp * bz);
            let (ox, oy, oz) = (-y1, -z2, x2);
            if oz <= 0.5 {
                continue;
            }
            let u = 100.0 * ox / oz + 120.0;
            let v = 100.0 * oy / oz + 60.0;
            let got = t.project(&p);
            assert!((got.depth - oz).abs() < 1e-9);
            assert!((got.u - u).abs() < 1e-9 && (got.v - v).abs() < 1e-9);
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn projection_matches_dehomogenisation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = test_camera();
        let pose = Pose::from_euler(0.4, 0.1, -0.05, Vector3::new(0.2, 0.1, -0.3));
        let t = make_projection(&cam, &pose, &Pose::identity(), &Pose::identity());
        for _ in 0..1000 {
            let p = Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let q = pose.apply(&p);
            let h = cam.k * q;
            let got = t.project(&p);
            if h.z > MIN_DEPTH {
                assert!((got.u - h.x / h.z).abs() < 1e-9);
                assert!((got.v - h.y / h.z).abs() < 1e-9);
                assert_eq!(got.valid, cam.in_image(h.x / h.z, h.y / h.z));
            } else {
                assert!(!got.valid);
            }
        }
    }

    #[test]
    fn forward_mount_looks_along_ego_x() {
        let mount = Mount {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            position: [0.0, 0.0, 0.0],
        };
        let p = mount.cam_from_ego().apply(&Vector3::new(5.0, 1.0, 2.0));
        assert_eq!((p.x, p.y, p.z), (-1.0, -2.0, 5.0));
    }

    #[test]
    fn rig_round_trip() {
        let text = "[camera front]\nfx = 50\nfy = 50\ncx = 31.5\ncy = 31.5\nwidth = 64\nheight = 64\nyaw = 0\npitch = 0.3\nroll = 0\nposition = 1.5 0 1.6\n\n[trajectory]\npose = 0 0 0\npose = 1 0.5 0.1\n";
        let doc = Document::parse(text).unwrap();
        let rig = CameraRig::from_document(&doc).unwrap();
        let traj = trajectory_from_document(&doc).unwrap();
        assert_eq!(rig.cameras[0].intrinsics.width, 64);
        assert_eq!(traj[1], Se2::new(1.0, 0.5, 0.1));
        let mut sections = rig.to_sections();
        sections.push(trajectory_section(&traj));
        assert_eq!(Document { sections }.render(), text);
    }
}
