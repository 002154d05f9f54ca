//! Image-view and BEV augmentations with exact geometric bookkeeping.
//!
//! Image augmentations update the camera matrix so projections stay
//! consistent with the resampled feature map. BEV augmentations move every
//! raster with the same cell permutation and rotate vector channels.

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraMatrix;
use crate::heads::PredictionBundle;
use crate::instances::{IdMap, InstanceVideo};
use crate::synthscene::{FrameLabels, GroundTruth};
use crate::tensor::{bilinear_sample, Tensor};

/// Which augmentation families are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugMode {
    #[default]
    None,
    Img,
    Bev,
    Both,
}

impl AugMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugMode::None),
            "img" => Ok(AugMode::Img),
            "bev" => Ok(AugMode::Bev),
            "both" => Ok(AugMode::Both),
            _ => Err(Error::Config(format!("augmentation mode `{s}` (expected none|img|bev|both)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugMode::None => "none",
            AugMode::Img => "img",
            AugMode::Bev => "bev",
            AugMode::Both => "both",
        }
    }

    pub fn image(self) -> bool {
        matches!(self, AugMode::Img | AugMode::Both)
    }

    pub fn bev(self) -> bool {
        matches!(self, AugMode::Bev | AugMode::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageAugRanges {
    pub scale: (f64, f64),
    /// Maximum absolute rotation in radians.
    pub rotation: f64,
    pub flip_probability: f64,
}

impl Default for ImageAugRanges {
    fn default() -> Self {
        Self {
            scale: (0.9, 1.1),
            rotation: 0.1,
            flip_probability: 0.5,
        }
    }
}

/// Scale and rotation about the image centre, then an optional horizontal
/// mirror.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageAug {
    pub scale: f64,
    pub rotation: f64,
    pub hflip: bool,
}

impl ImageAug {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            hflip: false,
        }
    }

    pub fn sample(rng: &mut impl Rng, ranges: &ImageAugRanges) -> Self {
        Self {
            scale: rng.gen_range(ranges.scale.0..=ranges.scale.1),
            rotation: rng.gen_range(-ranges.rotation..=ranges.rotation),
            hflip: rng.gen_bool(ranges.flip_probability),
        }
    }

    /// Homogeneous pixel map `(u, v, 1) ↦ (u′, v′, 1)` on a `w × h` image.
    pub fn matrix(&self, w: usize, h: usize) -> Matrix3<f64> {
        let (cu, cv) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = (self.scale * c, self.scale * s);
        let about_centre = Matrix3::new(a, -b, cu - a * cu + b * cv, b, a, cv - b * cu - a * cv, 0.0, 0.0, 1.0);
        if self.hflip {
            Matrix3::new(-1.0, 0.0, w as f64 - 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0) * about_centre
        } else {
            about_centre
        }
    }

    /// Where pixel `(u, v)` lands.
    pub fn apply_pixel(&self, w: usize, h: usize, u: f64, v: f64) -> (f64, f64) {
        let p = self.matrix(w, h) * nalgebra::Vector3::new(u, v, 1.0);
        (p.x, p.y)
    }
}

/// Resamples an `H × W × C` feature map under `aug` (zeros where the source
/// falls outside) and returns the matching camera matrix `K′ = A·K`.
pub fn apply_image_aug(features: &Tensor, cam: &CameraMatrix, aug: &ImageAug) -> Result<(Tensor, CameraMatrix)> {
    let [h, w, c] = features.dims3("apply_image_aug")?;
    if h != cam.height || w != cam.width {
        return Err(Error::shape("apply_image_aug", format!("{h}x{w} features for a {}x{} camera", cam.height, cam.width)));
    }
    let a = aug.matrix(w, h);
    let inv = a.try_inverse().ok_or_else(|| Error::invalid("image augmentation", "singular transform"))?;
    let mut out = vec![0.0; h * w * c];
    for v in 0..h {
        for u in 0..w {
            let src = inv * nalgebra::Vector3::new(u as f64, v as f64, 1.0);
            let (su, sv) = (snap(src.x), snap(src.y));
            let s = bilinear_sample(features, sv, su);
            out[(v * w + u) * c..][..c].copy_from_slice(&s.values);
        }
    }
    let k = CameraMatrix { k: a * cam.k, width: w, height: h };
    Ok((Tensor::new(vec![h, w, c], out)?, k))
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-9 {
        r
    } else {
        v
    }
}

/// Linear map on cell offsets from the grid centre (row axis first). Exact
/// for the right-angle group; continuous yaw and scale resample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevAug {
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    /// Mirror the lateral axis (`y → −y`).
    pub flip_y: bool,
    /// Mirror the longitudinal axis (`x → −x`).
    pub flip_x: bool,
    /// Extra yaw in radians.
    pub yaw: f64,
    pub scale: f64,
}

impl Default for BevAug {
    fn default() -> Self {
        Self {
            quarter_turns: 0,
            flip_y: false,
            flip_x: false,
            yaw: 0.0,
            scale: 1.0,
        }
    }
}

impl BevAug {
    pub fn right_angle(quarter_turns: u8, flip_y: bool) -> Self {
        Self {
            quarter_turns: quarter_turns % 4,
            flip_y,
            ..Self::default()
        }
    }

    /// Uniform over the eight right-angle transforms.
    pub fn sample_right_angle(rng: &mut impl Rng) -> Self {
        Self::right_angle(rng.gen_range(0..4), rng.gen_bool(0.5))
    }

    pub fn is_right_angle(&self) -> bool {
        self.yaw == 0.0 && self.scale == 1.0
    }

    /// `[[a, b], [c, d]]` acting on `(d_row, d_col)`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let mut m = [[1.0, 0.0], [0.0, 1.0]];
        if self.flip_y {
            m = mul([[1.0, 0.0], [0.0, -1.0]], m);
        }
        if self.flip_x {
            m = mul([[-1.0, 0.0], [0.0, 1.0]], m);
        }
        for _ in 0..self.quarter_turns % 4 {
            m = mul([[0.0, -1.0], [1.0, 0.0]], m);
        }
        if !self.is_right_angle() {
            let (s, c) = self.yaw.sin_cos();
            m = mul([[self.scale * c, -self.scale * s], [self.scale * s, self.scale * c]], m);
        }
        m
    }

    pub fn then(&self, next: &BevAug) -> [[f64; 2]; 2] {
        mul(next.matrix(), self.matrix())
    }

    /// Transformed vector `(d_row, d_col)`.
    pub fn apply_vector(&self, v: (f64, f64)) -> (f64, f64) {
        let m = self.matrix();
        (m[0][0] * v.0 + m[0][1] * v.1, m[1][0] * v.0 + m[1][1] * v.1)
    }

    /// Transformed continuous cell position.
    pub fn apply_point(&self, nx: usize, ny: usize, p: (f64, f64)) -> (f64, f64) {
        let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
        let (a, b) = self.apply_vector((p.0 - cx, p.1 - cy));
        (a + cx, b + cy)
    }

    fn check(&self, nx: usize, ny: usize) -> Result<()> {
        if nx != ny && (self.quarter_turns % 2 == 1 || !self.is_right_angle()) {
            return Err(Error::invalid("BEV augmentation", format!("rotation of a non-square {nx}x{ny} grid")));
        }
        Ok(())
    }

    /// Source position of output cell `(ix, iy)`.
    fn source(&self, inv: [[f64; 2]; 2], nx: usize, ny: usize, ix: usize, iy: usize) -> (f64, f64) {
        let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
        let (a, b) = (ix as f64 - cx, iy as f64 - cy);
        (snap(inv[0][0] * a + inv[0][1] * b + cx), snap(inv[1][0] * a + inv[1][1] * b + cy))
    }

    fn inverse(&self) -> [[f64; 2]; 2] {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
    }

    /// Resamples the planes of a `P × X × Y` tensor; `nearest` for labels.
    /// With `vector`, planes come in `(d_row, d_col)` pairs and are rotated.
    pub fn apply_planes(&self, t: &Tensor, nearest: bool, vector: bool) -> Result<Tensor> {
        let [p, nx, ny] = t.dims3("apply_planes")?;
        self.check(nx, ny)?;
        if vector && p % 2 != 0 {
            return Err(Error::shape("apply_planes", format!("{p} planes do not pair into vectors")));
        }
        let hwc = t.chw_to_hwc()?;
        let mut out = self.apply_map(&hwc, nearest)?.hwc_to_chw()?.into_data();
        if vector {
            let m = self.matrix();
            let plane = nx * ny;
            for pair in 0..p / 2 {
                let base = 2 * pair * plane;
                for i in 0..plane {
                    let (a, b) = (out[base + i], out[base + plane + i]);
                    out[base + i] = m[0][0] * a + m[0][1] * b;
                    out[base + plane + i] = m[1][0] * a + m[1][1] * b;
                }
            }
        }
        Tensor::new(vec![p, nx, ny], out)
    }

    /// Resamples an `X × Y × C` map (features are moved, not rotated).
    pub fn apply_map(&self, t: &Tensor, nearest: bool) -> Result<Tensor> {
        let [nx, ny, c] = t.dims3("apply_map")?;
        self.check(nx, ny)?;
        let inv = self.inverse();
        let mut out = vec![0.0; nx * ny * c];
        for ix in 0..nx {
            for iy in 0..ny {
                let (r, s) = self.source(inv, nx, ny, ix, iy);
                let (r, s) = if nearest { (r.round(), s.round()) } else { (r, s) };
                let v = bilinear_sample(t, r, s).values;
                out[(ix * ny + iy) * c..][..c].copy_from_slice(&v);
            }
        }
        Tensor::new(vec![nx, ny, c], out)
    }

    /// Every frame of an `F × X × Y × C` temporal map.
    pub fn apply_temporal(&self, t: &Tensor) -> Result<Tensor> {
        let f = t.dims4("apply_temporal")?[0];
        let frames = (0..f).map(|i| self.apply_map(&t.slice0(i), false)).collect::<Result<Vec<_>>>()?;
        Tensor::stack(&frames)
    }

    pub fn apply_ids(&self, m: &IdMap) -> Result<IdMap> {
        let t = self.apply_map(&m.to_tensor().reshape(&[m.dims().0, m.dims().1, 1])?, true)?;
        IdMap::from_tensor(&t.reshape(&[m.dims().0, m.dims().1])?)
    }

    pub fn apply_video(&self, v: &InstanceVideo) -> Result<InstanceVideo> {
        InstanceVideo::from_maps(v.frames.iter().map(|m| self.apply_ids(m)).collect::<Result<_>>()?)
    }

    pub fn apply_mask(&self, mask: &[bool], nx: usize, ny: usize) -> Result<Vec<bool>> {
        let t = Tensor::new(vec![nx, ny, 1], mask.iter().map(|&b| b as u8 as f64).collect())?;
        Ok(self.apply_map(&t, true)?.data().iter().map(|&v| v > 0.5).collect())
    }

    pub fn apply_ground_truth(&self, gt: &GroundTruth) -> Result<GroundTruth> {
        let frames = gt
            .frames
            .iter()
            .map(|f| {
                Ok(FrameLabels {
                    seg: self.apply_planes(&f.seg, true, false)?,
                    instance: self.apply_ids(&f.instance)?,
                    center: self.apply_planes(&f.center, false, false)?,
                    offset: self.apply_planes(&f.offset, false, true)?,
                    flow: self.apply_planes(&f.flow, false, true)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GroundTruth {
            frames,
            hdmap: self.apply_planes(&gt.hdmap, true, false)?,
        })
    }

    pub fn apply_bundle(&self, b: &PredictionBundle) -> Result<PredictionBundle> {
        let each = |v: &[Tensor], vector: bool| -> Result<Vec<Tensor>> {
            v.iter().map(|t| self.apply_planes(t, false, vector)).collect()
        };
        Ok(PredictionBundle {
            seg: each(&b.seg, false)?,
            center: each(&b.center, false)?,
            offset: each(&b.offset, true)?,
            flow: each(&b.flow, true)?,
            hdmap: self.apply_planes(&b.hdmap, false, false)?,
        })
    }
}

fn mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}
