//! Rigid-warp temporal alignment baseline and its diagnostics.
//!
//! A past BEV map built in the past ego frame is resampled into the current
//! ego frame. Resampling blurs features and loses everything that falls
//! outside the past grid; [`distortion_report`] measures both against the
//! pose-synchronized encoding of the same frames.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{make_projection, BevGrid, ProjectionMatrix, Se2};
use crate::posesync::{
    cross_view_attention, frame_projections, mean_world_cosine, visible_ground_cells, Aggregation,
    DeformAttnParams,
};
use crate::synthscene::{decode_position, render_features, Scenario, WORLD_X_CHANNELS, WORLD_Y_CHANNELS};
use crate::tensor::{bilinear_sample, Tensor};

/// Planar motion taking past-ego coordinates to current-ego coordinates:
/// `p_now = R(theta)·p_past + (dx, dy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoDelta {
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
}

impl EgoDelta {
    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            dx: 0.0,
            dy: 0.0,
        }
    }

    pub fn new(theta: f64, dx: f64, dy: f64) -> Result<Self> {
        if !(theta.is_finite() && dx.is_finite() && dy.is_finite()) {
            return Err(Error::invalid("ego delta", "non-finite component"));
        }
        Ok(Self { theta, dx, dy })
    }

    /// Delta from the ego pose at `past` to the ego pose at `now`.
    pub fn between(past: Se2, now: Se2) -> Self {
        let (dx, dy) = now.apply_inverse(past.x, past.y);
        Self {
            theta: past.yaw - now.yaw,
            dx,
            dy,
        }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &EgoDelta) -> Self {
        let (s, c) = self.theta.sin_cos();
        Self {
            theta: self.theta + first.theta,
            dx: c * first.dx - s * first.dy + self.dx,
            dy: s * first.dx + c * first.dy + self.dy,
        }
    }

    /// Current-frame point → past-frame point.
    pub fn to_past(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (rx, ry) = (x - self.dx, y - self.dy);
        (c * rx + s * ry, -s * rx + c * ry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarpMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Positions within this distance of a cell index are sampled exactly.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= SNAP {
        r
    } else {
        v
    }
}

/// Resamples `past[X×Y×C]` into the current frame. Returns the warped map
/// and a row-major validity mask (false where the source fell off the grid).
pub fn warp_bev(past: &Tensor, grid: &BevGrid, delta: &EgoDelta, mode: WarpMode) -> Result<(Tensor, Vec<bool>)> {
    let [nx, ny, c] = past.dims3("warp_bev")?;
    if nx != grid.x_cells || ny != grid.y_cells {
        return Err(Error::shape("warp_bev", format!("map {nx}x{ny} vs grid {}x{}", grid.x_cells, grid.y_cells)));
    }
    let mut out = vec![0.0; nx * ny * c];
    let mut mask = vec![false; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let (mx, my) = grid.cell_center(ix, iy);
            let (px, py) = delta.to_past(mx, my);
            let (r, s) = grid.metric_to_cell(px, py);
            let (r, s) = match mode {
                WarpMode::Bilinear => (snap(r), snap(s)),
                WarpMode::Nearest => (r.round(), s.round()),
            };
            let sample = bilinear_sample(past, r, s);
            let i = ix * ny + iy;
            mask[i] = sample.in_range;
            out[i * c..(i + 1) * c].copy_from_slice(&sample.values);
        }
    }
    Ok((Tensor::new(vec![nx, ny, c], out)?, mask))
}

/// Fraction of false entries.
pub fn oob_fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| !m).count() as f64 / mask.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMethod {
    Warp,
    Sync,
}

impl AlignMethod {
    pub fn name(self) -> &'static str {
        match self {
            AlignMethod::Warp => "warp",
            AlignMethod::Sync => "sync",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    /// Relative frame (negative = past).
    pub frame: i32,
    pub method: AlignMethod,
    /// Mean decoded world-position disagreement with the current-frame map,
    /// in cells.
    pub displacement: f64,
    pub oob_fraction: f64,
    /// Mean world-encoding cosine over visible ground cells.
    pub cosine: f64,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("frame,method,displacement,oob_fraction,cosine\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.frame, r.method.name(), r.displacement, r.oob_fraction, r.cosine).unwrap();
    }
    s
}

fn encode(grid: &BevGrid, feats: &[Tensor], projs: &[ProjectionMatrix], params: &DeformAttnParams) -> Result<Tensor> {
    let q = Tensor::zeros(&[grid.x_cells, grid.y_cells, params.channels]);
    cross_view_attention(&q, grid, feats, projs, params, Aggregation::Mean)
}

fn nonzero(bev: &Tensor) -> Vec<bool> {
    let c = bev.dims()[2];
    bev.data().chunks(c).map(|v| v[..8].iter().any(|&x| x != 0.0)).collect()
}

/// Decoded world position (mod 32 m) disagreement, averaged over `mask`.
fn mean_displacement(a: &Tensor, b: &Tensor, mask: &[bool], resolution: f64) -> f64 {
    let c = a.dims()[2];
    let period = 32.0;
    let wrap = |d: f64| (d + 0.5 * period).rem_euclid(period) - 0.5 * period;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (va, vb) = (&a.data()[i * c..(i + 1) * c], &b.data()[i * c..(i + 1) * c]);
        let dx = wrap(decode_position(&va[WORLD_X_CHANNELS]) - decode_position(&vb[WORLD_X_CHANNELS]));
        let dy = wrap(decode_position(&va[WORLD_Y_CHANNELS]) - decode_position(&vb[WORLD_Y_CHANNELS]));
        sum += dx.hypot(dy) / resolution;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Compares warp alignment against pose-synchronized encoding for every
/// past frame of a static scene. Both use collapsed attention over the
/// grid's z anchors, so BEV cells carry the world encoding the cameras saw.
pub fn distortion_report(scn: &Scenario, grid: &BevGrid, channels: usize, mode: WarpMode) -> Result<Vec<ReportRow>> {
    if let Some(b) = scn.boxes.iter().find(|b| !b.is_static()) {
        return Err(Error::NotStatic(format!("box {} moves", b.id)));
    }
    let params = DeformAttnParams::collapsed(channels, 1, 1)?;
    let now = scn.ego_at(0);
    let current_imgs = render_features(scn, 0, channels)?;
    let current_feats: Vec<Tensor> = current_imgs.iter().map(|i| i.features.clone()).collect();
    let b0 = encode(grid, &current_feats, &frame_projections(scn, 0), &params)?;
    let seen_now = nonzero(&b0);

    let mut rows = Vec::new();
    for t in 1..=scn.past as i32 {
        let imgs = render_features(scn, -t, channels)?;
        let feats: Vec<Tensor> = imgs.iter().map(|i| i.features.clone()).collect();
        let sync_projs = frame_projections(scn, -t);
        let visible = visible_ground_cells(grid, &imgs, &sync_projs);

        let sync = encode(grid, &feats, &sync_projs, &params)?;
        let sync_seen = nonzero(&sync);
        let lost: usize = seen_now.iter().zip(&sync_seen).filter(|(&a, &b)| a && !b).count();

        let ego_t = scn.ego_at(-t).to_pose();
        let own_projs: Vec<ProjectionMatrix> = scn
            .rig
            .cameras
            .iter()
            .map(|c| make_projection(&c.matrix(), &c.cam_from_ego(), &ego_t, &ego_t))
            .collect();
        let own = encode(grid, &feats, &own_projs, &params)?;
        let (warped, mask) = warp_bev(&own, grid, &EgoDelta::between(scn.ego_at(-t), now), mode)?;

        for (method, bev, oob) in [
            (AlignMethod::Warp, &warped, oob_fraction(&mask)),
            (AlignMethod::Sync, &sync, lost as f64 / grid.cells() as f64),
        ] {
            let seen = nonzero(bev);
            let both: Vec<bool> = (0..grid.cells()).map(|i| seen[i] && seen_now[i]).collect();
            rows.push(ReportRow {
                frame: -t,
                method,
                displacement: mean_displacement(bev, &b0, &both, grid.resolution),
                oob_fraction: oob,
                cosine: mean_world_cosine(bev, grid, now, &visible).unwrap_or(0.0),
            });
        }
    }
    Ok(rows)
}
