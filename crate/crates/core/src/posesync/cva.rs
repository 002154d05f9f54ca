//! Cross-view attention: every BEV cell attends, per camera, to the pixels
//! its height anchors project to.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{make_projection, BevGrid, CameraMatrix, ProjectionMatrix, Se2};
use crate::synthscene::{encode_position, FeatureImage, Hit, Scenario};
use crate::tensor::Tensor;

use super::deform::DeformAttnParams;

/// How per-camera BEV maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Divide by the number of cameras.
    #[default]
    Mean,
    /// Divide by the number of cameras with at least one valid reference.
    ValidCameraMean,
}

/// Projection of current-ego points into each camera at relative frame `k`.
pub fn frame_projections(scn: &Scenario, k: i32) -> Vec<ProjectionMatrix> {
    let mats: Vec<CameraMatrix> = scn.rig.cameras.iter().map(|c| c.matrix()).collect();
    frame_projections_with(scn, k, &mats)
}

/// As [`frame_projections`] with replacement camera matrices (after image
/// augmentation).
pub fn frame_projections_with(scn: &Scenario, k: i32, matrices: &[CameraMatrix]) -> Vec<ProjectionMatrix> {
    let ego_t = scn.ego_at(k).to_pose();
    let ego_now = scn.ego_at(0).to_pose();
    scn.rig
        .cameras
        .iter()
        .zip(matrices)
        .map(|(cam, m)| make_projection(m, &cam.cam_from_ego(), &ego_t, &ego_now))
        .collect()
}

/// `B[x,y] = (1/N) Σ_i Σ_{valid z} f_DA(q[x,y], ref_i(x,y,z), F_i)` over an
/// `X × Y × C` query map. Cells with no valid reference in a camera get
/// nothing from it.
pub fn cross_view_attention(
    queries: &Tensor,
    grid: &BevGrid,
    features: &[Tensor],
    projections: &[ProjectionMatrix],
    params: &DeformAttnParams,
    aggregation: Aggregation,
) -> Result<Tensor> {
    let [nx, ny, c] = queries.dims3("cross_view_attention")?;
    if nx != grid.x_cells || ny != grid.y_cells || c != params.channels {
        return Err(Error::shape(
            "cross_view_attention",
            format!(
                "queries {nx}x{ny}x{c}, grid {}x{}, params C = {}",
                grid.x_cells, grid.y_cells, params.channels
            ),
        ));
    }
    if features.len() != projections.len() || features.is_empty() {
        return Err(Error::shape(
            "cross_view_attention",
            format!("{} feature maps, {} projections", features.len(), projections.len()),
        ));
    }
    let mut values = Vec::with_capacity(features.len());
    for (f, p) in features.iter().zip(projections) {
        let [h, w, fc] = f.dims3("cross_view_attention")?;
        if fc != c || h != p.height || w != p.width {
            return Err(Error::shape(
                "cross_view_attention",
                format!("feature map {h}x{w}x{fc} vs camera {}x{} and C = {c}", p.height, p.width),
            ));
        }
        values.push(params.value_map(f)?);
    }
    let n_cams = features.len() as f64;
    let qd = queries.data();
    let mut out = vec![0.0; nx * ny * c];
    out.par_chunks_mut(ny * c).enumerate().for_each(|(ix, row)| {
        let mut h = vec![0.0; c];
        for iy in 0..ny {
            let q = &qd[(ix * ny + iy) * c..(ix * ny + iy + 1) * c];
            let plan = params.plan(q);
            let cell = &mut row[iy * c..(iy + 1) * c];
            let (mx, my) = grid.cell_center(ix, iy);
            let mut seen = 0usize;
            for (v, proj) in values.iter().zip(projections) {
                h.iter_mut().for_each(|x| *x = 0.0);
                let mut n_valid = 0usize;
                for &z in &grid.z_anchors {
                    let r = proj.project(&nalgebra::Vector3::new(mx, my, z));
                    if r.valid {
                        params.sample_heads(v, &plan, (r.v, r.u), &mut h);
                        n_valid += 1;
                    }
                }
                if n_valid == 0 {
                    continue;
                }
                seen += 1;
                for (o, x) in cell.iter_mut().zip(params.project_out(&h, n_valid as f64)) {
                    *o += x;
                }
            }
            let denom = match aggregation {
                Aggregation::Mean => n_cams,
                Aggregation::ValidCameraMean => seen.max(1) as f64,
            };
            cell.iter_mut().for_each(|x| *x /= denom);
        }
    });
    Tensor::new(vec![nx, ny, c], out)
}

/// Cells whose ground point (z = 0) is seen by at least one camera, and
/// seen as ground (not a box) by every camera it projects into.
pub fn visible_ground_cells(grid: &BevGrid, images: &[FeatureImage], projections: &[ProjectionMatrix]) -> Vec<bool> {
    let mut out = vec![false; grid.cells()];
    for ix in 0..grid.x_cells {
        for iy in 0..grid.y_cells {
            let (mx, my) = grid.cell_center(ix, iy);
            let p = nalgebra::Vector3::new(mx, my, 0.0);
            let mut seen = false;
            let mut clean = true;
            for (img, proj) in images.iter().zip(projections) {
                let r = proj.project(&p);
                if !r.valid {
                    continue;
                }
                seen = true;
                let (u0, v0) = (r.u.floor() as usize, r.v.floor() as usize);
                let (w, h) = (proj.width, proj.height);
                for (u, v) in [(u0, v0), ((u0 + 1).min(w - 1), v0), (u0, (v0 + 1).min(h - 1)), ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1))] {
                    if !matches!(img.hit(u, v), Hit::Ground(_)) {
                        clean = false;
                    }
                }
            }
            out[ix * grid.y_cells + iy] = seen && clean;
        }
    }
    out
}

/// Cosine similarity of a cell's world-position channels with the encoding
/// of the cell's own world position; 0 for a zero vector.
pub fn world_encoding_cosine(bev: &Tensor, grid: &BevGrid, ego_now: Se2, ix: usize, iy: usize) -> f64 {
    let c = bev.dims()[2];
    let cell = &bev.data()[(ix * grid.y_cells + iy) * c..][..8];
    let (mx, my) = grid.cell_center(ix, iy);
    let (wx, wy) = ego_now.apply(mx, my);
    let mut want = [0.0; 8];
    want[..4].copy_from_slice(&encode_position(wx));
    want[4..].copy_from_slice(&encode_position(wy));
    let dot: f64 = cell.iter().zip(&want).map(|(a, b)| a * b).sum();
    let na = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = want.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean of [`world_encoding_cosine`] over `mask`; `None` if the mask is empty.
pub fn mean_world_cosine(bev: &Tensor, grid: &BevGrid, ego_now: Se2, mask: &[bool]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for ix in 0..grid.x_cells {
        for iy in 0..grid.y_cells {
            if mask[ix * grid.y_cells + iy] {
                sum += world_encoding_cosine(bev, grid, ego_now, ix, iy);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
