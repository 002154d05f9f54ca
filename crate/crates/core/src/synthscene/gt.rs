//! BEV label rasters in the current-ego frame.

use crate::geometry::{BevGrid, Se2};
use crate::instances::IdMap;
use crate::tensor::Tensor;

use super::{AgentClass, SceneBox, Scenario};

/// Background, vehicle, pedestrian.
pub const NUM_CLASSES: usize = 3;
pub const DEFAULT_CENTER_SIGMA: f64 = 3.0;
/// Cells within this distance (m) of a strip centreline or edge are lane.
pub const LANE_MARKING_HALF_WIDTH: f64 = 0.25;

/// Labels for one output frame. Planes are `channels × X × Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    /// One-hot over [`NUM_CLASSES`].
    pub seg: Tensor,
    /// Vehicle instances only.
    pub instance: IdMap,
    /// `1 × X × Y`, max over per-instance Gaussians.
    pub center: Tensor,
    /// `2 × X × Y`, cells from each instance cell to its footprint centroid.
    pub offset: Tensor,
    /// `2 × X × Y`, centre displacement to the next frame in cells.
    pub flow: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Output frames `0 ..= future`.
    pub frames: Vec<FrameLabels>,
    /// `2 × X × Y`: drivable, lane.
    pub hdmap: Tensor,
}

impl Scenario {
    /// Pose of `b` at relative frame `k`, in the current-ego frame.
    pub fn box_in_current(&self, b: &SceneBox, k: i32) -> Se2 {
        let s = b.state_at(self.time(k));
        let now = self.ego_at(0);
        let (x, y) = now.apply_inverse(s.x, s.y);
        Se2::new(x, y, s.yaw - now.yaw)
    }
}

/// Cell-centre-in-rotated-rectangle test.
pub fn footprint_contains(pose: &Se2, size: [f64; 2], x: f64, y: f64) -> bool {
    let (lx, ly) = pose.apply_inverse(x, y);
    lx.abs() <= 0.5 * size[0] && ly.abs() <= 0.5 * size[1]
}

/// Cells of `b`'s footprint at frame `k` and their mean cell coordinate
/// (the analytic centre when no cell centre falls inside).
fn raster(scn: &Scenario, grid: &BevGrid, b: &SceneBox, k: i32) -> (Vec<(usize, usize)>, (f64, f64)) {
    let pose = scn.box_in_current(b, k);
    let mut cells = Vec::new();
    let (mut sx, mut sy) = (0.0, 0.0);
    for ix in 0..grid.x_cells {
        for iy in 0..grid.y_cells {
            let (mx, my) = grid.cell_center(ix, iy);
            if footprint_contains(&pose, b.size, mx, my) {
                cells.push((ix, iy));
                sx += ix as f64;
                sy += iy as f64;
            }
        }
    }
    let c = if cells.is_empty() {
        grid.metric_to_cell(pose.x, pose.y)
    } else {
        (sx / cells.len() as f64, sy / cells.len() as f64)
    };
    (cells, c)
}

/// Cells covered by `b` at relative frame `k`, in the current-ego grid.
pub fn footprint_cells(scn: &Scenario, grid: &BevGrid, b: &SceneBox, k: i32) -> Vec<(usize, usize)> {
    raster(scn, grid, b, k).0
}

/// Rasterizes output frames `0 ..= future`. Instance centres are footprint
/// centroids, so an instance's mean flow carries its centroid exactly onto
/// the next frame's centroid.
pub fn render_gt(scn: &Scenario, grid: &BevGrid, sigma: f64) -> GroundTruth {
    let (nx, ny) = (grid.x_cells, grid.y_cells);
    let plane = nx * ny;
    let frames = (0..=scn.future as i32)
        .map(|k| {
            let mut seg = vec![0.0; NUM_CLASSES * plane];
            let mut ids = IdMap::new(nx, ny);
            let mut center = vec![0.0; plane];
            let mut offset = vec![0.0; 2 * plane];
            let mut flow = vec![0.0; 2 * plane];
            let mut class = vec![0usize; plane];
            for b in &scn.boxes {
                let (cells, (cx, cy)) = raster(scn, grid, b, k);
                if b.class != AgentClass::Vehicle {
                    for (ix, iy) in cells {
                        class[ix * ny + iy] = b.class.index();
                    }
                    continue;
                }
                let (_, (nx1, ny1)) = raster(scn, grid, b, k + 1);
                for ix in 0..nx {
                    for iy in 0..ny {
                        let d2 = (ix as f64 - cx).powi(2) + (iy as f64 - cy).powi(2);
                        let i = ix * ny + iy;
                        center[i] = f64::max(center[i], (-d2 / (2.0 * sigma * sigma)).exp());
                    }
                }
                for (ix, iy) in cells {
                    let i = ix * ny + iy;
                    class[i] = b.class.index();
                    ids.set(ix, iy, b.id);
                    offset[i] = cx - ix as f64;
                    offset[plane + i] = cy - iy as f64;
                    flow[i] = nx1 - cx;
                    flow[plane + i] = ny1 - cy;
                }
            }
            for (i, &c) in class.iter().enumerate() {
                seg[c * plane + i] = 1.0;
            }
            FrameLabels {
                seg: Tensor::new(vec![NUM_CLASSES, nx, ny], seg).unwrap(),
                instance: ids,
                center: Tensor::new(vec![1, nx, ny], center).unwrap(),
                offset: Tensor::new(vec![2, nx, ny], offset).unwrap(),
                flow: Tensor::new(vec![2, nx, ny], flow).unwrap(),
            }
        })
        .collect();
    GroundTruth {
        frames,
        hdmap: render_hdmap(scn, grid),
    }
}

fn render_hdmap(scn: &Scenario, grid: &BevGrid) -> Tensor {
    let (nx, ny) = (grid.x_cells, grid.y_cells);
    let now = scn.ego_at(0);
    let mut out = vec![0.0; 2 * nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let (mx, my) = grid.cell_center(ix, iy);
            let (wx, wy) = now.apply(mx, my);
            for lane in &scn.lanes {
                let d = lane.lateral(wx, wy).abs();
                if d <= lane.half_width {
                    out[ix * ny + iy] = 1.0;
                }
                if d <= LANE_MARKING_HALF_WIDTH || (d - lane.half_width).abs() <= LANE_MARKING_HALF_WIDTH {
                    out[nx * ny + ix * ny + iy] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![2, nx, ny], out).unwrap()
}
