//! Occupancy IoU and the video panoptic quality family.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{IdMap, InstanceVideo};

/// Minimum IoU of a true positive.
pub const MATCH_IOU: f64 = 0.5;

/// `Σ_t |pred ∩ gt| / Σ_t |pred ∪ gt|`; 1 when both are empty throughout.
pub fn seg_iou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape("seg_iou", "prediction and ground truth differ in shape"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.iter().zip(gt) {
        for (&x, &y) in a.iter().zip(b) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Matching outcome of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTerms {
    /// `(pred id, gt id, IoU)` sorted by ids.
    pub tp: Vec<(u32, u32, f64)>,
    pub fp: usize,
    pub fn_: usize,
    pub vpq: f64,
    pub vrq: f64,
    pub vsq: f64,
}

impl FrameTerms {
    /// Scores from the counts; a frame with nothing on either side scores 1.
    /// IoUs are summed in ascending order so the result does not depend on
    /// id labels.
    pub fn score(tp: Vec<(u32, u32, f64)>, fp: usize, fn_: usize) -> Self {
        let n = tp.len() as f64;
        let mut ious: Vec<f64> = tp.iter().map(|t| t.2).collect();
        ious.sort_by(f64::total_cmp);
        let iou_sum = ious.iter().fold(0.0, |a, v| a + v);
        let denom = n + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        let (vpq, vrq, vsq) = if denom == 0.0 {
            (1.0, 1.0, 1.0)
        } else {
            (iou_sum / denom, n / denom, if tp.is_empty() { 0.0 } else { iou_sum / n })
        };
        Self { tp, fp, fn_, vpq, vrq, vsq }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VpqReport {
    pub vpq: f64,
    pub vrq: f64,
    pub vsq: f64,
    pub frames: Vec<FrameTerms>,
}

/// Pairwise IoUs of overlapping segments plus the segment areas.
pub fn overlaps(pred: &IdMap, gt: &IdMap) -> (BTreeMap<(u32, u32), f64>, BTreeMap<u32, usize>, BTreeMap<u32, usize>) {
    let (pa, ga) = (pred.areas(), gt.areas());
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_insert(0) += 1;
        }
    }
    let ious = inter
        .into_iter()
        .map(|((p, g), i)| ((p, g), i as f64 / (pa[&p] + ga[&g] - i) as f64))
        .collect();
    (ious, pa, ga)
}

/// Video panoptic quality over frames `0 ..= horizon`.
///
/// A pred track binds to the gt track of its first true positive; in later
/// frames a match with IoU above [`MATCH_IOU`] counts only if it agrees
/// with that binding. Reported scores are means over frames.
pub fn vpq(pred: &InstanceVideo, gt: &InstanceVideo, horizon: usize) -> Result<VpqReport> {
    if pred.len() != horizon + 1 || gt.len() != horizon + 1 {
        return Err(Error::Horizon(format!(
            "{} predicted and {} ground-truth frames for horizon {horizon}",
            pred.len(),
            gt.len()
        )));
    }
    let mut bound: BTreeMap<u32, u32> = BTreeMap::new();
    let mut frames = Vec::with_capacity(horizon + 1);
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        if p.dims() != g.dims() {
            return Err(Error::shape("vpq", format!("pred {:?} vs gt {:?}", p.dims(), g.dims())));
        }
        let (ious, pa, ga) = overlaps(p, g);
        let mut tp = Vec::new();
        for (&(pid, gid), &iou) in &ious {
            if iou > MATCH_IOU && bound.get(&pid).map_or(true, |&b| b == gid) {
                tp.push((pid, gid, iou));
            }
        }
        for &(pid, gid, _) in &tp {
            bound.entry(pid).or_insert(gid);
        }
        frames.push(FrameTerms::score(tp.clone(), pa.len() - tp.len(), ga.len() - tp.len()));
    }
    let n = frames.len() as f64;
    let mean = |f: fn(&FrameTerms) -> f64| frames.iter().map(f).fold(0.0, |a, v| a + v) / n;
    Ok(VpqReport {
        vpq: mean(|f| f.vpq),
        vrq: mean(|f| f.vrq),
        vsq: mean(|f| f.vsq),
        frames,
    })
}

fn crop_window(n: usize, keep: usize) -> std::ops::Range<usize> {
    let keep = keep.min(n);
    let lo = (n - keep) / 2;
    lo..lo + keep
}

/// Central `keep_x × keep_y` cells (clamped to the grid).
pub fn crop_ids(m: &IdMap, keep_x: usize, keep_y: usize) -> IdMap {
    let (nx, ny) = m.dims();
    let (rx, ry) = (crop_window(nx, keep_x), crop_window(ny, keep_y));
    let ids = rx.clone().flat_map(|ix| ry.clone().map(move |iy| m.get(ix, iy))).collect();
    IdMap::from_vec(rx.len(), ry.len(), ids).expect("crop extents")
}

pub fn crop_mask(mask: &[bool], nx: usize, ny: usize, keep_x: usize, keep_y: usize) -> Vec<bool> {
    let (rx, ry) = (crop_window(nx, keep_x), crop_window(ny, keep_y));
    rx.flat_map(|ix| ry.clone().map(move |iy| mask[ix * ny + iy])).collect()
}

/// Evaluation ranges as square side lengths in metres.
pub const SHORT_RANGE_M: f64 = 30.0;
pub const LONG_RANGE_M: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "IoU_short")]
    pub iou_short: f64,
    #[serde(rename = "IoU_long")]
    pub iou_long: f64,
    #[serde(rename = "VPQ")]
    pub vpq: f64,
    #[serde(rename = "VRQ")]
    pub vrq: f64,
    #[serde(rename = "VSQ")]
    pub vsq: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain report") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("eval report", e.to_string()))
    }
}

/// Vehicle occupancy IoU on the short and long crops, video panoptic
/// scores on the long crop. `resolution` is metres per cell.
pub fn evaluate(
    pred: &InstanceVideo,
    gt: &InstanceVideo,
    pred_occ: &[Vec<bool>],
    gt_occ: &[Vec<bool>],
    resolution: f64,
) -> Result<EvalReport> {
    let Some(first) = gt.frames.first() else {
        return Err(Error::invalid("evaluate", "no frames"));
    };
    let (nx, ny) = first.dims();
    let cells = |m: f64| (m / resolution).round() as usize;
    let iou_at = |keep: usize| -> Result<f64> {
        let crop = |v: &[Vec<bool>]| -> Vec<Vec<bool>> { v.iter().map(|m| crop_mask(m, nx, ny, keep, keep)).collect() };
        seg_iou(&crop(pred_occ), &crop(gt_occ))
    };
    let long = cells(LONG_RANGE_M);
    let crop_video = |v: &InstanceVideo| InstanceVideo::from_maps(v.frames.iter().map(|m| crop_ids(m, long, long)).collect());
    let r = vpq(&crop_video(pred)?, &crop_video(gt)?, gt.len() - 1)?;
    Ok(EvalReport {
        iou_short: iou_at(cells(SHORT_RANGE_M))?,
        iou_long: iou_at(long)?,
        vpq: r.vpq,
        vrq: r.vrq,
        vsq: r.vsq,
    })
}

/// Ids present anywhere in the video.
pub fn video_ids(v: &InstanceVideo) -> BTreeSet<u32> {
    v.frames.iter().flat_map(|m| m.unique_ids()).collect()
}
