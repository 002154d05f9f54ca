//! Instance decoding: centre peaks, offset voting and flow-based track
//! association turn per-frame head outputs into an instance video.

mod idmap;

pub use idmap::{IdMap, MAX_ID};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::PredictionBundle;
use crate::synthscene::GroundTruth;
use crate::tensor::{load_btf, save_btf, Tensor};

pub const TRACKS_FILE: &str = "tracks.jsonl";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    /// Minimum centre score.
    pub threshold: f64,
    pub max_k: usize,
    /// Association radius in cells.
    pub radius: f64,
    /// Foreground probability a cell must exceed.
    pub seg_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            max_k: 100,
            radius: 3.0,
            seg_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

fn plane(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    match t.dims() {
        [x, y] | [1, x, y] => Ok((*x, *y)),
        d => Err(Error::shape(what, format!("expected X×Y or 1×X×Y, got {d:?}"))),
    }
}

/// Cells equal to the maximum of their 3×3 neighbourhood with score
/// `≥ threshold`, strongest first, at most `max_k`. Of equal neighbouring
/// maxima only the first in raster order survives.
pub fn find_centers(heatmap: &Tensor, threshold: f64, max_k: usize) -> Result<Vec<Center>> {
    let (nx, ny) = plane(heatmap, "find_centers")?;
    let h = heatmap.data();
    let mut out = Vec::new();
    for ix in 0..nx {
        for iy in 0..ny {
            let v = h[ix * ny + iy];
            if !(v >= threshold) {
                continue;
            }
            let mut peak = true;
            for jx in ix.saturating_sub(1)..(ix + 2).min(nx) {
                for jy in iy.saturating_sub(1)..(iy + 2).min(ny) {
                    let u = h[jx * ny + jy];
                    let earlier = (jx, jy) < (ix, iy);
                    if u > v || (u == v && earlier) {
                        peak = false;
                    }
                }
            }
            if peak {
                out.push(Center { row: ix, col: iy, score: v });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.row, a.col).cmp(&(b.row, b.col))));
    out.truncate(max_k);
    Ok(out)
}

/// Vehicle-class probability from `n_cls × X × Y` segmentation logits.
pub fn vehicle_probability(seg_logits: &Tensor) -> Result<Tensor> {
    let [n, nx, ny] = seg_logits.dims3("vehicle_probability")?;
    if n < 2 {
        return Err(Error::shape("vehicle_probability", format!("{n} classes")));
    }
    let d = seg_logits.data();
    let p = nx * ny;
    let probs = (0..p)
        .map(|i| {
            let m = (0..n).map(|c| d[c * p + i]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|c| (d[c * p + i] - m).exp()).sum();
            (d[p + i] - m).exp() / z
        })
        .collect();
    Tensor::new(vec![nx, ny], probs)
}

/// Every cell with foreground probability above `seg_threshold` votes at
/// `cell + offset` and joins the nearest centre; centre `i` becomes id
/// `i + 1`. Ties go to the lower id.
pub fn assign_pixels(fg: &Tensor, offset: &Tensor, centers: &[Center], seg_threshold: f64) -> Result<IdMap> {
    let (nx, ny) = plane(fg, "assign_pixels")?;
    if offset.dims() != [2, nx, ny] {
        return Err(Error::shape("assign_pixels", format!("offset {:?} for {nx}x{ny}", offset.dims())));
    }
    let mut ids = IdMap::new(nx, ny);
    if centers.is_empty() {
        return Ok(ids);
    }
    let (f, o) = (fg.data(), offset.data());
    let p = nx * ny;
    for ix in 0..nx {
        for iy in 0..ny {
            let i = ix * ny + iy;
            if !(f[i] > seg_threshold) {
                continue;
            }
            let (vx, vy) = (ix as f64 + o[i], iy as f64 + o[p + i]);
            let mut best = (f64::INFINITY, 0usize);
            for (k, c) in centers.iter().enumerate() {
                let d = (vx - c.row as f64).powi(2) + (vy - c.col as f64).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            ids.set(ix, iy, best.1 as u32 + 1);
        }
    }
    Ok(ids)
}

/// Per-frame id maps with ids stable across frames, plus the centroid of
/// every id in every frame it occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceVideo {
    pub frames: Vec<IdMap>,
    pub tracks: BTreeMap<u32, BTreeMap<usize, (f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: u32,
    pub frame: usize,
    pub row: f64,
    pub col: f64,
    pub area: usize,
}

impl InstanceVideo {
    /// Builds the track table from the maps.
    pub fn from_maps(frames: Vec<IdMap>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.dims() != first.dims()) {
                return Err(Error::shape("InstanceVideo", "frames differ in extent"));
            }
        }
        let mut tracks: BTreeMap<u32, BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
        for (t, f) in frames.iter().enumerate() {
            for (id, c) in f.centroids() {
                tracks.entry(id).or_default().insert(t, c);
            }
        }
        Ok(Self { frames, tracks })
    }

    pub fn from_ground_truth(gt: &GroundTruth) -> Result<Self> {
        Self::from_maps(gt.frames.iter().map(|f| f.instance.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Applies `f` to every non-zero id; `f` must be injective.
    pub fn relabel(&self, f: impl Fn(u32) -> u32) -> Result<Self> {
        Self::from_maps(self.frames.iter().map(|m| m.relabel(&f)).collect())
    }

    pub fn records(&self) -> Vec<TrackRecord> {
        let areas: Vec<BTreeMap<u32, usize>> = self.frames.iter().map(IdMap::areas).collect();
        let mut out = Vec::new();
        for (&id, per) in &self.tracks {
            for (&frame, &(row, col)) in per {
                out.push(TrackRecord { id, frame, row, col, area: areas[frame][&id] });
            }
        }
        out
    }

    pub fn tracks_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn parse_tracks_jsonl(text: &str) -> Result<Vec<TrackRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("track table", format!("line {}: {e}", i + 1))))
            .collect()
    }

    /// Writes `frame{t}.btf` id maps and the JSON-lines track table.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, m) in self.frames.iter().enumerate() {
            save_btf(&m.to_tensor(), dir.join(format!("frame{t}.btf")))?;
        }
        let p = dir.join(TRACKS_FILE);
        fs::write(&p, self.tracks_jsonl()).map_err(|e| Error::io(&p, e))
    }

    /// Reads a directory written by [`save_dir`](Self::save_dir) and checks
    /// the track table against the maps.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut frames = Vec::new();
        while dir.join(format!("frame{}.btf", frames.len())).exists() {
            let t = load_btf(dir.join(format!("frame{}.btf", frames.len())))?;
            frames.push(IdMap::from_tensor(&t)?);
        }
        if frames.is_empty() {
            return Err(Error::format("instance video", format!("no frame0.btf in {}", dir.display())));
        }
        let video = Self::from_maps(frames)?;
        let p = dir.join(TRACKS_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        if Self::parse_tracks_jsonl(&text)? != video.records() {
            return Err(Error::format("instance video", "track table disagrees with the id maps"));
        }
        Ok(video)
    }
}

/// One decoded frame before association: detected centres and the id map
/// they induce (ids `1..=centers.len()`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInstances {
    pub centers: Vec<Center>,
    pub ids: IdMap,
}

/// Links per-frame instances into tracks: each frame-`t` instance centroid
/// is moved by its mean flow and matched to the nearest frame-`t+1` centre
/// within `radius`, centres taken in score order. Unmatched centres open new
/// tracks; centres that claimed no cells are dropped.
pub fn associate_tracks(frames: &[FrameInstances], flows: &[Tensor], radius: f64) -> Result<InstanceVideo> {
    if frames.is_empty() {
        return Err(Error::invalid("associate_tracks", "no frames"));
    }
    if flows.len() != frames.len() {
        return Err(Error::shape("associate_tracks", format!("{} flows for {} frames", flows.len(), frames.len())));
    }
    let (nx, ny) = frames[0].ids.dims();
    let mut next_id = 1u32;
    let mut out: Vec<IdMap> = Vec::with_capacity(frames.len());
    // (track id, propagated centroid) of the previous frame's instances
    let mut carried: Vec<(u32, (f64, f64))> = Vec::new();
    for (t, fr) in frames.iter().enumerate() {
        if fr.ids.dims() != (nx, ny) || flows[t].dims() != [2, nx, ny] {
            return Err(Error::shape("associate_tracks", format!("frame {t} extent mismatch")));
        }
        let present: BTreeSet<u32> = fr.ids.unique_ids().into_iter().collect();
        let mut taken = vec![false; carried.len()];
        let mut label = BTreeMap::new();
        for (k, c) in fr.centers.iter().enumerate() {
            let local = k as u32 + 1;
            if !present.contains(&local) {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for (j, &(_, (px, py))) in carried.iter().enumerate() {
                let d = ((px - c.row as f64).powi(2) + (py - c.col as f64).powi(2)).sqrt();
                if !taken[j] && d <= radius && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            let id = match best {
                Some((_, j)) => {
                    taken[j] = true;
                    carried[j].0
                }
                None => {
                    next_id += 1;
                    next_id - 1
                }
            };
            label.insert(local, id);
        }
        let map = fr.ids.relabel(|i| label[&i]);
        let flow = flows[t].data();
        let p = nx * ny;
        let mut sums: BTreeMap<u32, (f64, f64, f64, f64, usize)> = BTreeMap::new();
        for ix in 0..nx {
            for iy in 0..ny {
                let id = map.get(ix, iy);
                if id != 0 {
                    let i = ix * ny + iy;
                    let e = sums.entry(id).or_insert((0.0, 0.0, 0.0, 0.0, 0));
                    e.0 += ix as f64;
                    e.1 += iy as f64;
                    e.2 += flow[i];
                    e.3 += flow[p + i];
                    e.4 += 1;
                }
            }
        }
        carried = sums
            .into_iter()
            .map(|(id, (sx, sy, fx, fy, n))| {
                let n = n as f64;
                (id, ((sx + fx) / n, (sy + fy) / n))
            })
            .collect();
        out.push(map);
    }
    InstanceVideo::from_maps(out)
}

/// Full decode of a prediction bundle.
pub fn decode_instances(bundle: &PredictionBundle, cfg: &DecodeConfig) -> Result<InstanceVideo> {
    let frames = (0..bundle.frames())
        .into_par_iter()
        .map(|t| -> Result<FrameInstances> {
            let centers = find_centers(&bundle.center[t], cfg.threshold, cfg.max_k)?;
            let fg = vehicle_probability(&bundle.seg[t])?;
            let ids = assign_pixels(&fg, &bundle.offset[t], &centers, cfg.seg_threshold)?;
            Ok(FrameInstances { centers, ids })
        })
        .collect::<Result<Vec<_>>>()?;
    associate_tracks(&frames, &bundle.flow, cfg.radius)
}

/// Ground-truth rasters dressed as head outputs: one-hot segmentation scaled
/// to logits, the centre heatmap, offsets and flow as given.
pub fn bundle_from_ground_truth(gt: &GroundTruth, logit_scale: f64) -> PredictionBundle {
    let hdmap = gt.hdmap.map(|v| if v > 0.5 { logit_scale } else { -logit_scale });
    PredictionBundle {
        seg: gt.frames.iter().map(|f| f.seg.scale(logit_scale)).collect(),
        center: gt.frames.iter().map(|f| f.center.clone()).collect(),
        offset: gt.frames.iter().map(|f| f.offset.clone()).collect(),
        flow: gt.frames.iter().map(|f| f.flow.clone()).collect(),
        hdmap,
    }
}

/// Whether some bijection of non-zero ids maps `a` onto `b` in every frame.
pub fn equal_up_to_relabeling(a: &InstanceVideo, b: &InstanceVideo) -> bool {
    if a.frames.len() != b.frames.len() {
        return false;
    }
    let mut fwd: BTreeMap<u32, u32> = BTreeMap::new();
    let mut back: BTreeMap<u32, u32> = BTreeMap::new();
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        if fa.dims() != fb.dims() {
            return false;
        }
        for (&x, &y) in fa.ids().iter().zip(fb.ids()) {
            if (x == 0) != (y == 0) {
                return false;
            }
            if x == 0 {
                continue;
            }
            if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGrid;
    use crate::synthscene::{generate_scenario, render_gt, GeneratorConfig, DEFAULT_CENTER_SIGMA};

    fn splat(nx: usize, ny: usize, peaks: &[(f64, f64)], sigma: f64) -> Tensor {
        Tensor::from_fn(&[1, nx, ny], |i| {
            peaks
                .iter()
                .map(|&(r, c)| (-((i[1] as f64 - r).powi(2) + (i[2] as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
                .fold(0.0, f64::max)
        })
    }

    #[test]
    fn single_splat_argmax() {
        let c = find_centers(&splat(12, 10, &[(4.3, 6.8)], 2.0), 0.1, 100).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].row, c[0].col), (4, 7));
    }

    #[test]
    fn separated_splats_and_threshold() {
        let c = find_centers(&splat(16, 16, &[(3.0, 3.0), (3.0, 8.0)], 1.0), 0.1, 100).unwrap();
        assert_eq!(c.len(), 2);
        assert!(find_centers(&Tensor::full(&[8, 8], 0.05), 0.1, 100).unwrap().is_empty());
        let c = find_centers(&splat(16, 16, &[(3.0, 3.0), (10.0, 10.0)], 1.0), 0.1, 1).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn plateau_keeps_one_peak() {
        let mut d = vec![0.0; 25];
        d[2 * 5 + 2] = 0.8;
        d[2 * 5 + 3] = 0.8;
        let c = find_centers(&Tensor::new(vec![5, 5], d).unwrap(), 0.1, 10).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].row, c[0].col), (2, 2));
    }

    #[test]
    fn assignment_basics() {
        let fg = Tensor::full(&[4, 4], 0.9);
        let off = Tensor::zeros(&[2, 4, 4]);
        let one = [Center { row: 1, col: 1, score: 1.0 }];
        assert!(assign_pixels(&fg, &off, &one, 0.5).unwrap().ids().iter().all(|&i| i == 1));
        let empty = assign_pixels(&Tensor::zeros(&[4, 4]), &off, &one, 0.5).unwrap();
        assert!(empty.ids().iter().all(|&i| i == 0));
        let two = [Center { row: 0, col: 0, score: 1.0 }, Center { row: 3, col: 3, score: 0.5 }];
        let m = assign_pixels(&fg, &off, &two, 0.5).unwrap();
        assert_eq!((m.get(0, 1), m.get(3, 2)), (1, 2));
    }

    fn moving_frames(paths: &[Vec<(usize, usize)>], v: &[(f64, f64)]) -> (Vec<FrameInstances>, Vec<Tensor>) {
        let (nx, ny) = (20, 20);
        let mut frames = Vec::new();
        let mut flows = Vec::new();
        for t in 0..paths[0].len() {
            let mut ids = IdMap::new(nx, ny);
            let mut flow = vec![0.0; 2 * nx * ny];
            let mut centers = Vec::new();
            for (k, path) in paths.iter().enumerate() {
                let (r, c) = path[t];
                centers.push(Center { row: r, col: c, score: 1.0 - k as f64 * 0.1 });
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    ids.set(r + dr, c + dc, k as u32 + 1);
                    flow[(r + dr) * ny + c + dc] = v[k].0;
                    flow[nx * ny + (r + dr) * ny + c + dc] = v[k].1;
                }
            }
            frames.push(FrameInstances { centers, ids });
            flows.push(Tensor::new(vec![2, nx, ny], flow).unwrap());
        }
        (frames, flows)
    }

    #[test]
    fn static_instance_keeps_id() {
        let (f, fl) = moving_frames(&[vec![(5, 5); 4]], &[(0.0, 0.0)]);
        let v = associate_tracks(&f, &fl, 3.0).unwrap();
        assert_eq!(v.tracks.len(), 1);
        assert_eq!(v.tracks[&1].len(), 4);
    }

    #[test]
    fn moving_instance_single_track() {
        let path: Vec<_> = (0..5).map(|t| (2 + 2 * t, 4)).collect();
        let (f, fl) = moving_frames(&[path], &[(2.0, 0.0)]);
        let v = associate_tracks(&f, &fl, 3.0).unwrap();
        assert_eq!(v.tracks.len(), 1);
        // without flow the 2-cell steps still fit ρ = 3, but not 4-cell steps
        let fast: Vec<_> = (0..4).map(|t| (1 + 4 * t, 4)).collect();
        let (f, fl) = moving_frames(&[fast.clone()], &[(0.0, 0.0)]);
        assert_eq!(associate_tracks(&f, &fl, 3.0).unwrap().tracks.len(), 4);
        let (f, fl) = moving_frames(&[fast], &[(4.0, 0.0)]);
        assert_eq!(associate_tracks(&f, &fl, 3.0).unwrap().tracks.len(), 1);
    }

    #[test]
    fn crossing_instances_keep_ids() {
        let a: Vec<_> = (0..5).map(|t| (7, 2 + 3 * t)).collect();
        let b: Vec<_> = (0..5).map(|t| (9, 14 - 3 * t)).collect();
        let (f, fl) = moving_frames(&[a, b], &[(0.0, 3.0), (0.0, -3.0)]);
        let v = associate_tracks(&f, &fl, 3.0).unwrap();
        assert_eq!(v.tracks.len(), 2);
        assert!(v.tracks[&1].values().zip(v.tracks[&1].values().skip(1)).all(|(p, q)| q.1 > p.1));
    }

    #[test]
    fn ground_truth_round_trip() {
        let cfg = GeneratorConfig::desk();
        for seed in 0..4 {
            let scn = generate_scenario(seed, &cfg).unwrap();
            let gt = render_gt(&scn, &cfg.grid, DEFAULT_CENTER_SIGMA);
            let want = InstanceVideo::from_ground_truth(&gt).unwrap();
            let got = decode_instances(&bundle_from_ground_truth(&gt, 10.0), &DecodeConfig::default()).unwrap();
            assert!(equal_up_to_relabeling(&got, &want), "seed {seed}");
        }
    }

    #[test]
    fn relabeling_matcher() {
        let mut m = IdMap::new(3, 3);
        m.set(0, 0, 4);
        m.set(2, 2, 9);
        let v = InstanceVideo::from_maps(vec![m.clone(), m]).unwrap();
        assert!(equal_up_to_relabeling(&v, &v.relabel(|i| 20 - i).unwrap()));
        assert!(!equal_up_to_relabeling(&v, &v.relabel(|_| 1).unwrap()));
    }

    #[test]
    fn serialization_round_trip() {
        let grid = BevGrid::new(32, 32, 0.5, vec![0.0]).unwrap();
        let scn = generate_scenario(3, &GeneratorConfig::desk()).unwrap();
        let v = InstanceVideo::from_ground_truth(&render_gt(&scn, &grid, 3.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        v.save_dir(dir.path()).unwrap();
        assert_eq!(InstanceVideo::load_dir(dir.path()).unwrap(), v);
        let text = fs::read_to_string(dir.path().join(TRACKS_FILE)).unwrap();
        assert_eq!(InstanceVideo::parse_tracks_jsonl(&text).unwrap(), v.records());
        fs::write(dir.path().join(TRACKS_FILE), "").unwrap();
        assert!(InstanceVideo::load_dir(dir.path()).is_err());
    }

    #[test]
    fn vehicle_probability_softmax() {
        let logits = Tensor::new(vec![3, 1, 2], vec![0.0, 10.0, 10.0, 0.0, 0.0, 0.0]).unwrap();
        let p = vehicle_probability(&logits).unwrap();
        assert!(p.data()[0] > 0.99 && p.data()[1] < 0.01);
    }
}
