//! Pose-synchronized BEV encoding.
//!
//! Each historical frame is encoded straight into the current-ego BEV frame:
//! BEV cells are projected into the cameras as they were posed at capture
//! time, so no resampling of finished BEV maps is needed.

mod cva;
mod deform;

pub use cva::{
    cross_view_attention, frame_projections, frame_projections_with, mean_world_cosine,
    visible_ground_cells, world_encoding_cosine, Aggregation,
};
pub use deform::{deform_attn, deform_attn_grad, DeformAttnGrad, DeformAttnParams, QueryPlan};

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, ProjectionMatrix};
use crate::params::{Init, ParamStore};
use crate::tensor::{gelu_scalar, layernorm, linear, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Post-residual normalization.
#[derive(Debug, Clone, PartialEq)]
pub enum Norm {
    Identity,
    Layer { gamma: Tensor, beta: Tensor },
}

impl Norm {
    pub fn layer(init: &Init, c: usize) -> Self {
        Norm::Layer {
            gamma: init.ones(&[c]),
            beta: init.zeros(&[c]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Norm::Identity => Ok(x.clone()),
            Norm::Layer { gamma, beta } => layernorm(x, gamma.data(), beta.data(), LN_EPS),
        }
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        if let Norm::Layer { gamma, beta } = self {
            store.insert(format!("{prefix}.gamma"), gamma.clone());
            store.insert(format!("{prefix}.beta"), beta.clone());
        }
    }

    pub fn import(store: &ParamStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Norm::Layer {
            gamma: store.get_shaped(&format!("{prefix}.gamma"), &[c])?,
            beta: store.get_shaped(&format!("{prefix}.beta"), &[c])?,
        })
    }
}

/// `W2·gelu(W1·x + b1) + b2` with hidden width `2C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Ffn {
    pub fn init(init: &mut Init, c: usize) -> Self {
        Self {
            w1: init.uniform(&[2 * c, c], c),
            b1: init.zeros(&[2 * c]),
            w2: init.uniform(&[c, 2 * c], 2 * c),
            b2: init.zeros(&[c]),
        }
    }

    pub fn zero(c: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[2 * c, c]),
            b1: Tensor::zeros(&[2 * c]),
            w2: Tensor::zeros(&[c, 2 * c]),
            b2: Tensor::zeros(&[c]),
        }
    }

    /// `4C² + 3C`.
    pub fn param_count(c: usize) -> u64 {
        let c = c as u64;
        4 * c * c + 3 * c
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = linear(x, &self.w1, Some(&self.b1))?.map(gelu_scalar);
        linear(&hidden, &self.w2, Some(&self.b2))
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        for (n, t) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            store.insert(format!("{prefix}.{n}"), t.clone());
        }
    }

    pub fn import(store: &ParamStore, prefix: &str, c: usize) -> Result<Self> {
        let g = |n: &str, d: &[usize]| store.get_shaped(&format!("{prefix}.{n}"), d);
        Ok(Self {
            w1: g("w1", &[2 * c, c])?,
            b1: g("b1", &[2 * c])?,
            w2: g("w2", &[c, 2 * c])?,
            b2: g("b2", &[c])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: DeformAttnParams,
    pub norm1: Norm,
    pub ffn: Ffn,
    pub norm2: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub x: usize,
    pub y: usize,
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub layers: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("encoder", "needs at least one layer"));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::invalid(
                "encoder",
                format!("C = {} is not divisible by M = {} heads", self.channels, self.heads),
            ));
        }
        Ok(())
    }
}

/// BEV queries, positional embedding and the stacked encoder layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BevEncoder {
    pub config: EncoderConfig,
    /// `X × Y × C`.
    pub queries: Tensor,
    /// `X × Y × C`, added to the layer input before every attention.
    pub pos: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub aggregation: Aggregation,
}

impl BevEncoder {
    pub fn init(cfg: EncoderConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let (c, dims) = (cfg.channels, [cfg.x, cfg.y, cfg.channels]);
        let queries = init.uniform(&dims, c);
        let pos = init.uniform(&dims, c);
        let layers = (0..cfg.layers)
            .map(|_| {
                Ok(EncoderLayer {
                    attn: DeformAttnParams::init(init, c, cfg.heads, cfg.points)?,
                    norm1: Norm::layer(init, c),
                    ffn: Ffn::init(init, c),
                    norm2: Norm::layer(init, c),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg,
            queries,
            pos,
            layers,
            aggregation: Aggregation::Mean,
        })
    }

    /// `2XYC + L·(attention + FFN + 4C)`.
    pub fn param_count(cfg: &EncoderConfig) -> u64 {
        let c = cfg.channels;
        let per_layer = DeformAttnParams::param_count(c, cfg.heads, cfg.points) + Ffn::param_count(c) + 4 * c as u64;
        2 * (cfg.x * cfg.y * c) as u64 + cfg.layers as u64 * per_layer
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        store.insert(format!("{prefix}.queries"), self.queries.clone());
        store.insert(format!("{prefix}.pos"), self.pos.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.layer{i}");
            l.attn.export(&format!("{p}.attn"), store);
            l.norm1.export(&format!("{p}.norm1"), store);
            l.ffn.export(&format!("{p}.ffn"), store);
            l.norm2.export(&format!("{p}.norm2"), store);
        }
    }

    pub fn import(store: &ParamStore, prefix: &str, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let dims = [cfg.x, cfg.y, c];
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Ok(EncoderLayer {
                    attn: DeformAttnParams::import(store, &format!("{p}.attn"), c, cfg.heads, cfg.points)?,
                    norm1: Norm::import(store, &format!("{p}.norm1"), c)?,
                    ffn: Ffn::import(store, &format!("{p}.ffn"), c)?,
                    norm2: Norm::import(store, &format!("{p}.norm2"), c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg,
            queries: store.get_shaped(&format!("{prefix}.queries"), &dims)?,
            pos: store.get_shaped(&format!("{prefix}.pos"), &dims)?,
            layers,
            aggregation: Aggregation::Mean,
        })
    }

    /// Runs every layer: `x' = norm1(CVA(x + pos) + x)`,
    /// `x'' = norm2(x' + FFN(x'))`, starting from the BEV queries.
    pub fn encode_frame(&self, grid: &BevGrid, features: &[Tensor], projections: &[ProjectionMatrix]) -> Result<Tensor> {
        let mut x = self.queries.clone();
        for layer in &self.layers {
            let q = x.add(&self.pos)?;
            let attn = cross_view_attention(&q, grid, features, projections, &layer.attn, self.aggregation)?;
            let x1 = layer.norm1.apply(&attn.add(&x)?)?;
            let x2 = x1.add(&layer.ffn.apply(&x1)?)?;
            x = layer.norm2.apply(&x2)?;
        }
        Ok(x)
    }
}

/// An encoded BEV map tagged with its relative frame (0, −1, …).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub offset: i32,
    pub bev: Tensor,
}

/// `[B^(0), B^(−1), …, B^(−T)]` stacked as `(T+1) × X × Y × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalBevMap {
    pub maps: Tensor,
}

impl TemporalBevMap {
    pub fn frames(&self) -> usize {
        self.maps.dims()[0]
    }

    /// `B^(−t)`.
    pub fn frame(&self, t: usize) -> Tensor {
        self.maps.slice0(t)
    }
}

/// Stacks `past + 1` frames, which must arrive in the order 0, −1, …, −T.
pub fn build_temporal_map(frames: &[EncodedFrame], past: usize) -> Result<TemporalBevMap> {
    if frames.len() != past + 1 {
        return Err(Error::FrameOrder(format!(
            "{} frames for T = {past} (need {})",
            frames.len(),
            past + 1
        )));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.offset != -(i as i32) {
            return Err(Error::FrameOrder(format!(
                "position {i} holds frame {} (expected {})",
                f.offset,
                -(i as i32)
            )));
        }
    }
    let parts: Vec<Tensor> = frames.iter().map(|f| f.bev.clone()).collect();
    Ok(TemporalBevMap {
        maps: Tensor::stack(&parts)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{default_z_anchors, Camera, CameraRig, Intrinsics, Mount, Se2};
    use crate::synthscene::{render_features, Scenario};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig(n: usize, same: bool) -> CameraRig {
        let cameras = (0..n)
            .map(|i| Camera {
                name: format!("c{i}"),
                intrinsics: Intrinsics::from_fov(40, 30, 1.6).unwrap(),
                mount: Mount {
                    yaw: if same { 0.0 } else { std::f64::consts::PI * i as f64 },
                    pitch: 0.5,
                    roll: 0.0,
                    position: [0.2, 0.0, 1.8],
                },
            })
            .collect();
        CameraRig { cameras }
    }

    fn scene(rig: CameraRig) -> Scenario {
        Scenario {
            ego: vec![Se2::new(1.0, -2.0, 0.4), Se2::new(1.5, -1.8, 0.5)],
            boxes: Vec::new(),
            lanes: Vec::new(),
            rig,
            frame_period: 0.5,
            past: 1,
            future: 0,
        }
    }

    fn oracle_sample(f: &Tensor, row: f64, col: f64) -> Vec<f64> {
        let [h, w, c] = [f.dims()[0], f.dims()[1], f.dims()[2]];
        let (r0, c0) = ((row.floor() as usize).min(h - 2), (col.floor() as usize).min(w - 2));
        let (a, b) = (row - r0 as f64, col - c0 as f64);
        (0..c)
            .map(|k| {
                (1.0 - a) * (1.0 - b) * f.at(&[r0, c0, k])
                    + (1.0 - a) * b * f.at(&[r0, c0 + 1, k])
                    + a * (1.0 - b) * f.at(&[r0 + 1, c0, k])
                    + a * b * f.at(&[r0 + 1, c0 + 1, k])
            })
            .collect()
    }

    #[test]
    fn collapsed_cva_matches_brute_force() {
        let scn = scene(rig(2, false));
        let grid = BevGrid::new(12, 10, 0.5, vec![0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[30, 40, 4], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let params = DeformAttnParams::collapsed(4, 2, 2).unwrap();
        let q = Tensor::from_fn(&[12, 10, 4], |_| rng.gen_range(-1.0..1.0));
        let projs = frame_projections(&scn, -1);
        let got = cross_view_attention(&q, &grid, &feats, &projs, &params, Aggregation::Mean).unwrap();
        let mut hits = 0;
        for ix in 0..12 {
            for iy in 0..10 {
                let mut want = vec![0.0; 4];
                for (cam, f) in scn.rig.cameras.iter().zip(&feats) {
                    for &z in &grid.z_anchors {
                        let (mx, my) = grid.cell_center(ix, iy);
                        let (wx, wy) = scn.ego_at(0).apply(mx, my);
                        let (ex, ey) = scn.ego_at(-1).apply_inverse(wx, wy);
                        let pc = cam.cam_from_ego().apply(&Vector3::new(ex, ey, z));
                        if pc.z <= 1e-6 {
                            continue;
                        }
                        let k = &cam.intrinsics;
                        let (u, v) = (k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
                        if u < 0.0 || u > 39.0 || v < 0.0 || v > 29.0 {
                            continue;
                        }
                        hits += 1;
                        for (w, s) in want.iter_mut().zip(oracle_sample(f, v, u)) {
                            *w += s / 2.0;
                        }
                    }
                }
                for k in 0..4 {
                    assert!((got.at(&[ix, iy, k]) - want[k]).abs() <= 1e-9);
                }
            }
        }
        assert!(hits > 50);
    }

    #[test]
    fn duplicated_camera_equals_single_camera() {
        let grid = BevGrid::new(8, 8, 0.5, default_z_anchors()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::from_fn(&[30, 40, 4], |_| rng.gen_range(-1.0..1.0));
        let mut init = Init::new(1);
        let params = DeformAttnParams::init(&mut init, 4, 2, 2).unwrap();
        let q = Tensor::from_fn(&[8, 8, 4], |_| rng.gen_range(-1.0..1.0));
        let one = frame_projections(&scene(rig(1, true)), -1);
        let two = frame_projections(&scene(rig(2, true)), -1);
        let a = cross_view_attention(&q, &grid, &[f.clone()], &one, &params, Aggregation::Mean).unwrap();
        let b = cross_view_attention(&q, &grid, &[f.clone(), f], &two, &params, Aggregation::Mean).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cells_behind_every_camera_are_zero() {
        // single forward camera; cells behind the ego never project
        let grid = BevGrid::new(8, 8, 1.0, vec![0.0]).unwrap();
        let scn = scene(rig(1, true));
        let f = Tensor::full(&[30, 40, 4], 1.0);
        let params = DeformAttnParams::collapsed(4, 1, 1).unwrap();
        let q = Tensor::zeros(&[8, 8, 4]);
        let b = cross_view_attention(&q, &grid, &[f], &frame_projections(&scn, 0), &params, Aggregation::Mean).unwrap();
        for iy in 0..8 {
            assert!((0..4).all(|k| b.at(&[0, iy, k]) == 0.0));
        }
        assert!((0..8).any(|iy| b.at(&[7, iy, 0]) != 0.0));
    }

    #[test]
    fn single_identity_layer_reduces_to_attention() {
        let grid = BevGrid::new(6, 6, 0.5, default_z_anchors()).unwrap();
        let scn = scene(rig(2, false));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[30, 40, 4], |_| rng.gen_range(-1.0..1.0))).collect();
        let params = DeformAttnParams::collapsed(4, 2, 2).unwrap();
        let enc = BevEncoder {
            config: EncoderConfig { x: 6, y: 6, channels: 4, heads: 2, points: 2, layers: 1 },
            queries: Tensor::zeros(&[6, 6, 4]),
            pos: Tensor::from_fn(&[6, 6, 4], |_| rng.gen_range(-1.0..1.0)),
            layers: vec![EncoderLayer {
                attn: params.clone(),
                norm1: Norm::Identity,
                ffn: Ffn::zero(4),
                norm2: Norm::Identity,
            }],
            aggregation: Aggregation::Mean,
        };
        let projs = frame_projections(&scn, -1);
        let got = enc.encode_frame(&grid, &feats, &projs).unwrap();
        let want = cross_view_attention(&enc.pos, &grid, &feats, &projs, &params, Aggregation::Mean).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn encoder_shapes_params_and_determinism() {
        let grid = BevGrid::new(6, 4, 0.5, default_z_anchors()).unwrap();
        let cfg = EncoderConfig { x: 6, y: 4, channels: 12, heads: 4, points: 2, layers: 2 };
        let enc = BevEncoder::init(cfg, &mut Init::new(2)).unwrap();
        let scn = scene(rig(2, false));
        let feats = render_features(&scn, -1, 12).unwrap();
        let fts: Vec<Tensor> = feats.into_iter().map(|f| f.features).collect();
        let projs = frame_projections(&scn, -1);
        let a = enc.encode_frame(&grid, &fts, &projs).unwrap();
        assert_eq!(a.dims(), &[6, 4, 12]);
        assert!(a.all_finite());
        let again = BevEncoder::init(cfg, &mut Init::new(2)).unwrap();
        let b = again.encode_frame(&grid, &fts, &projs).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        crate::tensor::write_btf(&a, &mut ba).unwrap();
        crate::tensor::write_btf(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let mut store = ParamStore::new();
        enc.export("enc", &mut store);
        assert_eq!(store.scalar_count(), BevEncoder::param_count(&cfg));
        assert_eq!(BevEncoder::import(&store, "enc", cfg).unwrap(), enc);
        assert!(BevEncoder::init(EncoderConfig { layers: 0, ..cfg }, &mut Init::new(0)).is_err());
    }

    #[test]
    fn temporal_map_order_is_enforced() {
        let f = |o: i32| EncodedFrame { offset: o, bev: Tensor::full(&[32, 32, 16], o as f64) };
        let m = build_temporal_map(&[f(0), f(-1), f(-2)], 2).unwrap();
        assert_eq!(m.maps.dims(), &[3, 32, 32, 16]);
        assert_eq!(m.frame(2).at(&[0, 0, 0]), -2.0);
        assert!(matches!(build_temporal_map(&[f(0), f(-2), f(-1)], 2), Err(Error::FrameOrder(_))));
        assert!(build_temporal_map(&[f(0), f(-1)], 2).is_err());
        assert_eq!(build_temporal_map(&[f(0)], 0).unwrap().frames(), 1);
    }
}
