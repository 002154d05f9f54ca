//! Space-time pyramid transformer: a multi-scale windowed encoder over the
//! temporal BEV map and a decoder that turns future queries into future
//! BEV states.

mod swin;

pub use swin::{Attention, SwinBlock, WindowSpec};

use crate::error::{Error, Result};
use crate::heads::Head;
use crate::nn::{Conv, Deconv};
use crate::params::{Init, ParamStore};
use crate::tensor::{avg_pool2, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StptConfig {
    /// Number of pyramid scales `S`, 1 to 4.
    pub depth: usize,
    pub window: (usize, usize),
    pub heads: usize,
    pub channels: usize,
    /// Past frames `T`; the encoder sees `T + 1`.
    pub past: usize,
    /// Future frames `T′`; the decoder emits `T′ + 1`.
    pub future: usize,
    pub shift: bool,
}

impl StptConfig {
    pub fn validate(&self, x: usize, y: usize) -> Result<()> {
        if !(1..=4).contains(&self.depth) {
            return Err(Error::Config(format!("pyramid depth {} outside 1..=4", self.depth)));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!("{} channels do not split into {} heads", self.channels, self.heads)));
        }
        let (wh, ww) = self.window;
        let f = 1 << (self.depth - 1);
        if wh == 0 || ww == 0 || x % (f * wh) != 0 || y % (f * ww) != 0 {
            return Err(Error::Config(format!(
                "{x}x{y} grid not divisible by 2^{} x window {wh}x{ww}",
                self.depth - 1
            )));
        }
        Ok(())
    }

    /// Extents at scale `s`.
    pub fn scale_dims(&self, x: usize, y: usize, s: usize) -> (usize, usize) {
        (x >> s, y >> s)
    }

    fn specs(&self) -> Vec<WindowSpec> {
        let regular = WindowSpec { window: self.window, shift: (0, 0) };
        let mut v = vec![regular];
        if self.shift {
            v.push(WindowSpec {
                window: self.window,
                shift: (self.window.0 / 2, self.window.1 / 2),
            });
        }
        v
    }
}

/// Encoder outputs `B_s[(T+1) × X/2^s × Y/2^s × C]` for `s = 0 … S−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    pub scales: Vec<Tensor>,
}

impl PyramidFeatures {
    pub fn token_count(&self) -> usize {
        self.scales.iter().map(|t| t.len() / t.dims()[3]).sum()
    }
}

/// Post-softmax attention of the first encoder block, one
/// `heads × n × n` tensor per window (`n = (T+1)·w_h·w_w`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub frames: usize,
    pub window: (usize, usize),
    /// Window grid `(rows, cols)`.
    pub windows: (usize, usize),
    pub probs: Vec<Tensor>,
}

impl AttentionCache {
    /// Head-averaged `n × n` attention of window `id` (row-major over the
    /// window grid).
    pub fn matrix(&self, id: usize) -> Result<Tensor> {
        let p = self
            .probs
            .get(id)
            .ok_or_else(|| Error::invalid("window id", format!("{id} of {}", self.probs.len())))?;
        let [heads, n, m] = p.dims3("attention cache")?;
        let mut out = vec![0.0; n * m];
        for h in 0..heads {
            for (o, v) in out.iter_mut().zip(&p.data()[h * n * m..][..n * m]) {
                *o += v / heads as f64;
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Window containing cell `(ix, iy)` and the cell's token index within
    /// it for frame `f`.
    pub fn locate(&self, ix: usize, iy: usize, f: usize) -> (usize, usize) {
        let (wh, ww) = self.window;
        let id = (ix / wh) * self.windows.1 + iy / ww;
        (id, f * wh * ww + (ix % wh) * ww + iy % ww)
    }

    /// Inverse of [`locate`](Self::locate): `(frame, ix, iy)` of a token.
    pub fn token_cell(&self, id: usize, token: usize) -> (usize, usize, usize) {
        let (wh, ww) = self.window;
        let n = wh * ww;
        let (f, s) = (token / n, token % n);
        let (wr, wc) = (id / self.windows.1, id % self.windows.1);
        (f, wr * wh + s / ww, wc * ww + s % ww)
    }

    /// All windows stacked as `windows × heads × n × n`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::stack(&self.probs)
    }
}

/// [`AttentionCache::matrix`] on an optional cache.
pub fn attention_matrix(cache: Option<&AttentionCache>, id: usize) -> Result<Tensor> {
    cache
        .ok_or_else(|| Error::MissingCache("attention caching was disabled for this pass".into()))?
        .matrix(id)
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    resample: Option<Resample>,
    blocks: Vec<SwinBlock>,
}

#[derive(Debug, Clone, PartialEq)]
enum Resample {
    Down(Conv),
    Up(Deconv),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StptOutput {
    /// `(T′+1) × X × Y × C`.
    pub d0: Tensor,
    pub pyramid: PyramidFeatures,
    pub attention: Option<AttentionCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stpt {
    pub config: StptConfig,
    pub x: usize,
    pub y: usize,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    /// Per-future-frame embeddings `E_t` at the coarsest scale.
    pub query_embed: Vec<Tensor>,
}

fn per_frame(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let frames = (0..x.dims()[0]).map(|t| f(&x.slice0(t))).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&frames)
}

impl Stpt {
    pub fn init(init: &mut Init, cfg: StptConfig, x: usize, y: usize) -> Result<Self> {
        cfg.validate(x, y)?;
        let c = cfg.channels;
        let (fe, fd) = (cfg.past + 1, cfg.future + 1);
        let encoder = (0..cfg.depth)
            .map(|s| Stage {
                resample: (s > 0).then(|| Resample::Down(Conv::init(init, c, c, 3, 2, 1))),
                blocks: cfg.specs().into_iter().map(|sp| SwinBlock::init(init, sp, c, cfg.heads, fe, None)).collect(),
            })
            .collect();
        let decoder = (0..cfg.depth)
            .map(|s| Stage {
                resample: (s + 1 < cfg.depth).then(|| Resample::Up(Deconv::init(init, c, c, 2, 2, 0))),
                blocks: cfg
                    .specs()
                    .into_iter()
                    .map(|sp| SwinBlock::init(init, sp, c, cfg.heads, fd, Some(fe)))
                    .collect(),
            })
            .collect();
        let (qx, qy) = cfg.scale_dims(x, y, cfg.depth - 1);
        let query_embed = (0..fd).map(|_| init.uniform(&[qx, qy, c], c)).collect();
        Ok(Self { config: cfg, x, y, encoder, decoder, query_embed })
    }

    /// Closed form: per scale, a stride-2 conv (`9C² + C`, scales ≥ 1) and
    /// self blocks over `T+1` frames in the encoder; a 2×2 deconv
    /// (`4C² + C`, scales < S−1) and cross blocks in the decoder; plus
    /// `(T′+1)·(X/2^(S−1))·(Y/2^(S−1))·C` query embeddings.
    pub fn param_count(cfg: &StptConfig, x: usize, y: usize) -> u64 {
        let c = cfg.channels;
        let (fe, fd) = (cfg.past + 1, cfg.future + 1);
        let blocks = cfg.specs().len() as u64;
        let spec = cfg.specs()[0];
        let s = cfg.depth as u64;
        let enc = (s - 1) * Conv::param_count(c, c, 3) + s * blocks * SwinBlock::param_count(spec, c, fe, None);
        let dec = (s - 1) * Deconv::param_count(c, c, 2) + s * blocks * SwinBlock::param_count(spec, c, fd, Some(fe));
        let (qx, qy) = cfg.scale_dims(x, y, cfg.depth - 1);
        enc + dec + (fd * qx * qy * c) as u64
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        for (part, stages) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (s, st) in stages.iter().enumerate() {
                match &st.resample {
                    Some(Resample::Down(c)) => c.export(&format!("{prefix}.{part}{s}.down"), store),
                    Some(Resample::Up(d)) => d.export(&format!("{prefix}.{part}{s}.up"), store),
                    None => {}
                }
                for (i, b) in st.blocks.iter().enumerate() {
                    b.export(&format!("{prefix}.{part}{s}.block{i}"), store);
                }
            }
        }
        for (t, e) in self.query_embed.iter().enumerate() {
            store.insert(format!("{prefix}.query{t}"), e.clone());
        }
    }

    pub fn import(store: &ParamStore, prefix: &str, cfg: StptConfig, x: usize, y: usize) -> Result<Self> {
        cfg.validate(x, y)?;
        let c = cfg.channels;
        let (fe, fd) = (cfg.past + 1, cfg.future + 1);
        let stage = |part: &str, s: usize, resample: Option<Resample>, kv: Option<usize>, fq: usize| -> Result<Stage> {
            let blocks = cfg
                .specs()
                .into_iter()
                .enumerate()
                .map(|(i, sp)| SwinBlock::import(store, &format!("{prefix}.{part}{s}.block{i}"), sp, c, cfg.heads, fq, kv))
                .collect::<Result<_>>()?;
            Ok(Stage { resample, blocks })
        };
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for s in 0..cfg.depth {
            let down = if s > 0 {
                Some(Resample::Down(Conv::import(store, &format!("{prefix}.enc{s}.down"), c, c, 3, 2, 1)?))
            } else {
                None
            };
            encoder.push(stage("enc", s, down, None, fe)?);
            let up = if s + 1 < cfg.depth {
                Some(Resample::Up(Deconv::import(store, &format!("{prefix}.dec{s}.up"), c, c, 2, 2, 0)?))
            } else {
                None
            };
            decoder.push(stage("dec", s, up, Some(fe), fd)?);
        }
        let (qx, qy) = cfg.scale_dims(x, y, cfg.depth - 1);
        let query_embed = (0..fd)
            .map(|t| store.get_shaped(&format!("{prefix}.query{t}"), &[qx, qy, c]))
            .collect::<Result<_>>()?;
        Ok(Self { config: cfg, x, y, encoder, decoder, query_embed })
    }

    fn check_map(&self, b: &Tensor) -> Result<()> {
        let want = [self.config.past + 1, self.x, self.y, self.config.channels];
        if b.dims() != want {
            return Err(Error::shape("stpt", format!("temporal map {:?}, expected {want:?}", b.dims())));
        }
        Ok(())
    }

    /// `B_s` for every scale; optionally caches the first block's attention.
    pub fn encode_pyramid(&self, b: &Tensor, cache: bool) -> Result<(PyramidFeatures, Option<AttentionCache>)> {
        self.check_map(b)?;
        let mut scales = Vec::with_capacity(self.config.depth);
        let mut attention = None;
        let mut cur = b.clone();
        for (s, stage) in self.encoder.iter().enumerate() {
            if let Some(Resample::Down(conv)) = &stage.resample {
                cur = per_frame(&cur, |f| conv.apply(f))?;
            }
            for (i, blk) in stage.blocks.iter().enumerate() {
                if cache && s == 0 && i == 0 {
                    let mut probs = Vec::new();
                    cur = blk.forward(&cur, None, Some(&mut probs))?;
                    let (wh, ww) = self.config.window;
                    attention = Some(AttentionCache {
                        frames: self.config.past + 1,
                        window: self.config.window,
                        windows: (self.x / wh, self.y / ww),
                        probs,
                    });
                } else {
                    cur = blk.forward(&cur, None, None)?;
                }
            }
            scales.push(cur.clone());
        }
        Ok((PyramidFeatures { scales }, attention))
    }

    /// `Q^(t) = E_t + prior`.
    pub fn make_future_queries(&self, prior: &Tensor) -> Result<Tensor> {
        let want = self.query_embed[0].dims();
        if prior.dims() != want {
            return Err(Error::shape("future queries", format!("prior {:?}, expected {want:?}", prior.dims())));
        }
        let q = self.query_embed.iter().map(|e| e.add(prior)).collect::<Result<Vec<_>>>()?;
        Tensor::stack(&q)
    }

    /// Coarsest layer: future queries cross-attend to `B_{S−1}`; each finer
    /// layer upsamples the previous output and cross-attends to `B_s`.
    pub fn decode_pyramid(&self, pyramid: &PyramidFeatures, queries: &Tensor) -> Result<Tensor> {
        let depth = self.config.depth;
        if pyramid.scales.len() != depth {
            return Err(Error::shape("decode_pyramid", format!("{} scales for depth {depth}", pyramid.scales.len())));
        }
        let mut d = queries.clone();
        for s in (0..depth).rev() {
            if s + 1 < depth {
                let Some(Resample::Up(up)) = &self.decoder[s].resample else {
                    unreachable!("decoder stages below the coarsest upsample")
                };
                d = per_frame(&d, |f| up.apply(f))?;
            }
            for blk in &self.decoder[s].blocks {
                d = blk.forward(&d, Some(&pyramid.scales[s]), None)?;
            }
        }
        Ok(d)
    }

    pub fn forward(&self, b: &Tensor, prior: &Tensor, cache: bool) -> Result<StptOutput> {
        let (pyramid, attention) = self.encode_pyramid(b, cache)?;
        let d0 = self.decode_pyramid(&pyramid, &self.make_future_queries(prior)?)?;
        Ok(StptOutput { d0, pyramid, attention })
    }
}

/// Map-head trunk on the current-frame feature, average-pooled `depth − 1`
/// times down to the coarsest scale.
pub fn map_feature_prior(b_current: &Tensor, hdmap: &Head, depth: usize) -> Result<Tensor> {
    let mut f = hdmap.trunk(b_current)?;
    for _ in 1..depth {
        f = avg_pool2(&f)?;
    }
    Ok(f)
}
