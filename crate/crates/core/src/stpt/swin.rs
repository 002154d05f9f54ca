//! Space-time window attention blocks.
//!
//! A window gathers the `w_h × w_w` cells at one window position from every
//! frame, ordered frame-major, so one attention spans space and time.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::posesync::{Ffn, Norm};
use crate::tensor::{linear, softmax_slice, Tensor};

/// Multi-head attention with biased query/key/value/output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl Attention {
    pub fn init(init: &mut Init, c: usize, heads: usize) -> Self {
        let mut w = || init.uniform(&[c, c], c);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let b = Tensor::zeros(&[c]).to_dtype(crate::DType::F32);
        Self {
            heads,
            wq,
            bq: b.clone(),
            wk,
            bk: b.clone(),
            wv,
            bv: b.clone(),
            wo,
            bo: b,
        }
    }

    /// `4(C² + C)`.
    pub fn param_count(c: usize) -> u64 {
        4 * (c * c + c) as u64
    }

    fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ]
    }

    fn export(&self, prefix: &str, store: &mut ParamStore) {
        for (n, t) in self.named() {
            store.insert(format!("{prefix}.{n}"), t.clone());
        }
    }

    fn import(store: &ParamStore, prefix: &str, c: usize, heads: usize) -> Result<Self> {
        let w = |n: &str| store.get_shaped(&format!("{prefix}.{n}"), &[c, c]);
        let b = |n: &str| store.get_shaped(&format!("{prefix}.{n}"), &[c]);
        Ok(Self {
            heads,
            wq: w("wq")?,
            bq: b("bq")?,
            wk: w("wk")?,
            bk: b("bk")?,
            wv: w("wv")?,
            bv: b("bv")?,
            wo: w("wo")?,
            bo: b("bo")?,
        })
    }

    /// Attends `n` query tokens to `m` key/value tokens (row-major `n×C`,
    /// `m×C`). `allowed(i, j)` masks pairs; every query must keep at least
    /// one key. Writes per-head probabilities (`heads × n × m`) into `probs`
    /// when given.
    pub fn attend(
        &self,
        q_tokens: &Tensor,
        k_tokens: &Tensor,
        v_tokens: &Tensor,
        allowed: Option<&dyn Fn(usize, usize) -> bool>,
        mut probs: Option<&mut Vec<f64>>,
    ) -> Result<Tensor> {
        let q = linear(q_tokens, &self.wq, Some(&self.bq))?;
        let k = linear(k_tokens, &self.wk, Some(&self.bk))?;
        let v = linear(v_tokens, &self.wv, Some(&self.bv))?;
        let (n, m, c) = (q.dims()[0], k.dims()[0], q.dims()[1]);
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut mixed = vec![0.0; n * c];
        if let Some(p) = probs.as_deref_mut() {
            p.clear();
            p.resize(self.heads * n * m, 0.0);
        }
        let mut row = vec![0.0; m];
        for h in 0..self.heads {
            let span = h * d..(h + 1) * d;
            for i in 0..n {
                let qi = &qd[i * c..][span.clone()];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = if allowed.map_or(true, |f| f(i, j)) {
                        let kj = &kd[j * c..][span.clone()];
                        scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_slice(&mut row);
                let out = &mut mixed[i * c..][span.clone()];
                for (j, &a) in row.iter().enumerate() {
                    if a != 0.0 {
                        for (o, &vv) in out.iter_mut().zip(&vd[j * c..][span.clone()]) {
                            *o += a * vv;
                        }
                    }
                }
                if let Some(p) = probs.as_deref_mut() {
                    p[(h * n + i) * m..][..m].copy_from_slice(&row);
                }
            }
        }
        linear(&Tensor::new(vec![n, c], mixed)?, &self.wo, Some(&self.bo))
    }
}

/// Window geometry of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: (usize, usize),
    /// Cyclic shift applied before partitioning; `(0, 0)` for regular blocks.
    pub shift: (usize, usize),
}

impl WindowSpec {
    pub fn tokens(&self) -> usize {
        self.window.0 * self.window.1
    }

    /// Shift actually used on an `h × w` plane: none along an axis the window
    /// already covers.
    pub fn effective_shift(&self, h: usize, w: usize) -> (usize, usize) {
        (
            if h > self.window.0 { self.shift.0 } else { 0 },
            if w > self.window.1 { self.shift.1 } else { 0 },
        )
    }
}

/// Region label of a shifted-plane coordinate along one axis: cells that
/// were not neighbours before the cyclic roll get different labels.
fn region(i: usize, n: usize, win: usize, shift: usize) -> usize {
    if shift == 0 || i < n - win {
        0
    } else if i < n - shift {
        1
    } else {
        2
    }
}

/// Post-norm transformer block over space-time windows. Self-attention when
/// `kv_frames` is `None`; otherwise cross-attention from the query map to a
/// key/value map with its own frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinBlock {
    pub spec: WindowSpec,
    pub q_frames: usize,
    pub kv_frames: Option<usize>,
    /// `(q_frames · w_h · w_w) × C` positional embedding of query tokens.
    pub pos_q: Tensor,
    /// Positional embedding of key tokens for cross blocks.
    pub pos_kv: Option<Tensor>,
    pub attn: Attention,
    pub norm1: Norm,
    pub ffn: Ffn,
    pub norm2: Norm,
}

impl SwinBlock {
    pub fn init(init: &mut Init, spec: WindowSpec, c: usize, heads: usize, q_frames: usize, kv_frames: Option<usize>) -> Self {
        let n = spec.tokens();
        Self {
            spec,
            q_frames,
            kv_frames,
            pos_q: init.uniform(&[q_frames * n, c], c),
            pos_kv: kv_frames.map(|f| init.uniform(&[f * n, c], c)),
            attn: Attention::init(init, c, heads),
            norm1: Norm::layer(init, c),
            ffn: Ffn::init(init, c),
            norm2: Norm::layer(init, c),
        }
    }

    /// Embeddings + attention + two norms + FFN.
    pub fn param_count(spec: WindowSpec, c: usize, q_frames: usize, kv_frames: Option<usize>) -> u64 {
        let n = spec.tokens() as u64;
        let c64 = c as u64;
        (q_frames as u64 + kv_frames.unwrap_or(0) as u64) * n * c64
            + Attention::param_count(c)
            + 4 * c64
            + Ffn::param_count(c)
    }

    pub fn channels(&self) -> usize {
        self.pos_q.dims()[1]
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        store.insert(format!("{prefix}.pos_q"), self.pos_q.clone());
        if let Some(p) = &self.pos_kv {
            store.insert(format!("{prefix}.pos_kv"), p.clone());
        }
        self.attn.export(&format!("{prefix}.attn"), store);
        self.norm1.export(&format!("{prefix}.norm1"), store);
        self.ffn.export(&format!("{prefix}.ffn"), store);
        self.norm2.export(&format!("{prefix}.norm2"), store);
    }

    pub fn import(
        store: &ParamStore,
        prefix: &str,
        spec: WindowSpec,
        c: usize,
        heads: usize,
        q_frames: usize,
        kv_frames: Option<usize>,
    ) -> Result<Self> {
        let n = spec.tokens();
        Ok(Self {
            spec,
            q_frames,
            kv_frames,
            pos_q: store.get_shaped(&format!("{prefix}.pos_q"), &[q_frames * n, c])?,
            pos_kv: kv_frames
                .map(|f| store.get_shaped(&format!("{prefix}.pos_kv"), &[f * n, c]))
                .transpose()?,
            attn: Attention::import(store, &format!("{prefix}.attn"), c, heads)?,
            norm1: Norm::import(store, &format!("{prefix}.norm1"), c)?,
            ffn: Ffn::import(store, &format!("{prefix}.ffn"), c)?,
            norm2: Norm::import(store, &format!("{prefix}.norm2"), c)?,
        })
    }

    /// `x[F_q×h×w×C]` (and `kv[F_kv×h×w×C]` for cross blocks) → same shape
    /// as `x`. When `cache` is given it receives one `heads × n × m`
    /// probability tensor per window, row-major over window positions.
    pub fn forward(&self, x: &Tensor, kv: Option<&Tensor>, cache: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        let [fq, h, w, c] = x.dims4("swin_block")?;
        let (wh, ww) = self.spec.window;
        if fq != self.q_frames || c != self.channels() {
            return Err(Error::shape(
                "swin_block",
                format!("input {fq} frames x {c} channels, block expects {} x {}", self.q_frames, self.channels()),
            ));
        }
        if h % wh != 0 || w % ww != 0 {
            return Err(Error::shape("swin_block", format!("{h}x{w} plane not divisible by window {wh}x{ww}")));
        }
        let kv = match (kv, self.kv_frames) {
            (None, None) => x,
            (Some(kv), Some(f)) => {
                let d = kv.dims();
                if d != [f, h, w, c] {
                    return Err(Error::shape("swin_block", format!("key/value map {d:?}, expected [{f}, {h}, {w}, {c}]")));
                }
                kv
            }
            _ => return Err(Error::invalid("swin_block", "key/value map must be given exactly for cross blocks")),
        };
        let fk = kv.dims()[0];
        let (sh, sw) = self.spec.effective_shift(h, w);
        let n = wh * ww;
        let (nq, nk) = (fq * n, fk * n);
        let pos_kv = self.pos_kv.as_ref().unwrap_or(&self.pos_q);

        // rolled coordinates: plane cell (i, j) reads source ((i+sh)%h, (j+sw)%w)
        let gather = |src: &Tensor, frames: usize, wr: usize, wc: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(frames * n * c);
            for f in 0..frames {
                for a in 0..wh {
                    for b in 0..ww {
                        let (i, j) = ((wr * wh + a + sh) % h, (wc * ww + b + sw) % w);
                        out.extend_from_slice(&src.data()[((f * h + i) * w + j) * c..][..c]);
                    }
                }
            }
            out
        };
        let add = |a: &[f64], b: &Tensor| -> Result<Tensor> {
            Tensor::new(b.dims().to_vec(), a.iter().zip(b.data()).map(|(x, y)| x + y).collect())
        };
        let (nwr, nwc) = (h / wh, w / ww);
        let want_probs = cache.is_some();
        let windows: Vec<(Vec<f64>, Vec<f64>)> = (0..nwr * nwc)
            .into_par_iter()
            .map(|win| -> Result<(Vec<f64>, Vec<f64>)> {
                let (wr, wc) = (win / nwc, win % nwc);
                let xt = gather(x, fq, wr, wc);
                let kt = gather(kv, fk, wr, wc);
                let label = |t: usize| {
                    let s = t % n;
                    let (a, b) = (wr * wh + s / ww, wc * ww + s % ww);
                    region(a, h, wh, sh) * 3 + region(b, w, ww, sw)
                };
                let mask = |i: usize, j: usize| label(i) == label(j);
                let shifted = sh > 0 || sw > 0;
                let allowed: Option<&dyn Fn(usize, usize) -> bool> = if shifted { Some(&mask) } else { None };
                let mut probs = Vec::new();
                let q_in = add(&xt, &self.pos_q)?;
                let k_in = add(&kt, pos_kv)?;
                let v_in = Tensor::new(vec![nk, c], kt)?;
                let out = self.attn.attend(&q_in, &k_in, &v_in, allowed, want_probs.then_some(&mut probs))?;
                debug_assert_eq!(out.dims(), &[nq, c]);
                Ok((out.into_data(), probs))
            })
            .collect::<Result<_>>()?;

        let mut attn_out = vec![0.0; x.len()];
        for (win, (vals, _)) in windows.iter().enumerate() {
            let (wr, wc) = (win / nwc, win % nwc);
            for t in 0..nq {
                let (f, s) = (t / n, t % n);
                let (i, j) = ((wr * wh + s / ww + sh) % h, (wc * ww + s % ww + sw) % w);
                attn_out[((f * h + i) * w + j) * c..][..c].copy_from_slice(&vals[t * c..][..c]);
            }
        }
        if let Some(cache) = cache {
            let heads = self.attn.heads;
            for (_, probs) in windows {
                cache.push(Tensor::new(vec![heads, nq, nk], probs)?);
            }
        }
        let x1 = self.norm1.apply(&x.add(&Tensor::new(x.dims().to_vec(), attn_out)?)?)?;
        self.norm2.apply(&x1.add(&self.ffn.apply(&x1)?)?)
    }
}
