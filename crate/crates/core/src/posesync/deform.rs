//! Single-query deformable attention and its analytic gradient.
//!
//! For query `q` and reference pixel `p = (row, col)`:
//!
//! ```text
//! Δ[m,k]  = (W_off·q + b_off)[m,k,:]            (row, col) in pixels
//! A[m,:]  = softmax_k (W_w·q + b_w)[m,:]
//! V       = W_v·F + b_v                          per pixel
//! h[m]    = Σ_k A[m,k] · bilinear(V[.., m-th head slice], p + Δ[m,k])
//! out     = W_out·h + b_out
//! ```

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{bilinear_weights, linear, softmax_slice, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DeformAttnParams {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    /// `(M·K·2) × C`
    pub w_offset: Tensor,
    pub b_offset: Tensor,
    /// `(M·K) × C`
    pub w_weight: Tensor,
    pub b_weight: Tensor,
    /// `C × C`
    pub w_value: Tensor,
    pub b_value: Tensor,
    /// `C × C`
    pub w_out: Tensor,
    pub b_out: Tensor,
}

fn check_dims(c: usize, m: usize, k: usize) -> Result<()> {
    if c == 0 || m == 0 || k == 0 {
        return Err(Error::invalid("deformable attention", "C, M and K must be positive"));
    }
    if c % m != 0 {
        return Err(Error::invalid(
            "deformable attention",
            format!("C = {c} is not divisible by M = {m} heads"),
        ));
    }
    Ok(())
}

impl DeformAttnParams {
    /// Random projections, zero offset weights (samples start at the
    /// reference point).
    pub fn init(init: &mut Init, c: usize, m: usize, k: usize) -> Result<Self> {
        check_dims(c, m, k)?;
        Ok(Self {
            channels: c,
            heads: m,
            points: k,
            w_offset: init.zeros(&[m * k * 2, c]),
            b_offset: init.zeros(&[m * k * 2]),
            w_weight: init.uniform(&[m * k, c], c),
            b_weight: init.zeros(&[m * k]),
            w_value: init.uniform(&[c, c], c),
            b_value: init.zeros(&[c]),
            w_out: init.uniform(&[c, c], c),
            b_out: init.zeros(&[c]),
        })
    }

    /// Zero offsets, uniform weights, identity value and output maps: the
    /// output is plain bilinear sampling at the reference point.
    pub fn collapsed(c: usize, m: usize, k: usize) -> Result<Self> {
        check_dims(c, m, k)?;
        Ok(Self {
            channels: c,
            heads: m,
            points: k,
            w_offset: Tensor::zeros(&[m * k * 2, c]),
            b_offset: Tensor::zeros(&[m * k * 2]),
            w_weight: Tensor::zeros(&[m * k, c]),
            b_weight: Tensor::zeros(&[m * k]),
            w_value: Tensor::eye(c),
            b_value: Tensor::zeros(&[c]),
            w_out: Tensor::eye(c),
            b_out: Tensor::zeros(&[c]),
        })
    }

    /// `3·M·K·(C+1) + 2·C·(C+1)`.
    pub fn param_count(c: usize, m: usize, k: usize) -> u64 {
        let (c, mk) = (c as u64, (m * k) as u64);
        3 * mk * (c + 1) + 2 * c * (c + 1)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        for (name, t) in self.named() {
            store.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn import(store: &ParamStore, prefix: &str, c: usize, m: usize, k: usize) -> Result<Self> {
        check_dims(c, m, k)?;
        let g = |n: &str, d: &[usize]| store.get_shaped(&format!("{prefix}.{n}"), d);
        let mk = m * k;
        Ok(Self {
            channels: c,
            heads: m,
            points: k,
            w_offset: g("w_offset", &[mk * 2, c])?,
            b_offset: g("b_offset", &[mk * 2])?,
            w_weight: g("w_weight", &[mk, c])?,
            b_weight: g("b_weight", &[mk])?,
            w_value: g("w_value", &[c, c])?,
            b_value: g("b_value", &[c])?,
            w_out: g("w_out", &[c, c])?,
            b_out: g("b_out", &[c])?,
        })
    }

    fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("w_offset", &self.w_offset),
            ("b_offset", &self.b_offset),
            ("w_weight", &self.w_weight),
            ("b_weight", &self.b_weight),
            ("w_value", &self.w_value),
            ("b_value", &self.b_value),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    /// `V = W_v·F + b_v` for every pixel of `F[H×W×C]`.
    pub fn value_map(&self, features: &Tensor) -> Result<Tensor> {
        linear(features, &self.w_value, Some(&self.b_value))
    }

    /// Sampling offsets and softmaxed weights for one query.
    pub fn plan(&self, q: &[f64]) -> QueryPlan {
        let c = self.channels;
        let mk = self.heads * self.points;
        let affine = |w: &Tensor, b: &Tensor, n: usize| -> Vec<f64> {
            (0..n)
                .map(|o| {
                    let row = &w.data()[o * c..(o + 1) * c];
                    row.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() + b.data()[o]
                })
                .collect()
        };
        let offsets = affine(&self.w_offset, &self.b_offset, mk * 2);
        let mut weights = affine(&self.w_weight, &self.b_weight, mk);
        for head in weights.chunks_mut(self.points) {
            softmax_slice(head);
        }
        QueryPlan { offsets, weights }
    }

    /// Accumulates the head-concatenated vector `h` for one reference point
    /// into `h_out` (length C). Returns whether any sample was in range.
    pub fn sample_heads(&self, values: &Tensor, plan: &QueryPlan, p: (f64, f64), h_out: &mut [f64]) -> bool {
        let [hh, ww, c] = values.dims3("sample_heads").expect("value map is H×W×C");
        let d = self.head_dim();
        let vd = values.data();
        let mut any = false;
        for m in 0..self.heads {
            for k in 0..self.points {
                let idx = m * self.points + k;
                let row = p.0 + plan.offsets[2 * idx];
                let col = p.1 + plan.offsets[2 * idx + 1];
                let Some(bw) = bilinear_weights(hh, ww, row, col) else {
                    continue;
                };
                any = true;
                let a = plan.weights[idx];
                for (&(r, s), &wt) in bw.cells.iter().zip(&bw.weights) {
                    let base = (r * ww + s) * c + m * d;
                    let aw = a * wt;
                    for (o, &v) in h_out[m * d..(m + 1) * d].iter_mut().zip(&vd[base..base + d]) {
                        *o += aw * v;
                    }
                }
            }
        }
        any
    }

    /// `W_out·h + scale·b_out`.
    pub fn project_out(&self, h: &[f64], bias_scale: f64) -> Vec<f64> {
        let c = self.channels;
        (0..c)
            .map(|o| {
                let row = &self.w_out.data()[o * c..(o + 1) * c];
                row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + bias_scale * self.b_out.data()[o]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    /// `(row, col)` per `(head, point)`, flattened.
    pub offsets: Vec<f64>,
    /// Softmax over points, per head.
    pub weights: Vec<f64>,
}

fn check_inputs(q: &[f64], features: &Tensor, params: &DeformAttnParams) -> Result<()> {
    let [_, _, c] = features.dims3("deform_attn")?;
    if c != params.channels || q.len() != params.channels {
        return Err(Error::shape(
            "deform_attn",
            format!("query {} / feature {c} channels, params expect {}", q.len(), params.channels),
        ));
    }
    Ok(())
}

/// Deformable attention of `q` at reference pixel `p = (row, col)` over
/// `features[H×W×C]`. Out-of-range samples contribute zero.
pub fn deform_attn(q: &[f64], p: (f64, f64), features: &Tensor, params: &DeformAttnParams) -> Result<Vec<f64>> {
    check_inputs(q, features, params)?;
    let values = params.value_map(features)?;
    let plan = params.plan(q);
    let mut h = vec![0.0; params.channels];
    params.sample_heads(&values, &plan, p, &mut h);
    Ok(params.project_out(&h, 1.0))
}

/// Gradients of `upstream · deform_attn(...)` with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformAttnGrad {
    pub output: Vec<f64>,
    pub q: Vec<f64>,
    pub reference: [f64; 2],
    pub features: Tensor,
    pub w_offset: Tensor,
    pub b_offset: Tensor,
    pub w_weight: Tensor,
    pub b_weight: Tensor,
    pub w_value: Tensor,
    pub b_value: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    /// Some in-range sample lies within `kink_eps` of a pixel-grid line,
    /// where bilinear sampling is not differentiable.
    pub kink: bool,
}

pub fn deform_attn_grad(
    q: &[f64],
    p: (f64, f64),
    features: &Tensor,
    params: &DeformAttnParams,
    upstream: &[f64],
    kink_eps: f64,
) -> Result<DeformAttnGrad> {
    check_inputs(q, features, params)?;
    let c = params.channels;
    if upstream.len() != c {
        return Err(Error::shape("deform_attn_grad", format!("upstream has {} values", upstream.len())));
    }
    let [hh, ww, _] = features.dims3("deform_attn_grad")?;
    let (m_heads, k_pts, d) = (params.heads, params.points, params.head_dim());
    let values = params.value_map(features)?;
    let vd = values.data();
    let plan = params.plan(q);

    // forward, keeping per-sample head vectors
    let mut samples = vec![0.0; m_heads * k_pts * d];
    let mut weights_at = Vec::with_capacity(m_heads * k_pts);
    let mut kink = false;
    for m in 0..m_heads {
        for k in 0..k_pts {
            let idx = m * k_pts + k;
            let row = p.0 + plan.offsets[2 * idx];
            let col = p.1 + plan.offsets[2 * idx + 1];
            let bw = bilinear_weights(hh, ww, row, col);
            let near_line = |x: f64| (x - x.round()).abs() <= kink_eps;
            let near_domain = row >= -kink_eps
                && row <= (hh - 1) as f64 + kink_eps
                && col >= -kink_eps
                && col <= (ww - 1) as f64 + kink_eps;
            if near_domain && (near_line(row) || near_line(col)) {
                kink = true;
            }
            if let Some(bw) = &bw {
                let s = &mut samples[idx * d..(idx + 1) * d];
                for (&(r, cc), &wt) in bw.cells.iter().zip(&bw.weights) {
                    let base = (r * ww + cc) * c + m * d;
                    for (o, &v) in s.iter_mut().zip(&vd[base..base + d]) {
                        *o += wt * v;
                    }
                }
            }
            weights_at.push(bw);
        }
    }
    let mut h = vec![0.0; c];
    for m in 0..m_heads {
        for k in 0..k_pts {
            let idx = m * k_pts + k;
            let a = plan.weights[idx];
            for j in 0..d {
                h[m * d + j] += a * samples[idx * d + j];
            }
        }
    }
    let output = params.project_out(&h, 1.0);

    // output projection
    let g = upstream;
    let w_out = params.w_out.data();
    let d_w_out: Vec<f64> = (0..c * c).map(|i| g[i / c] * h[i % c]).collect();
    let dh: Vec<f64> = (0..c).map(|j| (0..c).map(|o| w_out[o * c + j] * g[o]).sum()).collect();

    let mut d_logits = vec![0.0; m_heads * k_pts];
    let mut d_offsets = vec![0.0; m_heads * k_pts * 2];
    let mut d_values = vec![0.0; hh * ww * c];
    let mut d_ref = [0.0; 2];
    for m in 0..m_heads {
        let dhm = &dh[m * d..(m + 1) * d];
        let d_a: Vec<f64> = (0..k_pts)
            .map(|k| {
                let idx = m * k_pts + k;
                dhm.iter().zip(&samples[idx * d..(idx + 1) * d]).map(|(a, b)| a * b).sum()
            })
            .collect();
        let a_row = &plan.weights[m * k_pts..(m + 1) * k_pts];
        let dot: f64 = a_row.iter().zip(&d_a).map(|(a, b)| a * b).sum();
        for k in 0..k_pts {
            let idx = m * k_pts + k;
            d_logits[idx] = a_row[k] * (d_a[k] - dot);
            let Some(bw) = &weights_at[idx] else { continue };
            let a = a_row[k];
            let (mut dr, mut dc) = (0.0, 0.0);
            for n in 0..4 {
                let (r, cc) = bw.cells[n];
                let base = (r * ww + cc) * c + m * d;
                let vdot: f64 = dhm.iter().zip(&vd[base..base + d]).map(|(x, y)| x * y).sum();
                dr += bw.d_row[n] * a * vdot;
                dc += bw.d_col[n] * a * vdot;
                for j in 0..d {
                    d_values[base + j] += a * bw.weights[n] * dhm[j];
                }
            }
            d_offsets[2 * idx] = dr;
            d_offsets[2 * idx + 1] = dc;
            d_ref[0] += dr;
            d_ref[1] += dc;
        }
    }

    let outer = |dy: &[f64], rows: usize| -> Vec<f64> {
        (0..rows * c).map(|i| dy[i / c] * q[i % c]).collect()
    };
    let mut dq = vec![0.0; c];
    for (w, dy) in [(&params.w_offset, &d_offsets), (&params.w_weight, &d_logits)] {
        for (o, &g_o) in dy.iter().enumerate() {
            for (j, dqj) in dq.iter_mut().enumerate() {
                *dqj += w.data()[o * c + j] * g_o;
            }
        }
    }

    // value projection: V[pix] = W_v·F[pix] + b_v
    let fd = features.data();
    let w_value = params.w_value.data();
    let mut d_w_value = vec![0.0; c * c];
    let mut d_b_value = vec![0.0; c];
    let mut d_features = vec![0.0; hh * ww * c];
    for pix in 0..hh * ww {
        let dv = &d_values[pix * c..(pix + 1) * c];
        if dv.iter().all(|&v| v == 0.0) {
            continue;
        }
        let f = &fd[pix * c..(pix + 1) * c];
        for o in 0..c {
            d_b_value[o] += dv[o];
            for j in 0..c {
                d_w_value[o * c + j] += dv[o] * f[j];
                d_features[pix * c + j] += w_value[o * c + j] * dv[o];
            }
        }
    }

    let mk = m_heads * k_pts;
    Ok(DeformAttnGrad {
        output,
        q: dq,
        reference: d_ref,
        features: Tensor::new(vec![hh, ww, c], d_features)?,
        w_offset: Tensor::new(vec![mk * 2, c], outer(&d_offsets, mk * 2))?,
        b_offset: Tensor::new(vec![mk * 2], d_offsets)?,
        w_weight: Tensor::new(vec![mk, c], outer(&d_logits, mk))?,
        b_weight: Tensor::new(vec![mk], d_logits)?,
        w_value: Tensor::new(vec![c, c], d_w_value)?,
        b_value: Tensor::new(vec![c], d_b_value)?,
        w_out: Tensor::new(vec![c, c], d_w_out)?,
        b_out: Tensor::new(vec![c], g.to_vec())?,
        kink,
    })
}
