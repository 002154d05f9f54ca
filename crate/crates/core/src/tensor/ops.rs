use crate::error::{Error, Result};

use super::Tensor;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {m}x{k} · {k2}x{n}"),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, n: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::shape(op, format!("bias has {} values, need {n}", b.len())));
        }
    }
    Ok(())
}

/// Cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×kh×kw]`.
///
/// Output extents are `floor((H + 2·pad − kh)/stride) + 1`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [cin, h, wd] = x.dims3("conv2d")?;
    let [cout, cin2, kh, kw] = w.dims4("conv2d")?;
    if cin != cin2 {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {cin2}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("stride", "must be positive"));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
        ));
    }
    check_bias("conv2d", bias, cout)?;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let b = bias.map_or(0.0, |b| b.data()[o]);
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for c in 0..cin {
                    for di in 0..kh {
                        let r = (i * stride + di) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let col = (j * stride + dj) as isize - pad as isize;
                            if col < 0 || col >= wd as isize {
                                continue;
                            }
                            acc += xd[(c * h + r as usize) * wd + col as usize]
                                * wdat[((o * cin + c) * kh + di) * kw + dj];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc + b;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// Transposed convolution of `x[C_in×H×W]` with `w[C_in×C_out×kh×kw]`.
///
/// Output extents are `(H − 1)·stride − 2·pad + kh`.
pub fn deconv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [cin, h, wd] = x.dims3("deconv2d")?;
    let [cin2, cout, kh, kw] = w.dims4("deconv2d")?;
    if cin != cin2 {
        return Err(Error::shape(
            "deconv2d",
            format!("input has {cin} channels, kernel expects {cin2}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("stride", "must be positive"));
    }
    let full_h = (h - 1) * stride + kh;
    let full_w = (wd - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::shape("deconv2d", "padding removes the whole output"));
    }
    check_bias("deconv2d", bias, cout)?;
    let oh = full_h - 2 * pad;
    let ow = full_w - 2 * pad;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; cout * oh * ow];
    for c in 0..cin {
        for i in 0..h {
            for j in 0..wd {
                let xv = xd[(c * h + i) * wd + j];
                for o in 0..cout {
                    for di in 0..kh {
                        let r = (i * stride + di) as isize - pad as isize;
                        if r < 0 || r >= oh as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let col = (j * stride + dj) as isize - pad as isize;
                            if col < 0 || col >= ow as isize {
                                continue;
                            }
                            out[(o * oh + r as usize) * ow + col as usize] +=
                                xv * wdat[((c * cout + o) * kh + di) * kw + dj];
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for o in 0..cout {
            for v in &mut out[o * oh * ow..(o + 1) * oh * ow] {
                *v += b.data()[o];
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// Normalizes over the last axis, then applies `gamma`/`beta`.
pub fn layernorm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let n = *x.dims().last().expect("rank >= 1");
    if gamma.len() != n || beta.len() != n {
        return Err(Error::shape(
            "layernorm",
            format!("affine params of length {}/{} for axis {n}", gamma.len(), beta.len()),
        ));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        layernorm_row(row, gamma, beta, eps);
    }
    Tensor::with_dtype(x.dims().to_vec(), out, x.dtype())
}

pub(crate) fn layernorm_row(row: &mut [f64], gamma: &[f64], beta: &[f64], eps: f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (k, v) in row.iter_mut().enumerate() {
        *v = (*v - mean) * inv * gamma[k] + beta[k];
    }
}

/// In-place numerically stable softmax.
pub fn softmax_slice(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    let dims = x.dims();
    let n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for k in 0..n {
                buf[k] = out[base + k * inner];
            }
            softmax_slice(&mut buf);
            for k in 0..n {
                out[base + k * inner] = buf[k];
            }
        }
    }
    Tensor::with_dtype(dims.to_vec(), out, x.dtype())
}

/// Applies `W[out×in]` (and bias) to the last axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let [nout, nin] = w.dims2("linear")?;
    let last = *x.dims().last().expect("rank >= 1");
    if last != nin {
        return Err(Error::shape(
            "linear",
            format!("input width {last}, weight expects {nin}"),
        ));
    }
    check_bias("linear", bias, nout)?;
    let rows = x.len() / nin;
    let mut out = vec![0.0; rows * nout];
    for r in 0..rows {
        let xin = &x.data()[r * nin..(r + 1) * nin];
        for o in 0..nout {
            let wr = &w.data()[o * nin..(o + 1) * nin];
            let dot: f64 = xin.iter().zip(wr).map(|(a, b)| a * b).sum();
            out[r * nout + o] = dot + bias.map_or(0.0, |b| b.data()[o]);
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = nout;
    Tensor::new(dims, out)
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// 2×2 stride-2 average pooling on `H×W×C`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2", format!("odd extents {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            for k in 0..c {
                let at = |r: usize, s: usize| d[(r * w + s) * c + k];
                out[(i * ow + j) * c + k] = 0.25
                    * (at(2 * i, 2 * j)
                        + at(2 * i, 2 * j + 1)
                        + at(2 * i + 1, 2 * j)
                        + at(2 * i + 1, 2 * j + 1));
            }
        }
    }
    Tensor::with_dtype(vec![oh, ow, c], out, x.dtype())
}

/// The four neighbours of a continuous `(row, col)` position and their
/// interpolation weights, ordered `(r0,c0) (r0,c1) (r1,c0) (r1,c1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearWeights {
    pub cells: [(usize, usize); 4],
    pub weights: [f64; 4],
    /// Derivatives of `weights` with respect to the row coordinate.
    pub d_row: [f64; 4],
    /// Derivatives of `weights` with respect to the column coordinate.
    pub d_col: [f64; 4],
}

/// Neighbour weights for sampling an `h×w` grid, or `None` when the point is
/// outside `[0, h−1] × [0, w−1]` (or not finite).
pub fn bilinear_weights(h: usize, w: usize, row: f64, col: f64) -> Option<BilinearWeights> {
    if !(row >= 0.0 && row <= (h - 1) as f64 && col >= 0.0 && col <= (w - 1) as f64) {
        return None;
    }
    let (r0, r1) = lower_upper(row, h);
    let (c0, c1) = lower_upper(col, w);
    let fr = row - r0 as f64;
    let fc = col - c0 as f64;
    Some(BilinearWeights {
        cells: [(r0, c0), (r0, c1), (r1, c0), (r1, c1)],
        weights: [
            (1.0 - fr) * (1.0 - fc),
            (1.0 - fr) * fc,
            fr * (1.0 - fc),
            fr * fc,
        ],
        d_row: [-(1.0 - fc), -fc, 1.0 - fc, fc],
        d_col: [-(1.0 - fr), 1.0 - fr, -fr, fr],
    })
}

fn lower_upper(x: f64, n: usize) -> (usize, usize) {
    if n == 1 {
        return (0, 0);
    }
    let lo = (x.floor() as usize).min(n - 2);
    (lo, lo + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    pub in_range: bool,
}

/// Bilinear interpolation of `F[H×W×C]` at continuous `(row, col)`.
///
/// Positions outside `[0, H−1] × [0, W−1]` yield zeros with
/// `in_range == false`.
pub fn bilinear_sample(f: &Tensor, row: f64, col: f64) -> Sample {
    let [h, w, c] = f.dims3("bilinear_sample").expect("bilinear_sample needs H×W×C");
    let mut values = vec![0.0; c];
    let Some(bw) = bilinear_weights(h, w, row, col) else {
        return Sample {
            values,
            in_range: false,
        };
    };
    accumulate(f.data(), w, c, &bw, &mut values);
    Sample {
        values,
        in_range: true,
    }
}

#[inline]
pub(crate) fn accumulate(data: &[f64], w: usize, c: usize, bw: &BilinearWeights, out: &mut [f64]) {
    for (&(r, s), &wt) in bw.cells.iter().zip(&bw.weights) {
        let base = (r * w + s) * c;
        for (o, &v) in out.iter_mut().zip(&data[base..base + c]) {
            *o += wt * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let a = Tensor::new(vec![3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        assert!(matmul(&a, &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn matmul_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[7, 5]);
        let b = random(&mut rng, &[5, 3]);
        let got = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..5 {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((got.at(&[i, j]) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[3, 5, 4]);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_counts_overlap() {
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.dims(), &[1, 4, 4]);
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
        assert!(conv2d(&x, &w, None, 1, 2).is_ok());
    }

    #[test]
    fn stride_two_round_trip_extents() {
        let x = Tensor::zeros(&[2, 32, 32]);
        let down = conv2d(&x, &Tensor::zeros(&[2, 2, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(down.dims(), &[2, 16, 16]);
        let up = deconv2d(&down, &Tensor::zeros(&[2, 2, 2, 2]), None, 2, 0).unwrap();
        assert_eq!(up.dims(), &[2, 32, 32]);
    }

    #[test]
    fn deconv_scatters_kernel() {
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = deconv2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 2.0, 2.0, 4.0, 3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn softmax_uniform_and_oracle() {
        let s = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[4, 6]);
        let y = softmax(&x, 1).unwrap();
        for i in 0..4 {
            let denom: f64 = (0..6).map(|j| x.at(&[i, j]).exp()).sum();
            for j in 0..6 {
                let want = x.at(&[i, j]).exp() / denom;
                assert!((y.at(&[i, j]) - want).abs() < 1e-14);
                for k in 0..6 {
                    if x.at(&[i, j]) < x.at(&[i, k]) {
                        assert!(y.at(&[i, j]) < y.at(&[i, k]));
                    }
                }
            }
        }
        let y0 = softmax(&x, 0).unwrap();
        for j in 0..6 {
            let s: f64 = (0..4).map(|i| y0.at(&[i, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layernorm_constant_is_zero() {
        let x = Tensor::full(&[2, 5], 3.0);
        let y = layernorm(&x, &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[3, 8]);
        let y = layernorm(&x, &[1.0; 8], &[0.0; 8], 0.0).unwrap();
        for r in y.data().chunks(8) {
            let m = r.iter().sum::<f64>() / 8.0;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_and_gelu() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.0, 0.0, 0.5]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[1.0, 2.0, 3.5]);
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_halves() {
        let x = Tensor::from_fn(&[2, 2, 1], |i| (i[0] * 2 + i[1]) as f64);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[1.5]);
        assert!(avg_pool2(&Tensor::zeros(&[3, 2, 1])).is_err());
    }

    #[test]
    fn bilinear_grid_points_and_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random(&mut rng, &[5, 5, 3]);
        let s = bilinear_sample(&f, 2.0, 3.0);
        assert!(s.in_range);
        assert_eq!(s.values, (0..3).map(|k| f.at(&[2, 3, k])).collect::<Vec<_>>());
        let s = bilinear_sample(&f, 4.0, 4.0);
        assert_eq!(s.values, (0..3).map(|k| f.at(&[4, 4, k])).collect::<Vec<_>>());
        let s = bilinear_sample(&f, 1.0, 1.5);
        for k in 0..3 {
            let want = 0.5 * (f.at(&[1, 1, k]) + f.at(&[1, 2, k]));
            assert!((s.values[k] - want).abs() < 1e-15);
        }
        let out = bilinear_sample(&f, -0.01, 2.0);
        assert!(!out.in_range && out.values.iter().all(|&v| v == 0.0));
        assert!(!bilinear_sample(&f, f64::NAN, 0.0).in_range);
    }

    #[test]
    fn bilinear_matches_neighbour_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random(&mut rng, &[5, 5, 3]);
        for _ in 0..50 {
            let (r, c): (f64, f64) = (rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0));
            let (r0, c0) = (r.floor(), c.floor());
            let (a, b) = (r - r0, c - c0);
            let (r0, c0) = (r0 as usize, c0 as usize);
            let got = bilinear_sample(&f, r, c);
            for k in 0..3 {
                let want = (1.0 - a) * (1.0 - b) * f.at(&[r0, c0, k])
                    + (1.0 - a) * b * f.at(&[r0, c0 + 1, k])
                    + a * (1.0 - b) * f.at(&[r0 + 1, c0, k])
                    + a * b * f.at(&[r0 + 1, c0 + 1, k]);
                assert!((got.values[k] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ops_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random(&mut rng, &[2, 6, 6]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let a = conv2d(&x, &w, None, 2, 1).unwrap();
        let b = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    proptest! {
        #[test]
        fn conv_shape_law(h in 1usize..12, w in 1usize..12, k in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
            let x = Tensor::zeros(&[1, h, w]);
            let kern = Tensor::zeros(&[2, 1, k, k]);
            let res = conv2d(&x, &kern, None, stride, pad);
            if k > h + 2 * pad || k > w + 2 * pad {
                prop_assert!(res.is_err());
            } else {
                let y = res.unwrap();
                prop_assert_eq!(y.dims(), &[2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
            }
        }

        #[test]
        fn deconv_shape_law(h in 1usize..10, w in 1usize..10, k in 1usize..4, stride in 1usize..3) {
            let x = Tensor::zeros(&[1, h, w]);
            let y = deconv2d(&x, &Tensor::zeros(&[1, 3, k, k]), None, stride, 0).unwrap();
            prop_assert_eq!(y.dims(), &[3, (h - 1) * stride + k, (w - 1) * stride + k]);
        }

        #[test]
        fn bilinear_is_lipschitz(seed in 0u64..500, r in 0.0f64..3.9, c in 0.0f64..3.9, dr in -0.05f64..0.05, dc in -0.05f64..0.05) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random(&mut rng, &[5, 5, 2]);
            let mut lip: f64 = 0.0;
            for i in 0..5 { for j in 0..5 { for k in 0..2 {
                if i + 1 < 5 { lip = lip.max((f.at(&[i + 1, j, k]) - f.at(&[i, j, k])).abs()); }
                if j + 1 < 5 { lip = lip.max((f.at(&[i, j + 1, k]) - f.at(&[i, j, k])).abs()); }
            }}}
            let (r2, c2) = ((r + dr).clamp(0.0, 4.0), (c + dc).clamp(0.0, 4.0));
            let delta = (r2 - r).abs().max((c2 - c).abs());
            let a = bilinear_sample(&f, r, c);
            let b = bilinear_sample(&f, r2, c2);
            for k in 0..2 {
                prop_assert!((a.values[k] - b.values[k]).abs() <= 2.0 * lip * delta + 1e-12);
            }
        }
    }
}
