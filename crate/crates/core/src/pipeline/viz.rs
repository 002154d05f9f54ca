//! Binary PGM/PPM images and the attention visualization.

use crate::error::{Error, Result};
use crate::stpt::AttentionCache;
use crate::tensor::Tensor;

/// 8-bit image with 1 (P5) or 3 (P6) channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Pnm {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3);
        Self { width, height, channels, pixels: vec![0; width * height * channels] }
    }

    pub fn set(&mut self, row: usize, col: usize, px: &[u8]) {
        let i = (row * self.width + col) * self.channels;
        self.pixels[i..i + self.channels].copy_from_slice(px);
    }

    pub fn get(&self, row: usize, col: usize) -> &[u8] {
        let i = (row * self.width + col) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Accepts P5/P6 with maxval 255 and `#` comments in the header.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("PNM", "truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("PNM", "non-ASCII header"))?);
        }
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::format("PNM", format!("unsupported magic `{m}`"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("PNM", format!("`{s}` is not a size")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(Error::format("PNM", format!("maxval {maxval} (expected 255)")));
        }
        // exactly one whitespace byte separates the header from the raster
        let pixels = bytes.get(pos + 1..).unwrap_or(&[]).to_vec();
        if pixels.len() != width * height * channels {
            return Err(Error::format("PNM", format!("{} raster bytes for {width}x{height}x{channels}", pixels.len())));
        }
        Ok(Self { width, height, channels, pixels })
    }
}

/// Min-max normalized grayscale of a 2-D tensor; a constant input maps to
/// mid-gray.
pub fn to_gray(m: &Tensor) -> Result<Pnm> {
    let [h, w] = match m.dims() {
        &[h, w] => [h, w],
        d => return Err(Error::shape("to_gray", format!("{d:?} is not a matrix"))),
    };
    let (lo, hi) = m.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut img = Pnm::new(w, h, 1);
    for (p, &v) in img.pixels.iter_mut().zip(m.data()) {
        *p = if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() as u8 } else { 128 };
    }
    Ok(img)
}

pub const QUERY_COLOR: [u8; 3] = [40, 120, 255];
pub const TOP_COLOR: [u8; 3] = [255, 40, 40];

/// One window's attention rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionViz {
    pub window: usize,
    /// Head-averaged `n × n` probabilities (rows sum to 1).
    pub matrix: Tensor,
    pub query: (usize, usize),
    /// Per frame, the `k` most attended cells `(ix, iy, weight)`, strongest
    /// first.
    pub top: Vec<Vec<(usize, usize, f64)>>,
    pub matrix_image: Pnm,
    pub overlay: Pnm,
}

/// Renders the attention of BEV cell `query` (frame 0) in the first encoder
/// block. Frames are tiled left to right as `B^0, B^-1, …`; each tile shows x
/// (forward) up and y (left) to the left over `background` (`F × X × Y`,
/// min-max gray).
pub fn viz_attn(cache: &AttentionCache, x: usize, y: usize, query: (usize, usize), k: usize, background: Option<&Tensor>) -> Result<AttentionViz> {
    if query.0 >= x || query.1 >= y {
        return Err(Error::invalid("query cell", format!("{query:?} outside {x}x{y}")));
    }
    let (window, qtok) = cache.locate(query.0, query.1, 0);
    let matrix = cache.matrix(window)?;
    let n = matrix.dims()[0];
    let row = &matrix.data()[qtok * n..][..n];
    let mut top = vec![Vec::new(); cache.frames];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    for tok in order {
        let (f, ix, iy) = cache.token_cell(window, tok);
        if top[f].len() < k {
            top[f].push((ix, iy, row[tok]));
        }
    }

    let frames = cache.frames;
    let width = frames * y + frames.saturating_sub(1);
    let mut overlay = Pnm::new(width, x, 3);
    overlay.pixels.fill(255);
    let bg = match background {
        Some(b) => {
            if b.dims() != [frames, x, y] {
                return Err(Error::shape("viz_attn", format!("background {:?} for {frames}x{x}x{y}", b.dims())));
            }
            Some(to_gray(&b.reshape(&[frames * x, y])?)?)
        }
        None => None,
    };
    let place = |f: usize, ix: usize, iy: usize| (x - 1 - ix, f * (y + 1) + (y - 1 - iy));
    for f in 0..frames {
        for ix in 0..x {
            for iy in 0..y {
                let g = bg.as_ref().map_or(0, |g| g.get(f * x + ix, iy)[0]);
                let (r, c) = place(f, ix, iy);
                overlay.set(r, c, &[g, g, g]);
            }
        }
        for &(ix, iy, _) in &top[f] {
            let (r, c) = place(f, ix, iy);
            overlay.set(r, c, &TOP_COLOR);
        }
    }
    let (r, c) = place(0, query.0, query.1);
    overlay.set(r, c, &QUERY_COLOR);
    Ok(AttentionViz { window, matrix_image: to_gray(&matrix)?, matrix, query, top, overlay })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_cache(frames: usize) -> AttentionCache {
        let n = frames * 4;
        AttentionCache {
            frames,
            window: (2, 2),
            windows: (2, 2),
            probs: vec![Tensor::full(&[2, n, n], 1.0 / n as f64); 4],
        }
    }

    #[test]
    fn pnm_round_trip() {
        let mut img = Pnm::new(3, 2, 3);
        img.set(1, 2, &[1, 2, 3]);
        let bytes = img.encode();
        let back = Pnm::decode(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.encode(), bytes);
        let gray = Pnm { width: 2, height: 1, channels: 1, pixels: vec![0, 255] };
        assert_eq!(Pnm::decode(b"P5\n# note\n2 1\n255\n\x00\xff").unwrap(), gray);
        assert!(Pnm::decode(b"P5\n2 1\n255\n\x00").is_err());
        assert!(Pnm::decode(b"P2\n2 1\n255\n").is_err());
    }

    #[test]
    fn gray_extremes() {
        let img = to_gray(&Tensor::new(vec![1, 3], vec![-1.0, 0.0, 3.0]).unwrap()).unwrap();
        assert_eq!(img.pixels, vec![0, 64, 255]);
    }

    #[test]
    fn uniform_attention_is_constant_gray() {
        let c = uniform_cache(2);
        let v = viz_attn(&c, 4, 4, (1, 2), 2, None).unwrap();
        assert_eq!(v.matrix_image.width, 8);
        assert!(v.matrix_image.pixels.iter().all(|&p| p == 128));
        for r in 0..8 {
            let s: f64 = v.matrix.data()[r * 8..][..8].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(v.top.len(), 2);
        assert!(v.top.iter().all(|t| t.len() == 2));
        assert_eq!(v.overlay.width, 9);
        assert_eq!(v.overlay.get(4 - 1 - 1, 4 - 1 - 2), &QUERY_COLOR);
    }

    #[test]
    fn top_cells_follow_weights() {
        let mut c = uniform_cache(2);
        // query (0,0) is token 0 of window 0; make token 5 (frame 1, cell (0,1)) dominant
        let mut p = vec![0.0; 8 * 8];
        for r in 0..8 {
            p[r * 8 + 5] = 1.0;
        }
        c.probs[0] = Tensor::new(vec![1, 8, 8], p).unwrap();
        let v = viz_attn(&c, 4, 4, (0, 0), 1, None).unwrap();
        assert_eq!(v.top[1][0], (0, 1, 1.0));
        assert!(viz_attn(&c, 4, 4, (4, 0), 1, None).is_err());
    }
}
