//! Dense row-major tensors and the numeric kernels the rest of the crate is
//! built from.
//!
//! Values are held as `f64` regardless of [`DType`]. An `F32` tensor has every
//! element rounded to single precision at construction, so serializing it as
//! `f32` and reading it back reproduces the in-memory tensor exactly.

mod btf;
mod ops;

pub use btf::{load_btf, read_btf, save_btf, write_btf, BTF_MAGIC};
pub use ops::{
    avg_pool2, bilinear_sample, bilinear_weights, conv2d, deconv2d, gelu, gelu_scalar, layernorm,
    linear, matmul, softmax, softmax_slice, BilinearWeights, Sample,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    /// Builds an `f64` tensor, checking `product(dims) == data.len()`.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(dims, data, DType::F64)
    }

    pub fn with_dtype(dims: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidTensor("rank must be at least 1".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidTensor(format!("zero extent in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        if dtype == DType::F32 {
            for v in &mut data {
                *v = dtype.round(*v);
            }
        }
        Ok(Self { dims, data, dtype })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![0.0; n]).expect("zeros: invalid dims")
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; n]).expect("full: invalid dims")
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = dims.iter().product();
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..dims.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < dims[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self::new(dims.to_vec(), data).expect("from_fn: invalid dims")
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Returns a copy converted to `dtype` (rounding when narrowing to `f32`).
    pub fn to_dtype(&self, dtype: DType) -> Self {
        Self::with_dtype(self.dims.clone(), self.data.clone(), dtype).expect("valid tensor")
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::with_dtype(dims.to_vec(), self.data.clone(), self.dtype)
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for axis in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.dims[axis + 1];
        }
        strides
    }

    /// Flat offset of a multi-index. Panics when out of range.
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len(), "index rank");
        let mut off = 0;
        for (i, (&k, &d)) in idx.iter().zip(&self.dims).enumerate() {
            assert!(k < d, "index {k} out of range on axis {i} (extent {d})");
            off = off * d + k;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::with_dtype(self.dims.clone(), data, DType::F64).expect("same shape")
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::with_dtype(self.dims.clone(), data, DType::F64)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn slice0(&self, index: usize) -> Tensor {
        assert!(index < self.dims[0], "slice0 out of range");
        let inner: usize = self.dims[1..].iter().product();
        let dims = if self.dims.len() == 1 {
            vec![1]
        } else {
            self.dims[1..].to_vec()
        };
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Tensor::with_dtype(dims, data, self.dtype).expect("valid slice")
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.dims != first.dims {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", p.dims, first.dims),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::with_dtype(dims, data, first.dtype)
    }

    /// Permutes `H×W×C` into `C×H×W`.
    pub fn hwc_to_chw(&self) -> Result<Tensor> {
        let [h, w, c] = self.dims3("hwc_to_chw")?;
        let mut out = vec![0.0; self.len()];
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out[(k * h + i) * w + j] = self.data[(i * w + j) * c + k];
                }
            }
        }
        Tensor::with_dtype(vec![c, h, w], out, self.dtype)
    }

    /// Permutes `C×H×W` into `H×W×C`.
    pub fn chw_to_hwc(&self) -> Result<Tensor> {
        let [c, h, w] = self.dims3("chw_to_hwc")?;
        let mut out = vec![0.0; self.len()];
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(i * w + j) * c + k] = self.data[(k * h + i) * w + j];
                }
            }
        }
        Tensor::with_dtype(vec![h, w, c], out, self.dtype)
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<[usize; 3]> {
        match self.dims.as_slice() {
            &[a, b, c] => Ok([a, b, c]),
            d => Err(Error::shape(op, format!("expected rank 3, got {d:?}"))),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.dims.as_slice() {
            &[a, b] => Ok([a, b]),
            d => Err(Error::shape(op, format!("expected rank 2, got {d:?}"))),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.dims.as_slice() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            d => Err(Error::shape(op, format!("expected rank 4, got {d:?}"))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn f32_tensors_round_on_construction() {
        let t = Tensor::with_dtype(vec![1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn from_fn_is_row_major() {
        let t = Tensor::from_fn(&[2, 3], |i| (i[0] * 10 + i[1]) as f64);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.at(&[1, 2]), 12.0);
        assert_eq!(t.strides(), vec![3, 1]);
    }

    #[test]
    fn layout_permutations_invert() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let chw = t.hwc_to_chw().unwrap();
        assert_eq!(chw.dims(), &[5, 3, 4]);
        assert_eq!(chw.at(&[2, 1, 3]), t.at(&[1, 3, 2]));
        assert_eq!(chw.chw_to_hwc().unwrap(), t);
    }

    #[test]
    fn stack_and_slice() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.dims(), &[2, 2, 2]);
        assert_eq!(s.slice0(0), a);
        assert!(Tensor::stack(&[a, Tensor::zeros(&[3])]).is_err());
    }
}
