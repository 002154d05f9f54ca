//! Convolution layers over `H × W × C` maps.

use crate::error::Result;
use crate::params::{Init, ParamStore};
use crate::tensor::{conv2d, deconv2d, Tensor};

/// Square-kernel convolution; `weight` is `C_out × C_in × k × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn init(init: &mut Init, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: init.uniform(&[cout, cin, k, k], cin * k * k),
            bias: init.zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn zero(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    /// `C_in·C_out·k² + C_out`.
    pub fn param_count(cin: usize, cout: usize, k: usize) -> u64 {
        (cin * cout * k * k + cout) as u64
    }

    /// `x[H×W×C_in]` → `C_out × H′ × W′`.
    pub fn apply_chw(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(&x.hwc_to_chw()?, &self.weight, Some(&self.bias), self.stride, self.pad)
    }

    /// `x[H×W×C_in]` → `H′ × W′ × C_out`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_chw(x)?.chw_to_hwc()
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        store.insert(format!("{prefix}.weight"), self.weight.clone());
        store.insert(format!("{prefix}.bias"), self.bias.clone());
    }

    pub fn import(store: &ParamStore, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            weight: store.get_shaped(&format!("{prefix}.weight"), &[cout, cin, k, k])?,
            bias: store.get_shaped(&format!("{prefix}.bias"), &[cout])?,
            stride,
            pad,
        })
    }
}

/// Square-kernel transposed convolution; `weight` is `C_in × C_out × k × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv {
    pub fn init(init: &mut Init, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: init.uniform(&[cin, cout, k, k], cin * k * k / (stride * stride).max(1)),
            bias: init.zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> u64 {
        Conv::param_count(cin, cout, k)
    }

    /// `x[H×W×C_in]` → `H′ × W′ × C_out`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        deconv2d(&x.hwc_to_chw()?, &self.weight, Some(&self.bias), self.stride, self.pad)?.chw_to_hwc()
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        store.insert(format!("{prefix}.weight"), self.weight.clone());
        store.insert(format!("{prefix}.bias"), self.bias.clone());
    }

    pub fn import(store: &ParamStore, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            weight: store.get_shaped(&format!("{prefix}.weight"), &[cin, cout, k, k])?,
            bias: store.get_shaped(&format!("{prefix}.bias"), &[cout])?,
            stride,
            pad,
        })
    }
}
