//! Multi-task decoder heads turning each predicted BEV state into
//! segmentation, instance centre, offset, flow and map outputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::params::{Init, ParamStore};
use crate::posesync::Norm;
use crate::tensor::{gelu_scalar, Tensor};

pub use crate::model::{count_params, ModelConfig};

pub const SEG_CLASSES: usize = 3;
pub const HDMAP_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Seg,
    Center,
    Offset,
    Flow,
    Hdmap,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [HeadKind::Seg, HeadKind::Center, HeadKind::Offset, HeadKind::Flow, HeadKind::Hdmap];

    pub fn out_channels(self) -> usize {
        match self {
            HeadKind::Seg => SEG_CLASSES,
            HeadKind::Center => 1,
            HeadKind::Offset | HeadKind::Flow => 2,
            HeadKind::Hdmap => HDMAP_CLASSES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Seg => "seg",
            HeadKind::Center => "center",
            HeadKind::Offset => "offset",
            HeadKind::Flow => "flow",
            HeadKind::Hdmap => "hdmap",
        }
    }
}

/// `conv3×3 → per-cell layernorm → GELU → conv1×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    pub conv1: Conv,
    pub norm: Norm,
    pub conv2: Conv,
}

impl Head {
    pub fn init(init: &mut Init, kind: HeadKind, c: usize) -> Self {
        Self {
            kind,
            conv1: Conv::init(init, c, c, 3, 1, 1),
            norm: Norm::layer(init, c),
            conv2: Conv::init(init, c, kind.out_channels(), 1, 1, 0),
        }
    }

    pub fn zero(kind: HeadKind, c: usize) -> Self {
        Self {
            kind,
            conv1: Conv::zero(c, c, 3, 1, 1),
            norm: Norm::Layer {
                gamma: Tensor::full(&[c], 1.0),
                beta: Tensor::zeros(&[c]),
            },
            conv2: Conv::zero(c, kind.out_channels(), 1, 1, 0),
        }
    }

    /// `9C² + C + 2C + C·n_out + n_out`.
    pub fn param_count(kind: HeadKind, c: usize) -> u64 {
        Conv::param_count(c, c, 3) + 2 * c as u64 + Conv::param_count(c, kind.out_channels(), 1)
    }

    /// Everything but the final projection: `X×Y×C` → `X×Y×C`.
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.apply(&self.conv1.apply(x)?)?.map(gelu_scalar))
    }

    /// `X×Y×C` → `n_out × X × Y`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.conv2.apply_chw(&self.trunk(x)?)?;
        Ok(match self.kind {
            HeadKind::Center => out.map(|v| 1.0 / (1.0 + (-v).exp())),
            _ => out,
        })
    }

    fn export(&self, prefix: &str, store: &mut ParamStore) {
        self.conv1.export(&format!("{prefix}.conv1"), store);
        self.norm.export(&format!("{prefix}.norm"), store);
        self.conv2.export(&format!("{prefix}.conv2"), store);
    }

    fn import(store: &ParamStore, prefix: &str, kind: HeadKind, c: usize) -> Result<Self> {
        Ok(Self {
            kind,
            conv1: Conv::import(store, &format!("{prefix}.conv1"), c, c, 3, 1, 1)?,
            norm: Norm::import(store, &format!("{prefix}.norm"), c)?,
            conv2: Conv::import(store, &format!("{prefix}.conv2"), c, kind.out_channels(), 1, 1, 0)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub channels: usize,
    pub heads: Vec<Head>,
}

impl Heads {
    pub fn init(init: &mut Init, c: usize) -> Self {
        Self {
            channels: c,
            heads: HeadKind::ALL.iter().map(|&k| Head::init(init, k, c)).collect(),
        }
    }

    pub fn zero(c: usize) -> Self {
        Self {
            channels: c,
            heads: HeadKind::ALL.iter().map(|&k| Head::zero(k, c)).collect(),
        }
    }

    pub fn get(&self, kind: HeadKind) -> &Head {
        self.heads.iter().find(|h| h.kind == kind).expect("every head kind present")
    }

    pub fn param_count(c: usize) -> u64 {
        HeadKind::ALL.iter().map(|&k| Head::param_count(k, c)).sum()
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        for h in &self.heads {
            h.export(&format!("{prefix}.{}", h.kind.name()), store);
        }
    }

    pub fn import(store: &ParamStore, prefix: &str, c: usize) -> Result<Self> {
        let heads = HeadKind::ALL
            .iter()
            .map(|&k| Head::import(store, &format!("{prefix}.{}", k.name()), k, c))
            .collect::<Result<_>>()?;
        Ok(Self { channels: c, heads })
    }
}

/// Per-frame outputs for frames `0 ..= T′`; maps are channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    pub seg: Vec<Tensor>,
    pub center: Vec<Tensor>,
    pub offset: Vec<Tensor>,
    pub flow: Vec<Tensor>,
    pub hdmap: Tensor,
}

impl PredictionBundle {
    pub fn frames(&self) -> usize {
        self.seg.len()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, maps) in [("seg", &self.seg), ("center", &self.center), ("offset", &self.offset), ("flow", &self.flow)] {
            for (t, m) in maps.iter().enumerate() {
                s.insert(format!("{name}.t{t}"), m.clone());
            }
        }
        s.insert("hdmap", self.hdmap.clone());
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let frames = (0..).take_while(|t| store.get(&format!("seg.t{t}")).is_ok()).count();
        if frames == 0 {
            return Err(Error::format("prediction bundle", "no seg.t0 entry"));
        }
        let series = |name: &str| -> Result<Vec<Tensor>> {
            (0..frames).map(|t| store.get(&format!("{name}.t{t}")).cloned()).collect()
        };
        Ok(Self {
            seg: series("seg")?,
            center: series("center")?,
            offset: series("offset")?,
            flow: series("flow")?,
            hdmap: store.get("hdmap")?.clone(),
        })
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.to_store().save_dir(dir)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&ParamStore::load_dir(dir)?)
    }
}

/// Applies every head to each frame of `d0[(T′+1)×X×Y×C]`; the map head
/// sees frame 0 only.
pub fn run_heads(d0: &Tensor, heads: &Heads) -> Result<PredictionBundle> {
    let [f, _, _, c] = d0.dims4("run_heads")?;
    if c != heads.channels || f == 0 {
        return Err(Error::shape("run_heads", format!("{f} frames of {c} channels, heads expect {}", heads.channels)));
    }
    let mut b = PredictionBundle {
        seg: Vec::with_capacity(f),
        center: Vec::with_capacity(f),
        offset: Vec::with_capacity(f),
        flow: Vec::with_capacity(f),
        hdmap: heads.get(HeadKind::Hdmap).apply(&d0.slice0(0))?,
    };
    for t in 0..f {
        let frame = d0.slice0(t);
        b.seg.push(heads.get(HeadKind::Seg).apply(&frame)?);
        b.center.push(heads.get(HeadKind::Center).apply(&frame)?);
        b.offset.push(heads.get(HeadKind::Offset).apply(&frame)?);
        b.flow.push(heads.get(HeadKind::Flow).apply(&frame)?);
    }
    Ok(b)
}
