use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Per-cell instance ids on an `X × Y` grid; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMap {
    x: usize,
    y: usize,
    ids: Vec<u32>,
}

/// Largest id that survives the f32 round trip exactly.
pub const MAX_ID: u32 = 1 << 24;

impl IdMap {
    pub fn new(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            ids: vec![0; x * y],
        }
    }

    pub fn from_vec(x: usize, y: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != x * y {
            return Err(Error::shape("IdMap", format!("{} ids for {x}x{y}", ids.len())));
        }
        Ok(Self { x, y, ids })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.x, self.y)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> u32 {
        self.ids[ix * self.y + iy]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, id: u32) {
        self.ids[ix * self.y + iy] = id;
    }

    /// Sorted non-zero ids.
    pub fn unique_ids(&self) -> Vec<u32> {
        self.ids
            .iter()
            .copied()
            .filter(|&i| i != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Cell count per non-zero id.
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for &i in self.ids.iter().filter(|&&i| i != 0) {
            *out.entry(i).or_insert(0) += 1;
        }
        out
    }

    /// Mean cell coordinate `(ix, iy)` of each non-zero id.
    pub fn centroids(&self) -> BTreeMap<u32, (f64, f64)> {
        let mut acc: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
        for ix in 0..self.x {
            for iy in 0..self.y {
                let id = self.get(ix, iy);
                if id != 0 {
                    let e = acc.entry(id).or_insert((0.0, 0.0, 0));
                    e.0 += ix as f64;
                    e.1 += iy as f64;
                    e.2 += 1;
                }
            }
        }
        acc.into_iter()
            .map(|(id, (sx, sy, n))| (id, (sx / n as f64, sy / n as f64)))
            .collect()
    }

    pub fn relabel(&self, f: impl Fn(u32) -> u32) -> Self {
        Self {
            x: self.x,
            y: self.y,
            ids: self.ids.iter().map(|&i| if i == 0 { 0 } else { f(i) }).collect(),
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != 0).collect()
    }

    /// `X × Y` f32 tensor holding the ids as exact integers.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::with_dtype(
            vec![self.x, self.y],
            self.ids.iter().map(|&i| i as f64).collect(),
            DType::F32,
        )
        .expect("dims match")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [x, y] = t.dims2("IdMap::from_tensor")?;
        let ids = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v <= MAX_ID as f64 && v.fract() == 0.0 {
                    Ok(v as u32)
                } else {
                    Err(Error::format("id map", format!("{v} is not an instance id")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { x, y, ids })
    }
}
