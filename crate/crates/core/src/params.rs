//! Named weight tensors, their on-disk manifest, and the seeded initializer.
//!
//! A weights directory holds one BTF file per tensor plus `manifest.txt`
//! with one `name = file.btf` line per tensor, sorted by name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{load_btf, save_btf, DType, Tensor};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Like [`get`](Self::get), also checking the extents.
    pub fn get_shaped(&self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let t = self.get(name)?;
        if t.dims() != dims {
            return Err(Error::shape(
                "ParamStore",
                format!("`{name}` has dims {:?}, expected {dims:?}", t.dims()),
            ));
        }
        Ok(t.clone())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Sum of `len(data)` over all tensors.
    pub fn scalar_count(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    pub fn manifest_text(&self) -> String {
        self.tensors
            .keys()
            .map(|k| format!("{k} = {k}.btf\n"))
            .collect()
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in &self.tensors {
            save_btf(t, dir.join(format!("{name}.btf")))?;
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, self.manifest_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, file) = line.split_once('=').ok_or_else(|| {
                Error::format("manifest", format!("line {}: expected `name = file`", n + 1))
            })?;
            store.insert(name.trim(), load_btf(dir.join(file.trim()))?);
        }
        Ok(store)
    }
}

/// Seeded uniform initializer. Tensors come out as f32.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Uniform in `(−1/√fan_in, 1/√fan_in)`.
    pub fn uniform(&mut self, dims: &[usize], fan_in: usize) -> Tensor {
        let b = 1.0 / (fan_in as f64).sqrt();
        let data = (0..dims.iter().product::<usize>())
            .map(|_| self.rng.gen_range(-b..b))
            .collect();
        Tensor::with_dtype(dims.to_vec(), data, DType::F32).expect("dims match data")
    }

    pub fn zeros(&self, dims: &[usize]) -> Tensor {
        Tensor::zeros(dims).to_dtype(DType::F32)
    }

    pub fn ones(&self, dims: &[usize]) -> Tensor {
        Tensor::full(dims, 1.0).to_dtype(DType::F32)
    }
}
