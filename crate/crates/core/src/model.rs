//! The full network: BEV encoder, space-time pyramid and task heads.

use crate::error::{Error, Result};
use crate::heads::Heads;
use crate::params::{Init, ParamStore};
use crate::posesync::{BevEncoder, EncoderConfig};
use crate::stpt::{Stpt, StptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub stpt: StptConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.stpt.validate(self.encoder.x, self.encoder.y)?;
        if self.encoder.channels != self.stpt.channels {
            return Err(Error::Config(format!(
                "encoder width {} differs from pyramid width {}",
                self.encoder.channels, self.stpt.channels
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.encoder.channels
    }
}

/// Exact learnable-scalar count of [`Model`]: encoder + pyramid + heads.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let (x, y) = (cfg.encoder.x, cfg.encoder.y);
    BevEncoder::param_count(&cfg.encoder) + Stpt::param_count(&cfg.stpt, x, y) + Heads::param_count(cfg.channels())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: BevEncoder,
    pub stpt: Stpt,
    pub heads: Heads,
}

impl Model {
    /// Each component draws from its own stream, so changing the pyramid
    /// leaves encoder and head weights untouched.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = BevEncoder::init(cfg.encoder, &mut Init::stream(seed, 0))?;
        let stpt = Stpt::init(&mut Init::stream(seed, 1), cfg.stpt, cfg.encoder.x, cfg.encoder.y)?;
        let heads = Heads::init(&mut Init::stream(seed, 2), cfg.channels());
        Ok(Self { config: cfg, encoder, stpt, heads })
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        self.encoder.export("enc", &mut store);
        self.stpt.export("stpt", &mut store);
        self.heads.export("heads", &mut store);
        store
    }

    pub fn from_store(store: &ParamStore, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg,
            encoder: BevEncoder::import(store, "enc", cfg.encoder)?,
            stpt: Stpt::import(store, "stpt", cfg.stpt, cfg.encoder.x, cfg.encoder.y)?,
            heads: Heads::import(store, "heads", cfg.channels())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(x: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { x, y: x, channels: 8, heads: 2, points: 2, layers: 1 },
            stpt: StptConfig { depth: 2, window: (4, 4), heads: 2, channels: 8, past: 1, future: 2, shift: true },
        }
    }

    #[test]
    fn count_matches_store() {
        let m = Model::init(cfg(16), 1).unwrap();
        let store = m.to_store();
        assert_eq!(store.scalar_count(), count_params(&cfg(16)));
        assert_eq!(Model::from_store(&store, cfg(16)).unwrap(), m);
    }

    #[test]
    fn depth_change_keeps_encoder_and_heads() {
        let mut c = cfg(16);
        let a = Model::init(c, 4).unwrap();
        c.stpt.depth = 1;
        let b = Model::init(c, 4).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.heads, b.heads);
    }

    #[test]
    fn width_mismatch() {
        let mut c = cfg(16);
        c.stpt.channels = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
