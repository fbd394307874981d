//! Progressively grown generator and discriminator stacks.

mod checkpoint;
mod discriminator;
mod generator;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use discriminator::Discriminator;
pub use generator::{Context, ContextBlock, GenStage, Generator, GeneratorInput};

use std::collections::BTreeMap;

use psagan_tensor::SeededRng;

use crate::error::{Error, Result};
use crate::nn::{self, Module};

/// Architecture hyperparameters shared by both stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Full window length τ = 2^(L+3).
    pub target_length: usize,
    pub n_series: usize,
    pub nf: usize,
    pub time_features: usize,
    pub embedding_dim: usize,
    pub self_attention: bool,
    /// History length fed to context blocks; 0 disables them.
    pub context_length: usize,
}

impl ModelConfig {
    pub fn new(target_length: usize, n_series: usize) -> Result<Self> {
        let cfg = ModelConfig {
            target_length,
            n_series,
            nf: 32,
            time_features: crate::data::TIME_FEATURES,
            embedding_dim: 10,
            self_attention: true,
            context_length: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.target_length;
        if !t.is_power_of_two() || !(16..=256).contains(&t) {
            return Err(Error::Config(format!(
                "target_length must be a power of two in [16, 256], got {t}"
            )));
        }
        if self.n_series == 0 || self.nf == 0 || self.time_features == 0 || self.embedding_dim == 0
        {
            return Err(Error::Config(
                "n_series, nf, time_features and embedding_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of growth stages L.
    pub fn levels(&self) -> usize {
        self.target_length.trailing_zeros() as usize - 3
    }

    /// Sample length emitted (generator) and accepted (discriminator) at
    /// growth stage `s`.
    pub fn stage_length(&self, stage: usize) -> usize {
        1 << (stage + 3)
    }

    /// Working resolution of generator block `i` (1-based).
    pub fn block_length(&self, block: usize) -> usize {
        1 << (block + 2)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("target_length".into(), self.target_length.to_string()),
            ("n_series".into(), self.n_series.to_string()),
            ("nf".into(), self.nf.to_string()),
            ("time_features".into(), self.time_features.to_string()),
            ("embedding_dim".into(), self.embedding_dim.to_string()),
            ("self_attention".into(), self.self_attention.to_string()),
            ("context_length".into(), self.context_length.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(p: &BTreeMap<String, String>, k: &str) -> Result<T> {
            p.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("config echo lacks `{k}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("config echo has a malformed `{k}`")))
        }
        let cfg = ModelConfig {
            target_length: get(pairs, "target_length")?,
            n_series: get(pairs, "n_series")?,
            nf: get(pairs, "nf")?,
            time_features: get(pairs, "time_features")?,
            embedding_dim: get(pairs, "embedding_dim")?,
            self_attention: get(pairs, "self_attention")?,
            context_length: get(pairs, "context_length")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generator and discriminator kept at the same growth stage and fade
/// coefficient.
pub struct ModelPair {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl ModelPair {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = SeededRng::new(seed);
        Ok(ModelPair {
            generator: Generator::new(cfg.clone(), root.fork("generator")),
            discriminator: Discriminator::new(cfg, root.fork("discriminator")),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.generator.config()
    }

    pub fn growth_stage(&self) -> usize {
        self.generator.growth_stage()
    }

    pub fn alpha(&self) -> f32 {
        self.generator.alpha()
    }

    pub fn set_alpha(&mut self, alpha: f32) -> Result<()> {
        self.generator.set_alpha(alpha)?;
        self.discriminator.set_alpha(alpha)
    }

    /// Adds the next generator stage and discriminator block with fresh
    /// parameters and restarts the fade at α = 0.
    pub fn grow(&mut self, new_stage: usize) -> Result<()> {
        let l = self.config().levels();
        if new_stage != self.growth_stage() + 1 || new_stage > l {
            return Err(Error::Contract(format!(
                "cannot grow from stage {} to {new_stage} (L = {l})",
                self.growth_stage()
            )));
        }
        self.generator.grow()?;
        self.discriminator.grow()?;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        nn::parameter_count(&self.generator) + nn::parameter_count(&self.discriminator)
    }

    pub fn set_sn_updates(&self, on: bool) {
        nn::set_sn_updates(&self.generator, on);
        nn::set_sn_updates(&self.discriminator, on);
    }
}

impl Module for ModelPair {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, nn::Entry<'a>)) {
        self.generator.visit(&nn::join(prefix, "gen"), f);
        self.discriminator.visit(&nn::join(prefix, "disc"), f);
    }
}
