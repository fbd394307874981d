//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use psagan::data::Format;
use psagan::fid::EncoderConfig;
use psagan::train::TrainConfig;

use crate::{CliError, Result};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {
        $(impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        })*
    };
}

from_str_value!(usize, u64, f64, bool, String);

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $field:ident: $ty:ty = $default:expr,)*) => {
        /// Every setting a command may read. Unset keys keep their defaults.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value).ok_or_else(|| {
                            CliError::Config(format!("{key}: cannot parse `{value}` as {}", stringify!($ty)))
                        })?;
                    })*
                    _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Every key with its current value, in declaration order.
            pub fn to_pairs(&self) -> Vec<(String, String)> {
                vec![$((stringify!($field).to_string(), self.$field.to_string()),)*]
            }
        }
    };
}

run_config! {
    /// Dataset path; empty selects the synthetic panel.
    data: String = String::new(),
    format: String = "csv".into(),
    /// First test timestamp; empty splits by `train_fraction`.
    split: String = String::new(),
    train_fraction: f64 = 0.8,
    per_series_scaling: bool = true,
    synthetic_series: usize = 20,
    synthetic_length: usize = 2000,
    synthetic_noise: f64 = 0.1,
    synthetic_trend: f64 = 0.0,
    synthetic_seed: u64 = 0,
    target_length: usize = 256,
    epochs: usize = 6500,
    batches_per_epoch: usize = 100,
    batch_size: usize = 512,
    stage_epochs: usize = 1000,
    fade_epochs: usize = 500,
    lr: f64 = 5e-4,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    moment_loss_weight: f64 = 1.0,
    self_attention: bool = true,
    fade_in: bool = true,
    moment_loss: bool = true,
    context_length: usize = 0,
    nf: usize = 32,
    embedding_dim: usize = 10,
    seed: u64 = 0,
    /// Encoder checkpoint; empty means `<out>/encoder.ckpt`.
    encoder: String = String::new(),
    encoder_depth: usize = 4,
    encoder_channels: usize = 32,
    encoder_dim: usize = 32,
    encoder_kernel: usize = 3,
    encoder_steps: usize = 300,
    encoder_batch_size: usize = 64,
    encoder_lr: f64 = 1e-3,
    encoder_negatives: usize = 4,
    encoder_seed: u64 = 0,
    score_windows: usize = 5120,
    score_draws: usize = 5,
    score_seed: u64 = 0,
    /// `far_forecast`, `stretch` or `cold_start`.
    scenario: String = "far_forecast".into(),
    scenario_seed: u64 = 0,
    far_window: usize = 32,
    n_windows: usize = 7,
    stretch_len: usize = 50,
    /// Empty uses the default for the stretch length.
    stretch_fraction: String = String::new(),
    cold_start_fraction: f64 = 0.2,
    /// Comma-separated `moving_average` or `name=checkpoint` entries.
    models: String = "moving_average".into(),
    /// `impute` or `forecast`.
    eval_method: String = "impute".into(),
    eval_seeds: String = "0,1".into(),
    n_samples: usize = 100,
    sample_count: usize = 512,
    out: String = "run".into(),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    MovingAverage,
    Checkpoint { name: String, path: PathBuf },
}

impl RunConfig {
    /// Reads a config file: one `key = value` per line, `#` comments.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingArtifact(format!("config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    n + 1
                ))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides.
    pub fn apply(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a String, &'a String)>,
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let tau = self.target_length;
        if !(16..=256).contains(&tau) || !tau.is_power_of_two() {
            return Err(CliError::Config(format!(
                "target_length: {tau} is not 2^(L+3) for L in 1..=5"
            )));
        }
        self.format()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "train_fraction: {} outside (0, 1)",
                self.train_fraction
            )));
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !["far_forecast", "stretch", "cold_start"].contains(&self.scenario.as_str()) {
            return Err(CliError::Config(format!(
                "scenario: unknown scenario `{}`",
                self.scenario
            )));
        }
        if !["impute", "forecast"].contains(&self.eval_method.as_str()) {
            return Err(CliError::Config(format!(
                "eval_method: expected impute or forecast, got `{}`",
                self.eval_method
            )));
        }
        self.stretch_fraction()?;
        self.eval_seeds()?;
        self.models()?;
        if self.n_samples == 0 || self.sample_count == 0 || self.score_draws == 0 {
            return Err(CliError::Config(
                "n_samples, sample_count and score_draws must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn format(&self) -> Result<Format> {
        self.format
            .parse()
            .map_err(|_| CliError::Config(format!("format: unknown format `{}`", self.format)))
    }

    pub fn stretch_fraction(&self) -> Result<Option<f64>> {
        if self.stretch_fraction.is_empty() {
            return Ok(None);
        }
        self.stretch_fraction.parse().map(Some).map_err(|_| {
            CliError::Config(format!(
                "stretch_fraction: cannot parse `{}`",
                self.stretch_fraction
            ))
        })
    }

    pub fn eval_seeds(&self) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = self
            .eval_seeds
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("eval_seeds: bad seed `{s}`")))
            })
            .collect::<Result<_>>()?;
        if seeds.is_empty() {
            return Err(CliError::Config("eval_seeds: no seeds".into()));
        }
        Ok(seeds)
    }

    pub fn models(&self) -> Result<Vec<ModelSpec>> {
        self.models
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s.split_once('=') {
                None if s == "moving_average" => Ok(ModelSpec::MovingAverage),
                Some((name, path)) if !name.trim().is_empty() && !path.trim().is_empty() => {
                    Ok(ModelSpec::Checkpoint {
                        name: name.trim().into(),
                        path: path.trim().into(),
                    })
                }
                _ => Err(CliError::Config(format!("models: bad entry `{s}`"))),
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn encoder_path(&self) -> PathBuf {
        if self.encoder.is_empty() {
            self.out_dir().join("encoder.ckpt")
        } else {
            PathBuf::from(&self.encoder)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            target_length: self.target_length,
            epochs: self.epochs,
            batches_per_epoch: self.batches_per_epoch,
            batch_size: self.batch_size,
            stage_epochs: self.stage_epochs,
            fade_epochs: self.fade_epochs,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            moment_loss_weight: self.moment_loss_weight,
            self_attention: self.self_attention,
            fade_in: self.fade_in,
            moment_loss: self.moment_loss,
            context_length: self.context_length,
            nf: self.nf,
            embedding_dim: self.embedding_dim,
            seed: self.seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.encoder_depth,
            channels: self.encoder_channels,
            dim: self.encoder_dim,
            kernel: self.encoder_kernel,
            steps: self.encoder_steps,
            batch_size: self.encoder_batch_size,
            lr: self.encoder_lr,
            negatives: self.encoder_negatives,
            seed: self.encoder_seed,
            ..EncoderConfig::default()
        }
    }
}
