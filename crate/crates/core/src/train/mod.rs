//! Least-squares adversarial training with the moment loss, Adam and the
//! progressive growing schedule.

mod optim;

pub use optim::Adam;

use std::io::Write;
use std::path::PathBuf;

use psagan_tensor::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{AlignedBatch, SeriesPanel, WindowSampler};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, GeneratorInput, ModelConfig, ModelPair};
use crate::nn;

/// `½·mean((real − 1)²) + ½·mean(fake²)`.
pub fn lsgan_d_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    if real_scores.shape() != fake_scores.shape() {
        return Err(Error::Contract(format!(
            "score shapes differ: {:?} vs {:?}",
            real_scores.shape(),
            fake_scores.shape()
        )));
    }
    let r = real_scores.add_scalar(-1.0).square().mean();
    let f = fake_scores.square().mean();
    Ok(r.add(&f)?.scale(0.5))
}

/// `½·mean((fake − 1)²)`.
pub fn lsgan_g_loss(fake_scores: &Tensor) -> Tensor {
    fake_scores.add_scalar(-1.0).square().mean().scale(0.5)
}

/// `|μ(fake) − μ(real)| + |σ(fake) − σ(real)|` over all elements, with
/// population standard deviations.
pub fn moment_loss(fake: &Tensor, real: &Tensor) -> Result<Tensor> {
    if fake.shape() != real.shape() {
        return Err(Error::Contract(format!(
            "moment loss needs aligned batches, got {:?} and {:?}",
            fake.shape(),
            real.shape()
        )));
    }
    let dm = fake.mean().sub(&real.mean())?.abs();
    let ds = fake.std_all().sub(&real.std_all())?.abs();
    Ok(dm.add(&ds)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub target_length: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub stage_epochs: usize,
    pub fade_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub moment_loss_weight: f64,
    pub self_attention: bool,
    pub fade_in: bool,
    pub moment_loss: bool,
    pub context_length: usize,
    pub nf: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target_length: 256,
            epochs: 6500,
            batches_per_epoch: 100,
            batch_size: 512,
            stage_epochs: 1000,
            fade_epochs: 500,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            moment_loss_weight: 1.0,
            self_attention: true,
            fade_in: true,
            moment_loss: true,
            context_length: 0,
            nf: 32,
            embedding_dim: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_size", self.batch_size),
            ("stage_epochs", self.stage_epochs),
            ("fade_epochs", self.fade_epochs),
            ("nf", self.nf),
            ("embedding_dim", self.embedding_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.fade_epochs > self.stage_epochs {
            return Err(Error::Config(format!(
                "fade_epochs ({}) exceeds stage_epochs ({})",
                self.fade_epochs, self.stage_epochs
            )));
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(
                "lr must be positive and betas in [0, 1)".into(),
            ));
        }
        if !(self.moment_loss_weight >= 0.0) {
            return Err(Error::Config(
                "moment_loss_weight must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, n_series: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.target_length, n_series)?;
        cfg.nf = self.nf;
        cfg.embedding_dim = self.embedding_dim;
        cfg.self_attention = self.self_attention;
        cfg.context_length = self.context_length;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn levels(&self) -> usize {
        self.target_length.trailing_zeros() as usize - 3
    }

    fn effective_moment_weight(&self) -> f32 {
        if self.moment_loss {
            self.moment_loss_weight as f32
        } else {
            0.0
        }
    }
}

/// Growth stage and fade coefficient in force during `epoch`.
pub fn schedule_stage(epoch: usize, cfg: &TrainConfig) -> (usize, f32) {
    let levels = cfg.levels().max(1);
    let stage = (1 + epoch / cfg.stage_epochs).min(levels);
    if stage == 1 || !cfg.fade_in {
        return (stage, 1.0);
    }
    let offset = epoch - (stage - 1) * cfg.stage_epochs;
    (stage, (offset as f32 / cfg.fade_epochs as f32).min(1.0))
}

/// Mean losses of one epoch; one line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub alpha: f32,
    pub d_loss: f64,
    pub g_loss: f64,
    pub ml: f64,
}

/// Hooks into the training loop.
pub trait Observer {
    fn before_grow(&mut self, _epoch: usize, _pair: &ModelPair) {}
    fn after_grow(&mut self, _epoch: usize, _pair: &ModelPair) {}
    fn on_epoch(&mut self, _record: &EpochRecord, _pair: &ModelPair) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Where checkpoints and the metrics log go. `extra` is echoed into every
/// checkpoint (scaler state, run tags).
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    pub extra: Vec<(String, String)>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn stage_checkpoint_name(stage: usize) -> String {
    format!("stage{stage}.ckpt")
}

/// Adversarial training loop over a scaled panel. `observed` hides values
/// from both real windows and context.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub pair: ModelPair,
    panel: &'a SeriesPanel,
    observed: Option<&'a [Vec<bool>]>,
    sampler: WindowSampler,
    opt_g: Adam,
    opt_d: Adam,
    rng: SeededRng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        panel: &'a SeriesPanel,
        observed: Option<&'a [Vec<bool>]>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.model_config(panel.n_series())?;
        let sampler = WindowSampler::new(panel, cfg.target_length, panel.train_len, observed)?;
        let pair = ModelPair::new(model_cfg, cfg.seed)?;
        Ok(Trainer {
            opt_g: Adam::new(cfg.lr, (cfg.beta1, cfg.beta2)),
            opt_d: Adam::new(cfg.lr, (cfg.beta1, cfg.beta2)),
            rng: SeededRng::new(cfg.seed).fork("batches"),
            cfg,
            pair,
            panel,
            observed,
            sampler,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One discriminator and one generator update on a fresh aligned batch.
    /// Returns `(d_loss, g_loss, moment_loss)`.
    pub fn step(&mut self, rng: &mut SeededRng) -> Result<(f64, f64, f64)> {
        let tau = self.cfg.target_length;
        let batch = AlignedBatch::draw(
            self.panel,
            &self.sampler,
            self.cfg.batch_size,
            self.cfg.context_length,
            self.observed,
            rng,
        )?;
        let len = self.pair.config().stage_length(self.pair.growth_stage());
        let (real, feats) = if len == tau {
            (batch.real.clone(), batch.features.clone())
        } else {
            let f = tau / len;
            (batch.real.avg_pool(f, f)?, batch.features.avg_pool(f, f)?)
        };
        let fake = self.pair.generator.forward(&GeneratorInput {
            noise: &batch.noise,
            series: &batch.series,
            features: &batch.features,
            context: batch.context.as_ref(),
        })?;

        let disc = &self.pair.discriminator;
        let d_real = disc.forward(&real, &batch.series, &feats)?;
        let d_fake = disc.forward(&fake.detach(), &batch.series, &feats)?;
        let d_loss = lsgan_d_loss(&d_real, &d_fake)?;
        let d_val = d_loss.item() as f64;
        if !d_val.is_finite() {
            return Err(Error::Numeric(format!("discriminator loss is {d_val}")));
        }
        d_loss.backward()?;
        self.opt_d.step(&nn::parameters(disc))?;

        nn::set_sn_updates(disc, false);
        let scores = disc.forward(&fake, &batch.series, &feats);
        nn::set_sn_updates(disc, true);
        let g_adv = lsgan_g_loss(&scores?);
        let ml = moment_loss(&fake, &real)?;
        let w = self.cfg.effective_moment_weight();
        let g_loss = if w > 0.0 {
            g_adv.add(&ml.scale(w))?
        } else {
            g_adv.clone()
        };
        let (g_val, ml_val) = (g_adv.item() as f64, ml.item() as f64);
        if !g_val.is_finite() || !ml_val.is_finite() {
            return Err(Error::Numeric(format!(
                "generator loss is {g_val}, moment loss {ml_val}"
            )));
        }
        g_loss.backward()?;
        self.opt_g.step(&nn::parameters(&self.pair.generator))?;
        nn::zero_grads(disc);
        Ok((d_val, g_val, ml_val))
    }

    /// Runs the remaining epochs, growing on schedule.
    pub fn run(
        &mut self,
        out: &TrainOutput,
        observer: &mut dyn Observer,
    ) -> Result<Vec<EpochRecord>> {
        let mut metrics = match &out.dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::io::BufWriter::new(std::fs::File::create(
                    dir.join(METRICS_FILE),
                )?))
            }
            None => None,
        };
        let mut records = Vec::with_capacity(self.cfg.epochs);
        while self.epoch < self.cfg.epochs {
            let e = self.epoch;
            let (stage, alpha) = schedule_stage(e, &self.cfg);
            while self.pair.growth_stage() < stage {
                if let Some(dir) = &out.dir {
                    let name = stage_checkpoint_name(self.pair.growth_stage());
                    save_checkpoint(&dir.join(name), &self.pair, &out.extra)?;
                }
                observer.before_grow(e, &self.pair);
                self.pair.grow(self.pair.growth_stage() + 1)?;
                observer.after_grow(e, &self.pair);
            }
            self.pair.set_alpha(alpha)?;
            let mut rng = self.rng.fork_indexed("epoch", e as u64);
            let (mut d, mut g, mut m) = (0.0, 0.0, 0.0);
            for _ in 0..self.cfg.batches_per_epoch {
                let (dl, gl, ml) = self.step(&mut rng)?;
                d += dl;
                g += gl;
                m += ml;
            }
            let n = self.cfg.batches_per_epoch as f64;
            let rec = EpochRecord {
                epoch: e,
                stage,
                alpha,
                d_loss: d / n,
                g_loss: g / n,
                ml: m / n,
            };
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
                w.flush()?;
            }
            observer.on_epoch(&rec, &self.pair);
            records.push(rec);
            self.epoch += 1;
        }
        if let Some(dir) = &out.dir {
            save_checkpoint(&dir.join(FINAL_CHECKPOINT), &self.pair, &out.extra)?;
        }
        Ok(records)
    }
}

/// Trains from scratch and returns the model with its per-epoch records.
pub fn train(
    panel: &SeriesPanel,
    observed: Option<&[Vec<bool>]>,
    cfg: TrainConfig,
    out: &TrainOutput,
    observer: &mut dyn Observer,
) -> Result<(ModelPair, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(panel, observed, cfg)?;
    let records = trainer.run(out, observer)?;
    Ok((trainer.pair, records))
}
