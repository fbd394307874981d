use psagan_tensor::{SeededRng, Tensor};

use super::generator::fade;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Conv1d, Entry, IndexEmbedding, Linear, MainBlock, Module, LEAKY_SLOPE};

/// Mirror of the generator: an input convolution over sample, time
/// features and index embedding, one halving block per growth stage and a
/// scoring head at length 8.
pub struct Discriminator {
    cfg: ModelConfig,
    pub embedding: IndexEmbedding,
    pub input: Conv1d,
    /// `blocks[j]` works on length `2^(j+4)` and halves it.
    pub blocks: Vec<MainBlock>,
    pub head_block: MainBlock,
    pub head_conv: Conv1d,
    pub head_fc: Linear,
    alpha: f32,
    rng: SeededRng,
}

impl Discriminator {
    pub fn new(cfg: ModelConfig, rng: SeededRng) -> Self {
        let mut init = rng.fork("base");
        let nf = cfg.nf;
        let embedding = IndexEmbedding::new(cfg.n_series, cfg.embedding_dim, &mut init);
        let input = Conv1d::pointwise(
            1 + cfg.time_features + cfg.embedding_dim,
            nf,
            true,
            &mut init,
        );
        let head_block = MainBlock::new(nf, cfg.self_attention, &mut init);
        let head_conv = Conv1d::same(nf, 1, 3, true, &mut init);
        let head_fc = Linear::new(8, 1, true, &mut init);
        let first = MainBlock::new(nf, cfg.self_attention, &mut rng.fork_indexed("block", 1));
        Discriminator {
            cfg,
            embedding,
            input,
            blocks: vec![first],
            head_block,
            head_conv,
            head_fc,
            alpha: 1.0,
            rng,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn growth_stage(&self) -> usize {
        self.blocks.len()
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Contract(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        self.alpha = alpha;
        Ok(())
    }

    pub fn input_length(&self) -> usize {
        self.cfg.stage_length(self.growth_stage())
    }

    pub(crate) fn grow(&mut self) -> Result<()> {
        let next = self.blocks.len() + 1;
        if next > self.cfg.levels() {
            return Err(Error::Contract(format!(
                "discriminator already at its last stage {}",
                self.blocks.len()
            )));
        }
        let block = MainBlock::new(
            self.cfg.nf,
            self.cfg.self_attention,
            &mut self.rng.fork_indexed("block", next as u64),
        );
        self.blocks.push(block);
        self.alpha = 0.0;
        Ok(())
    }

    /// One score per sample. `sample` is `[batch, 1, l]` and `features`
    /// `[batch, time_features, l]` with `l` the current stage length.
    pub fn forward(&self, sample: &Tensor, series: &[usize], features: &Tensor) -> Result<Tensor> {
        let b = series.len();
        let l = self.input_length();
        if sample.shape() != [b, 1, l] {
            return Err(Error::Contract(format!(
                "discriminator at stage {} expects [{b}, 1, {l}], got {:?}",
                self.growth_stage(),
                sample.shape()
            )));
        }
        if features.shape() != [b, self.cfg.time_features, l] {
            return Err(Error::Contract(format!(
                "time features must be [{b}, {}, {l}], got {:?}",
                self.cfg.time_features,
                features.shape()
            )));
        }
        let e = self.cfg.embedding_dim;
        let emb = self
            .embedding
            .lookup(series)?
            .reshape(&[b, e, 1])?
            .broadcast_to(&[b, e, l])?;
        let x = Tensor::cat(&[sample.clone(), features.clone(), emb], 1)?;
        let mut y = self.input.forward(&x)?.leaky_relu(LEAKY_SLOPE);
        let s = self.growth_stage();
        for (j, block) in self.blocks.iter().enumerate().rev() {
            let new = block.forward(&y)?.avg_pool(2, 2)?;
            y = if j + 1 == s && s > 1 {
                fade(&new, &y.avg_pool(2, 2)?, self.alpha)?
            } else {
                new
            };
        }
        let h = self
            .head_conv
            .forward(&self.head_block.forward(&y)?)?
            .leaky_relu(LEAKY_SLOPE);
        let score = self.head_fc.forward(&h.reshape(&[b, 8])?)?;
        Ok(score.reshape(&[b])?)
    }
}

impl Module for Discriminator {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        self.embedding.visit(&join(prefix, "embedding"), f);
        self.input.visit(&join(prefix, "input"), f);
        for (j, block) in self.blocks.iter().enumerate() {
            block.visit(&join(prefix, &format!("block{}", j + 1)), f);
        }
        self.head_block.visit(&join(prefix, "head_block"), f);
        self.head_conv.visit(&join(prefix, "head_conv"), f);
        self.head_fc.visit(&join(prefix, "head_fc"), f);
    }
}
