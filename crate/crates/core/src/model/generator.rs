use psagan_tensor::{SeededRng, Tensor};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Conv1d, Entry, IndexEmbedding, MainBlock, Module, LEAKY_SLOPE};

/// Observed history preceding a window, left-padded with zeros where the
/// series has fewer points; `mask` is 1 on real values and 0 on padding.
#[derive(Clone, Debug)]
pub struct Context {
    pub values: Tensor,
    pub mask: Tensor,
}

/// Conditioning for one generator call. `noise` is `[batch, 1, τ]` and
/// `features` `[batch, time_features, τ]`.
pub struct GeneratorInput<'a> {
    pub noise: &'a Tensor,
    pub series: &'a [usize],
    pub features: &'a Tensor,
    pub context: Option<&'a Context>,
}

/// Two-layer perceptron applied at every time step to stage features
/// concatenated with the context window; its output is added back.
pub struct ContextBlock {
    pub hidden: Conv1d,
    pub out: Conv1d,
    context_length: usize,
}

impl ContextBlock {
    pub fn new(nf: usize, context_length: usize, rng: &mut SeededRng) -> Self {
        ContextBlock {
            hidden: Conv1d::pointwise(nf + 2 * context_length, nf, false, rng),
            out: Conv1d::pointwise(nf, nf, false, rng).zero_init(),
            context_length,
        }
    }

    pub fn inject(&self, stage_out: &Tensor, context: &Context) -> Result<Tensor> {
        let (b, l) = (stage_out.shape()[0], stage_out.shape()[2]);
        let lc = self.context_length;
        if context.values.shape() != [b, lc] || context.mask.shape() != [b, lc] {
            return Err(Error::Contract(format!(
                "context must be [{b}, {lc}], got values {:?} and mask {:?}",
                context.values.shape(),
                context.mask.shape()
            )));
        }
        let ctx = Tensor::cat(&[context.values.clone(), context.mask.clone()], 1)?
            .reshape(&[b, 2 * lc, 1])?
            .broadcast_to(&[b, 2 * lc, l])?;
        let joined = Tensor::cat(&[stage_out.clone(), ctx], 1)?;
        let h = self.hidden.forward(&joined)?.leaky_relu(LEAKY_SLOPE);
        Ok(stage_out.add(&self.out.forward(&h)?)?)
    }
}

impl Module for ContextBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

/// Generator block `g_i` with its feature re-projection, optional context
/// block and the output layer used while it is the newest stage.
pub struct GenStage {
    pub main: MainBlock,
    pub reproject: Conv1d,
    pub context: Option<ContextBlock>,
    pub output: Conv1d,
}

impl GenStage {
    fn new(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let nf = cfg.nf;
        GenStage {
            main: MainBlock::new(nf, cfg.self_attention, rng),
            reproject: Conv1d::pointwise(nf + cfg.time_features, nf, true, rng),
            context: (cfg.context_length > 0)
                .then(|| ContextBlock::new(nf, cfg.context_length, rng)),
            output: Conv1d::same(nf, 1, 3, true, rng),
        }
    }

    /// `m∘f` followed by the context block when present.
    pub fn body(&self, x: &Tensor, context: Option<&Context>) -> Result<Tensor> {
        let y = self.main.forward(x)?;
        match (&self.context, context) {
            (Some(block), Some(ctx)) => block.inject(&y, ctx),
            (Some(_), None) => Err(Error::Contract(
                "generator has context blocks but no context was given".into(),
            )),
            (None, _) => Ok(y),
        }
    }

    /// `UP`, then `α·body + (1 − α)·identity`, then feature re-projection.
    /// `features` must already be at twice the length of `prev`.
    pub fn forward(
        &self,
        prev: &Tensor,
        features: &Tensor,
        context: Option<&Context>,
        alpha: f32,
    ) -> Result<Tensor> {
        check_alpha(alpha)?;
        let up = prev.upsample_linear()?;
        let new = self.body(&up, context)?;
        let comb = if alpha < 1.0 {
            fade(&new, &up, alpha)?
        } else {
            new
        };
        self.with_features(&comb, features)
    }

    /// Concatenates stage-resolution time features and projects back to
    /// `nf` channels.
    pub fn with_features(&self, z: &Tensor, features: &Tensor) -> Result<Tensor> {
        self.reproject
            .forward(&Tensor::cat(&[z.clone(), features.clone()], 1)?)
    }
}

impl Module for GenStage {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        self.main.visit(&join(prefix, "main"), f);
        self.reproject.visit(&join(prefix, "reproject"), f);
        if let Some(c) = &self.context {
            c.visit(&join(prefix, "context"), f);
        }
        self.output.visit(&join(prefix, "output"), f);
    }
}

pub struct Generator {
    cfg: ModelConfig,
    pub embedding: IndexEmbedding,
    pub input: Conv1d,
    pub stages: Vec<GenStage>,
    alpha: f32,
    rng: SeededRng,
}

fn check_alpha(alpha: f32) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )))
    }
}

/// `α·new + (1 − α)·old`; returns `new` itself when α = 1.
pub(crate) fn fade(new: &Tensor, old: &Tensor, alpha: f32) -> Result<Tensor> {
    if alpha >= 1.0 {
        return Ok(new.clone());
    }
    Ok(new.scale(alpha).add(&old.scale(1.0 - alpha))?)
}

impl Generator {
    pub fn new(cfg: ModelConfig, rng: SeededRng) -> Self {
        let mut init = rng.fork("base");
        let embedding = IndexEmbedding::new(cfg.n_series, cfg.embedding_dim, &mut init);
        let input = Conv1d::pointwise(
            1 + cfg.embedding_dim + cfg.time_features,
            cfg.nf,
            true,
            &mut init,
        );
        let first = GenStage::new(&cfg, &mut rng.fork_indexed("stage", 1));
        Generator {
            cfg,
            embedding,
            input,
            stages: vec![first],
            alpha: 1.0,
            rng,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn growth_stage(&self) -> usize {
        self.stages.len()
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f32) -> Result<()> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn output_length(&self) -> usize {
        self.cfg.stage_length(self.growth_stage())
    }

    pub(crate) fn grow(&mut self) -> Result<()> {
        let next = self.stages.len() + 1;
        if next > self.cfg.levels() {
            return Err(Error::Contract(format!(
                "generator already at its last stage {}",
                self.stages.len()
            )));
        }
        let stage = GenStage::new(&self.cfg, &mut self.rng.fork_indexed("stage", next as u64));
        self.stages.push(stage);
        self.alpha = 0.0;
        Ok(())
    }

    fn check_input(&self, input: &GeneratorInput<'_>) -> Result<usize> {
        let tau = self.cfg.target_length;
        let b = input.series.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if input.noise.shape() != [b, 1, tau] {
            return Err(Error::Contract(format!(
                "noise must be [{b}, 1, {tau}], got {:?}",
                input.noise.shape()
            )));
        }
        if input.features.shape() != [b, self.cfg.time_features, tau] {
            return Err(Error::Contract(format!(
                "time features must be [{b}, {}, {tau}], got {:?}",
                self.cfg.time_features,
                input.features.shape()
            )));
        }
        if let Some(&bad) = input.series.iter().find(|&&i| i >= self.cfg.n_series) {
            return Err(Error::Contract(format!(
                "series index {bad} out of range for {} series",
                self.cfg.n_series
            )));
        }
        if self.cfg.context_length > 0 && input.context.is_none() {
            return Err(Error::Contract(
                "generator has context blocks but no context was given".into(),
            ));
        }
        Ok(b)
    }

    /// Concatenates noise, broadcast index embedding and time features,
    /// projects to `nf` channels and average-pools to length 8.
    pub fn preprocess(
        &self,
        noise: &Tensor,
        embedding: &Tensor,
        features: &Tensor,
    ) -> Result<Tensor> {
        let (b, tau) = (noise.shape()[0], noise.shape()[2]);
        if !tau.is_power_of_two() || tau < 16 {
            return Err(Error::Config(format!(
                "window length must be a power of two >= 16, got {tau}"
            )));
        }
        let e = embedding.shape()[1];
        let emb = embedding.reshape(&[b, e, 1])?.broadcast_to(&[b, e, tau])?;
        let z = Tensor::cat(&[noise.clone(), emb, features.clone()], 1)?;
        let h = self.input.forward(&z)?;
        Ok(h.avg_pool(tau / 8, tau / 8)?)
    }

    /// Output `[batch, 1, 2^(s+3)]` at the current growth stage `s`.
    pub fn forward(&self, input: &GeneratorInput<'_>) -> Result<Tensor> {
        self.check_input(input)?;
        let tau = self.cfg.target_length;
        let feats_at = |len: usize| -> Result<Tensor> {
            if len == tau {
                Ok(input.features.clone())
            } else {
                Ok(input.features.avg_pool(tau / len, tau / len)?)
            }
        };
        let emb = self.embedding.lookup(input.series)?;
        let z0 = self.preprocess(input.noise, &emb, input.features)?;

        let s = self.growth_stage();
        let first = &self.stages[0];
        let mut h = first.with_features(&first.body(&z0, input.context)?, &feats_at(8)?)?;
        let mut prev = None;
        for (i, stage) in self.stages.iter().enumerate().skip(1) {
            let alpha = if i + 1 == s { self.alpha } else { 1.0 };
            let next = stage.forward(&h, &feats_at(2 * h.shape()[2])?, input.context, alpha)?;
            prev = Some(h);
            h = next;
        }
        let out = self.stages[s - 1].output.forward(&h.upsample_linear()?)?;
        match prev {
            Some(p) if self.alpha < 1.0 => {
                let old = self.stages[s - 2]
                    .output
                    .forward(&p.upsample_linear()?)?
                    .upsample_linear()?;
                fade(&out, &old, self.alpha)
            }
            _ => Ok(out),
        }
    }
}

impl Module for Generator {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        self.embedding.visit(&join(prefix, "embedding"), f);
        self.input.visit(&join(prefix, "input"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
    }
}
