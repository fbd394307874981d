use psagan_tensor::{SeededRng, Tensor};

use super::SeriesPanel;
use crate::error::{Error, Result};
use crate::model::Context;

/// Real windows with the series indices, start times, time features, noise
/// and (optionally) context the synthetic batch is generated from.
pub struct AlignedBatch {
    pub series: Vec<usize>,
    pub starts: Vec<usize>,
    /// `[batch, 1, τ]`
    pub real: Tensor,
    /// `[batch, time_features, τ]`
    pub features: Tensor,
    /// `[batch, 1, τ]`
    pub noise: Tensor,
    pub context: Option<Context>,
}

/// Uniform sampler over admissible `(series, start)` pairs: windows of
/// length τ inside `0..limit` containing no unobserved position.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    tau: usize,
    pairs: Vec<(usize, usize)>,
}

impl WindowSampler {
    pub fn new(
        panel: &SeriesPanel,
        tau: usize,
        limit: usize,
        observed: Option<&[Vec<bool>]>,
    ) -> Result<Self> {
        let limit = limit.min(panel.len());
        let mut pairs = Vec::new();
        for i in 0..panel.n_series() {
            if limit < tau {
                break;
            }
            let mut missing = vec![0usize; limit + 1];
            for t in 0..limit {
                let hole = observed.is_some_and(|m| !m[i][t]);
                missing[t + 1] = missing[t] + hole as usize;
            }
            pairs.extend(
                (0..=limit - tau)
                    .filter(|&t| missing[t + tau] == missing[t])
                    .map(|t| (i, t)),
            );
        }
        if pairs.is_empty() {
            return Err(Error::Config(format!(
                "no admissible window of length {tau} in the first {limit} points"
            )));
        }
        Ok(WindowSampler { tau, pairs })
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn admissible(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Vec<(usize, usize)> {
        (0..n)
            .map(|_| self.pairs[rng.below(self.pairs.len())])
            .collect()
    }

    /// `n` distinct pairs when possible, otherwise sampled with replacement.
    pub fn sample_distinct(&self, n: usize, rng: &mut SeededRng) -> Vec<(usize, usize)> {
        if n <= self.pairs.len() {
            rng.sample_indices(self.pairs.len(), n)
                .into_iter()
                .map(|k| self.pairs[k])
                .collect()
        } else {
            self.sample(n, rng)
        }
    }
}

/// Values of the given windows as `[batch, 1, τ]`.
pub fn real_batch(panel: &SeriesPanel, pairs: &[(usize, usize)], tau: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(pairs.len() * tau);
    for &(i, t) in pairs {
        if i >= panel.n_series() || t + tau > panel.len() {
            return Err(Error::Contract(format!(
                "window ({i}, {t}) of length {tau} lies outside the panel"
            )));
        }
        data.extend(panel.values[i][t..t + tau].iter().map(|&x| x as f32));
    }
    Ok(Tensor::from_vec(data, &[pairs.len(), 1, tau])?)
}

/// Time features of windows starting at `starts`, `[batch, time_features, τ]`.
pub fn window_features(panel: &SeriesPanel, starts: &[usize], tau: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(starts.len() * super::TIME_FEATURES * tau);
    for &t in starts {
        data.extend(panel.features(t, tau));
    }
    Ok(Tensor::from_vec(
        data,
        &[starts.len(), super::TIME_FEATURES, tau],
    )?)
}

/// The `length` values preceding each window start, left-padded with zeros
/// (mask 0) before the series begins or where `observed` is false.
pub fn context_for(
    panel: &SeriesPanel,
    observed: Option<&[Vec<bool>]>,
    pairs: &[(usize, usize)],
    length: usize,
) -> Result<Context> {
    let mut values = vec![0.0f32; pairs.len() * length];
    let mut mask = vec![0.0f32; pairs.len() * length];
    for (r, &(i, t)) in pairs.iter().enumerate() {
        for k in 0..length {
            let Some(pos) = (t + k).checked_sub(length) else {
                continue;
            };
            if observed.is_some_and(|m| !m[i][pos]) {
                continue;
            }
            values[r * length + k] = panel.values[i][pos] as f32;
            mask[r * length + k] = 1.0;
        }
    }
    Ok(Context {
        values: Tensor::from_vec(values, &[pairs.len(), length])?,
        mask: Tensor::from_vec(mask, &[pairs.len(), length])?,
    })
}

impl AlignedBatch {
    pub fn draw(
        panel: &SeriesPanel,
        sampler: &WindowSampler,
        batch: usize,
        context_length: usize,
        observed: Option<&[Vec<bool>]>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let pairs = sampler.sample(batch, rng);
        Self::from_pairs(panel, &pairs, sampler.tau(), context_length, observed, rng)
    }

    pub fn from_pairs(
        panel: &SeriesPanel,
        pairs: &[(usize, usize)],
        tau: usize,
        context_length: usize,
        observed: Option<&[Vec<bool>]>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let starts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        Ok(AlignedBatch {
            series: pairs.iter().map(|p| p.0).collect(),
            real: real_batch(panel, pairs, tau)?,
            features: window_features(panel, &starts, tau)?,
            noise: Tensor::randn(&[pairs.len(), 1, tau], 1.0, rng),
            context: (context_length > 0)
                .then(|| context_for(panel, observed, pairs, context_length))
                .transpose()?,
            starts,
        })
    }
}
