//! Context-FID: Fréchet distance between Gaussian fits of contrastive
//! window embeddings of real and synthetic windows.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use psagan_tensor::{no_grad, Conv1dSpec, SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{real_batch, SeriesPanel, WindowSampler};
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, write_checkpoint};
use crate::nn::{self, join, Conv1d, Entry, Linear, Module, LEAKY_SLOPE};
use crate::train::Adam;

const PSD_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub channels: usize,
    pub dim: usize,
    pub kernel: usize,
    pub min_length: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 4,
            channels: 32,
            dim: 32,
            kernel: 3,
            min_length: 8,
            steps: 300,
            batch_size: 64,
            lr: 1e-3,
            negatives: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    fn to_pairs(&self) -> Vec<(String, String)> {
        let v = serde_json::to_value(self).expect("plain struct");
        v.as_object()
            .expect("object")
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect()
    }

    fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut obj = serde_json::Map::new();
        for (k, v) in pairs {
            obj.insert(k.clone(), serde_json::from_str(v)?);
        }
        Ok(serde_json::from_value(serde_json::Value::Object(obj))?)
    }
}

/// Dilated causal convolution stack with residual connections, global
/// max-pool over time and a linear head.
pub struct CausalEncoder {
    cfg: EncoderConfig,
    pub input: Conv1d,
    pub layers: Vec<Conv1d>,
    pub head: Linear,
}

impl CausalEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.depth == 0
            || cfg.channels == 0
            || cfg.dim == 0
            || cfg.kernel == 0
            || cfg.min_length == 0
        {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        let mut rng = SeededRng::new(cfg.seed).fork("encoder");
        let c = cfg.channels;
        let input = Conv1d::pointwise(1, c, false, &mut rng);
        let layers = (0..cfg.depth)
            .map(|i| {
                let spec = Conv1dSpec::causal(cfg.kernel, 1 << i);
                Conv1d::new(c, c, cfg.kernel, spec, false, &mut rng)
            })
            .collect();
        let head = Linear::new(c, cfg.dim, false, &mut rng);
        Ok(CausalEncoder {
            cfg,
            input,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 3 || x.shape()[1] != 1 {
            return Err(Error::Contract(format!(
                "encoder expects [batch, 1, len], got {:?}",
                x.shape()
            )));
        }
        if x.shape()[2] < self.cfg.min_length {
            return Err(Error::Contract(format!(
                "window length {} is below the encoder minimum {}",
                x.shape()[2],
                self.cfg.min_length
            )));
        }
        Ok(())
    }

    /// Per-time-step features `[batch, channels, len]` before pooling.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = self.input.forward(x)?;
        for layer in &self.layers {
            h = h.add(&layer.forward(&h)?.leaky_relu(LEAKY_SLOPE))?;
        }
        Ok(h)
    }

    /// `[batch, 1, len]` → `[batch, dim]`, differentiable.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = self.features(x)?.max_axis(2)?;
        let b = x.shape()[0];
        self.head.forward(&pooled.reshape(&[b, self.cfg.channels])?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(
            &mut file,
            &self.cfg.to_pairs(),
            0,
            1.0,
            &nn::state_tensors(self),
        )?;
        std::io::Write::flush(&mut file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
        let enc = CausalEncoder::new(EncoderConfig::from_pairs(&ck.config)?)?;
        ck.restore(&nn::state_tensors(&enc))?;
        Ok(enc)
    }
}

impl Module for CausalEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

fn window(panel: &SeriesPanel, i: usize, t: usize, len: usize) -> impl Iterator<Item = f32> + '_ {
    panel.values[i][t..t + len].iter().map(|&x| x as f32)
}

/// Triplet objective `−log σ(zᵃ·zᵖ) − Σₖ log σ(−zᵃ·zⁿᵏ)`, batch mean.
pub fn triplet_loss(anchor: &Tensor, positive: &Tensor, negatives: &[Tensor]) -> Result<Tensor> {
    let pos = anchor
        .mul(positive)?
        .sum_axis(1, false)?
        .log_sigmoid()
        .neg();
    let mut total = pos;
    for n in negatives {
        let s = anchor.mul(n)?.sum_axis(1, false)?.neg().log_sigmoid().neg();
        total = total.add(&s)?;
    }
    Ok(total.mean())
}

/// Trains an encoder on length-τ windows of the training range. Returns the
/// encoder and the per-step losses.
pub fn train_encoder(
    panel: &SeriesPanel,
    tau: usize,
    cfg: EncoderConfig,
) -> Result<(CausalEncoder, Vec<f64>)> {
    if tau < cfg.min_length || tau / 2 < cfg.min_length {
        return Err(Error::Config(format!(
            "window length {tau} too short for encoder minimum {}",
            cfg.min_length
        )));
    }
    let sampler = WindowSampler::new(panel, tau, panel.train_len, None)?;
    let encoder = CausalEncoder::new(cfg.clone())?;
    let mut opt = Adam::new(cfg.lr, (0.9, 0.999));
    let mut rng = SeededRng::new(cfg.seed).fork("triplets");
    let n = panel.n_series();
    let b = cfg.batch_size;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let len = rng.range_inclusive(tau / 2, tau);
        let mut anchors = Vec::with_capacity(b * len);
        let mut positives = Vec::with_capacity(b * len);
        let mut negatives = vec![Vec::with_capacity(b * len); cfg.negatives];
        for _ in 0..b {
            let (i, t) = sampler.sample(1, &mut rng)[0];
            let a0 = t + rng.range_inclusive(0, tau - len);
            let p0 = t + rng.range_inclusive(0, tau - len);
            anchors.extend(window(panel, i, a0, len));
            positives.extend(window(panel, i, p0, len));
            for neg in negatives.iter_mut() {
                let (j, s) = loop {
                    let (j, s) = sampler.sample(1, &mut rng)[0];
                    let disjoint = s + tau <= t || t + tau <= s;
                    if (n > 1 && j != i) || (n == 1 && disjoint) {
                        break (j, s);
                    }
                };
                let s0 = s + rng.range_inclusive(0, tau - len);
                neg.extend(window(panel, j, s0, len));
            }
        }
        let shape = [b, 1, len];
        let za = encoder.forward(&Tensor::from_vec(anchors, &shape)?)?;
        let zp = encoder.forward(&Tensor::from_vec(positives, &shape)?)?;
        let zn = negatives
            .into_iter()
            .map(|v| encoder.forward(&Tensor::from_vec(v, &shape)?))
            .collect::<Result<Vec<_>>>()?;
        let loss = triplet_loss(&za, &zp, &zn)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("encoder loss is {value}")));
        }
        loss.backward()?;
        opt.step(&nn::parameters(&encoder))?;
        losses.push(value);
    }
    Ok((encoder, losses))
}

/// Embeds `[n, 1, len]` windows without gradient tracking.
pub fn embed(encoder: &CausalEncoder, windows: &Tensor) -> Result<Vec<Vec<f64>>> {
    encoder.check(windows)?;
    let (n, len) = (windows.shape()[0], windows.shape()[2]);
    let data = windows.to_vec();
    let mut out = Vec::with_capacity(n);
    no_grad(|| -> Result<()> {
        for chunk in (0..n).step_by(256) {
            let m = (n - chunk).min(256);
            let x = Tensor::from_vec(data[chunk * len..(chunk + m) * len].to_vec(), &[m, 1, len])?;
            let z = encoder.forward(&x)?.to_vec();
            out.extend(
                z.chunks(encoder.cfg.dim)
                    .map(|r| r.iter().map(|&v| v as f64).collect()),
            );
        }
        Ok(())
    })?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and `1/(n−1)` covariance, symmetrised.
pub fn gaussian_stats(rows: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 embeddings, got {n}"
        )));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Contract("embeddings differ in dimension".into()));
    }
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let worst = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if worst < -PSD_TOLERANCE {
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite: eigenvalue {worst:e}"
        )));
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Contract(format!(
            "dimension mismatch: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let ra = psd_sqrt(&a.cov, "first covariance")?;
    let inner = &ra * &b.cov * &ra;
    let eig = psd_eigen(&inner, "covariance product")?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dm = (&a.mean - &b.mean).norm_squared();
    Ok((dm + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub mean: f64,
    pub std: f64,
    pub scores: Vec<f64>,
    pub n_windows: usize,
    pub seed: u64,
}

/// Synthetic windows `[n, 1, τ]` aligned with the given `(series, start)`
/// pairs.
pub type WindowSource<'a> = dyn FnMut(&[(usize, usize)], &mut SeededRng) -> Result<Tensor> + 'a;

/// Scores `draws` independent draws of `n_windows` aligned windows from the
/// training range and reports mean and (sample) standard deviation.
pub fn context_fid(
    encoder: &CausalEncoder,
    panel: &SeriesPanel,
    tau: usize,
    n_windows: usize,
    draws: usize,
    seed: u64,
    source: &mut WindowSource<'_>,
) -> Result<FidReport> {
    let sampler = WindowSampler::new(panel, tau, panel.train_len, None)?;
    if sampler.admissible() < n_windows {
        return Err(Error::Config(format!(
            "{} admissible windows, {n_windows} requested",
            sampler.admissible()
        )));
    }
    if draws == 0 || n_windows < 2 {
        return Err(Error::Config(
            "need at least one draw of two windows".into(),
        ));
    }
    let root = SeededRng::new(seed).fork("context_fid");
    let mut scores = Vec::with_capacity(draws);
    for d in 0..draws {
        let mut rng = root.fork_indexed("draw", d as u64);
        let pairs = sampler.sample_distinct(n_windows, &mut rng);
        let real = real_batch(panel, &pairs, tau)?;
        let synth = source(&pairs, &mut rng)?;
        if synth.shape() != real.shape() {
            return Err(Error::Contract(format!(
                "synthetic windows have shape {:?}, expected {:?}",
                synth.shape(),
                real.shape()
            )));
        }
        let a = gaussian_stats(&embed(encoder, &real)?)?;
        let b = gaussian_stats(&embed(encoder, &synth)?)?;
        scores.push(frechet_distance(&a, &b)?);
    }
    let mean = scores.iter().sum::<f64>() / draws as f64;
    let std = if draws > 1 {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(FidReport {
        mean,
        std,
        scores,
        n_windows,
        seed,
    })
}
