//! Layers shared by the generator, the discriminator and the sample encoder.

use std::cell::Cell;

use psagan_tensor::{is_grad_enabled, Conv1dSpec, SeededRng, Tensor};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f32 = 0.2;
const SN_EPS: f64 = 1e-12;

/// A named slot reached while walking a module tree.
pub enum Entry<'a> {
    Param(&'a Tensor),
    SpectralNorm(&'a SpectralNorm),
}

pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Trainable parameters in visiting order.
pub fn parameters(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, e| {
        if let Entry::Param(t) = e {
            out.push((name.to_string(), t.clone()));
        }
    });
    out
}

/// Every tensor that must survive a checkpoint: parameters and the
/// persistent singular-vector estimates (stored as `<layer>.sn_u`).
pub fn state_tensors(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, e| match e {
        Entry::Param(t) => out.push((name.to_string(), t.clone())),
        Entry::SpectralNorm(sn) => out.push((name.to_string(), sn.u.clone())),
    });
    out
}

pub fn spectral_norms(m: &dyn Module) -> Vec<(String, &SpectralNorm)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, e| {
        if let Entry::SpectralNorm(sn) = e {
            out.push((name.to_string(), sn));
        }
    });
    out
}

/// Enables or disables the power-iteration update of every spectral norm.
pub fn set_sn_updates(m: &dyn Module, on: bool) {
    m.visit("", &mut |_, e| {
        if let Entry::SpectralNorm(sn) = e {
            sn.set_updates(on);
        }
    });
}

pub fn parameter_count(m: &dyn Module) -> usize {
    parameters(m).iter().map(|(_, t)| t.numel()).sum()
}

pub fn zero_grads(m: &dyn Module) {
    for (_, p) in parameters(m) {
        p.zero_grad();
    }
}

fn uniform_param(shape: &[usize], bound: f32, rng: &mut SeededRng) -> Tensor {
    Tensor::rand_uniform(shape, -bound, bound, rng).into_param()
}

fn unit(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(SN_EPS);
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Spectral normalisation by power iteration with a persistent left
/// singular vector `u`. The iteration runs outside the graph; `σ = uᵀWv`
/// stays differentiable in `W`.
pub struct SpectralNorm {
    u: Tensor,
    iterations: Cell<usize>,
    updates: Cell<bool>,
}

impl SpectralNorm {
    pub fn new(rows: usize, rng: &mut SeededRng) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.normal() as f64).collect();
        unit(&mut u);
        SpectralNorm {
            u: Tensor::from_vec(u.into_iter().map(|v| v as f32).collect(), &[rows])
                .expect("rows > 0"),
            iterations: Cell::new(1),
            updates: Cell::new(true),
        }
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn iterations(&self) -> usize {
        self.iterations.get()
    }

    pub fn set_iterations(&self, n: usize) {
        self.iterations.set(n);
    }

    pub fn updates(&self) -> bool {
        self.updates.get()
    }

    pub fn set_updates(&self, on: bool) {
        self.updates.set(on);
    }

    /// Runs the configured power iterations (when updates are on and
    /// gradients are being recorded) and returns `(u, v)` for the current
    /// weight.
    fn singular_vectors(&self, w: &[f32], cols: usize) -> (Vec<f64>, Vec<f64>) {
        let mut u: Vec<f64> = self.u.data().iter().map(|&x| x as f64).collect();
        let wt_u = |u: &[f64]| {
            let mut v = vec![0f64; cols];
            for (r, &ur) in u.iter().enumerate() {
                let row = &w[r * cols..(r + 1) * cols];
                v.iter_mut()
                    .zip(row)
                    .for_each(|(a, &x)| *a += ur * x as f64);
            }
            unit(&mut v);
            v
        };
        let mut v = wt_u(&u);
        if self.updates.get() && is_grad_enabled() {
            for _ in 0..self.iterations.get() {
                for (r, ur) in u.iter_mut().enumerate() {
                    let row = &w[r * cols..(r + 1) * cols];
                    *ur = row.iter().zip(&v).map(|(&x, &vv)| x as f64 * vv).sum();
                }
                unit(&mut u);
                v = wt_u(&u);
            }
            self.u
                .data_mut()
                .iter_mut()
                .zip(&u)
                .for_each(|(d, &s)| *d = s as f32);
        }
        (u, v)
    }

    /// Current estimate of the largest singular value (no update).
    pub fn sigma(&self, w: &Tensor) -> f64 {
        let rows = w.shape()[0];
        let cols = w.numel() / rows;
        let wd = w.data();
        let u: Vec<f64> = self.u.data().iter().map(|&x| x as f64).collect();
        let mut v = vec![0f64; cols];
        for (r, &ur) in u.iter().enumerate() {
            v.iter_mut()
                .zip(&wd[r * cols..(r + 1) * cols])
                .for_each(|(a, &x)| *a += ur * x as f64);
        }
        unit(&mut v);
        let mut s = 0.0;
        for (r, &ur) in u.iter().enumerate() {
            let wv: f64 = wd[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(&x, &vv)| x as f64 * vv)
                .sum();
            s += ur * wv;
        }
        s
    }

    /// `W / σ̂` with `W` viewed as `rows × (everything else)`.
    pub fn normalize(&self, w: &Tensor) -> Result<Tensor> {
        let rows = w.shape()[0];
        let cols = w.numel() / rows;
        let (u, v) = self.singular_vectors(&w.data(), cols);
        let mut outer = Vec::with_capacity(rows * cols);
        for &ur in &u {
            outer.extend(v.iter().map(|&vc| (ur * vc) as f32));
        }
        let uv = Tensor::from_vec(outer, w.shape())?;
        let mut sigma = w.mul(&uv)?.sum();
        if (sigma.item() as f64) < SN_EPS {
            sigma = Tensor::scalar(SN_EPS as f32);
        }
        Ok(w.div(&sigma)?)
    }
}

/// Stride-1 one-dimensional convolution, optionally spectrally normalised.
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    spec: Conv1dSpec,
    sn: Option<SpectralNorm>,
}

impl Conv1d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv1dSpec,
        spectral: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f32).sqrt();
        let weight = uniform_param(&[c_out, c_in, kernel], bound, rng);
        let bias = uniform_param(&[c_out], bound, rng);
        let sn = spectral.then(|| SpectralNorm::new(c_out, rng));
        Conv1d {
            weight,
            bias,
            spec,
            sn,
        }
    }

    /// Kernel 1, no padding.
    pub fn pointwise(c_in: usize, c_out: usize, spectral: bool, rng: &mut SeededRng) -> Self {
        Conv1d::new(c_in, c_out, 1, Conv1dSpec::same(0), spectral, rng)
    }

    /// Odd kernel with length-preserving padding.
    pub fn same(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spectral: bool,
        rng: &mut SeededRng,
    ) -> Self {
        Conv1d::new(
            c_in,
            c_out,
            kernel,
            Conv1dSpec::same(kernel / 2),
            spectral,
            rng,
        )
    }

    pub fn zero_init(self) -> Self {
        self.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        match &self.sn {
            Some(sn) => sn.normalize(&self.weight),
            None => Ok(self.weight.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 3 || x.shape()[1] != self.in_channels() {
            return Err(Error::Contract(format!(
                "conv expects [batch, {}, len], got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let w = self.effective_weight()?;
        Ok(x.conv1d_with(&w, Some(&self.bias), self.spec)?)
    }
}

impl Module for Conv1d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        f(&join(prefix, "weight"), Entry::Param(&self.weight));
        f(&join(prefix, "bias"), Entry::Param(&self.bias));
        if let Some(sn) = &self.sn {
            f(&join(prefix, "sn_u"), Entry::SpectralNorm(sn));
        }
    }
}

/// Fully connected layer `y = x·Wᵀ + b` on `[batch, in]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    sn: Option<SpectralNorm>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, spectral: bool, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        let weight = uniform_param(&[d_out, d_in], bound, rng);
        let bias = uniform_param(&[d_out], bound, rng);
        let sn = spectral.then(|| SpectralNorm::new(d_out, rng));
        Linear { weight, bias, sn }
    }

    pub fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        match &self.sn {
            Some(sn) => sn.normalize(&self.weight),
            None => Ok(self.weight.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight()?;
        Ok(x.matmul(&w.transpose(0, 1)?)?.add(&self.bias)?)
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        f(&join(prefix, "weight"), Entry::Param(&self.weight));
        f(&join(prefix, "bias"), Entry::Param(&self.bias));
        if let Some(sn) = &self.sn {
            f(&join(prefix, "sn_u"), Entry::SpectralNorm(sn));
        }
    }
}

/// Self-attention over time with 1×1 query/key/value/output projections.
pub struct SelfAttention1D {
    pub query: Conv1d,
    pub key: Conv1d,
    pub value: Conv1d,
    pub out: Conv1d,
    pub gamma: Tensor,
}

impl SelfAttention1D {
    pub fn new(nf: usize, spectral: bool, rng: &mut SeededRng) -> Self {
        let qk = (nf / 8).max(1);
        SelfAttention1D {
            query: Conv1d::pointwise(nf, qk, spectral, rng),
            key: Conv1d::pointwise(nf, qk, spectral, rng),
            value: Conv1d::pointwise(nf, nf, spectral, rng),
            out: Conv1d::pointwise(nf, nf, spectral, rng),
            gamma: Tensor::scalar(0.0).into_param(),
        }
    }

    /// `[batch, l, l]` map; row `i` holds the weights query `i` puts on
    /// every key.
    pub fn attention_map(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let scores = q.bmm(&k, true, false)?;
        Ok(scores.softmax(2)?)
    }

    /// `SA(x)`, without the γ residual.
    pub fn attend(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.attention_map(x)?;
        let v = self.value.forward(x)?;
        self.out.forward(&v.bmm(&a, false, true)?)
    }
}

impl Module for SelfAttention1D {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
        f(&join(prefix, "gamma"), Entry::Param(&self.gamma));
    }
}

/// `m∘f` with `f(x) = LR(SN(conv(x)))` and `m(y) = γ·SA(y) + y`.
pub struct MainBlock {
    pub conv: Conv1d,
    pub attention: Option<SelfAttention1D>,
}

impl MainBlock {
    pub fn new(nf: usize, self_attention: bool, rng: &mut SeededRng) -> Self {
        MainBlock {
            conv: Conv1d::same(nf, nf, 3, true, rng),
            attention: self_attention.then(|| SelfAttention1D::new(nf, true, rng)),
        }
    }

    pub fn f(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?.leaky_relu(LEAKY_SLOPE))
    }

    /// Applies the residual attention `m` to an already computed `f(x)`.
    pub fn m(&self, fx: &Tensor) -> Result<Tensor> {
        match &self.attention {
            Some(sa) => {
                let attended = sa.attend(fx)?;
                Ok(attended.mul(&sa.gamma)?.add(fx)?)
            }
            None => Ok(fx.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.m(&self.f(x)?)
    }
}

impl Module for MainBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(sa) = &self.attention {
            sa.visit(&join(prefix, "attention"), f);
        }
    }
}

/// Trainable lookup table from series index to a dense vector.
pub struct IndexEmbedding {
    pub table: Tensor,
}

impl IndexEmbedding {
    pub fn new(n_series: usize, dim: usize, rng: &mut SeededRng) -> Self {
        IndexEmbedding {
            table: Tensor::randn(&[n_series, dim], 0.01, rng).into_param(),
        }
    }

    pub fn len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        Ok(self.table.index_rows(indices)?)
    }
}

impl Module for IndexEmbedding {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'a>)) {
        f(&join(prefix, "table"), Entry::Param(&self.table));
    }
}
