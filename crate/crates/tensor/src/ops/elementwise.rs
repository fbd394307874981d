use crate::error::{Result, TensorError};
use crate::tensor::{numel_of, GradCtx, Tensor};

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out`, zero where `shape` is broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Source offsets into `a` and `b` for every element of the broadcast output.
fn broadcast_index(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(u32, u32)> {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let n = numel_of(out);
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push((ia as u32, ib as u32));
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    res
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply(self, x: f32, y: f32) -> f32 {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        }
    }

    /// Partial derivatives (d/dx, d/dy) scaled by the upstream gradient.
    #[inline]
    fn partials(self, x: f32, y: f32, g: f32) -> (f32, f32) {
        match self {
            Binary::Add => (g, g),
            Binary::Sub => (g, -g),
            Binary::Mul => (g * y, g * x),
            Binary::Div => (g / y, -g * x / (y * y)),
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, op: Binary) -> Result<Tensor> {
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
    let same = a.shape() == b.shape();
    let index = if same {
        None
    } else {
        Some(broadcast_index(a.shape(), b.shape(), &out_shape))
    };
    let data = {
        let (ad, bd) = (a.data(), b.data());
        match &index {
            None => ad
                .iter()
                .zip(bd.iter())
                .map(|(&x, &y)| op.apply(x, y))
                .collect(),
            Some(ix) => ix
                .iter()
                .map(|&(i, j)| op.apply(ad[i as usize], bd[j as usize]))
                .collect(),
        }
    };
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx: &GradCtx<'_>| {
            let (ad, bd) = (ctx.parents[0].data(), ctx.parents[1].data());
            // Broadcast inputs receive sums of many terms; accumulate in f64.
            let mut ga = ctx.needs[0].then(|| vec![0.0f64; na]);
            let mut gb = ctx.needs[1].then(|| vec![0.0f64; nb]);
            let mut visit = |k: usize, i: usize, j: usize| {
                let (dx, dy) = op.partials(ad[i], bd[j], ctx.grad[k]);
                if let Some(ga) = ga.as_mut() {
                    ga[i] += dx as f64;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += dy as f64;
                }
            };
            match &index {
                None => (0..ctx.grad.len()).for_each(|k| visit(k, k, k)),
                Some(ix) => ix
                    .iter()
                    .enumerate()
                    .for_each(|(k, &(i, j))| visit(k, i as usize, j as usize)),
            }
            let narrow = |g: Option<Vec<f64>>| g.map(|g| g.into_iter().map(|v| v as f32).collect());
            vec![narrow(ga), narrow(gb)]
        }),
    ))
}

/// Elementwise map with a derivative expressed through input and output.
pub(crate) fn unary(
    x: &Tensor,
    f: impl Fn(f32) -> f32,
    df: impl Fn(f32, f32) -> f32 + 'static,
) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |ctx: &GradCtx<'_>| {
            let xd = ctx.parents[0].data();
            let g = xd
                .iter()
                .zip(ctx.out)
                .zip(ctx.grad)
                .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                .collect();
            vec![Some(g)]
        }),
    )
}

fn softplus(v: f32) -> f32 {
    // log(1 + e^v) without overflow
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Div)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        unary(self, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        unary(self, move |v| v + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f32::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Tensor {
        unary(self, f32::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f32::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f32::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, softplus, |x, _| sigmoid(x))
    }

    /// `log(sigmoid(x))`, evaluated stably as `-softplus(-x)`.
    pub fn log_sigmoid(&self) -> Tensor {
        unary(self, |v| -softplus(-v), |x, _| sigmoid(-x))
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        unary(
            self,
            move |v| if v >= 0.0 { v } else { v * slope },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }
}
