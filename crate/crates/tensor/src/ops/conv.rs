use crate::error::{Result, TensorError};
use crate::tensor::{GradCtx, Tensor};

/// Padding and dilation of a stride-1 one-dimensional convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub pad_left: usize,
    pub pad_right: usize,
    pub dilation: usize,
}

impl Conv1dSpec {
    pub fn same(padding: usize) -> Self {
        Conv1dSpec {
            pad_left: padding,
            pad_right: padding,
            dilation: 1,
        }
    }

    /// Left-only padding so output `t` sees inputs `<= t`.
    pub fn causal(kernel: usize, dilation: usize) -> Self {
        Conv1dSpec {
            pad_left: (kernel - 1) * dilation,
            pad_right: 0,
            dilation,
        }
    }
}

/// Output positions `t` for which tap `k` lands inside the input, and the
/// input offset of that tap.
#[inline]
fn tap_range(
    k: usize,
    spec: Conv1dSpec,
    len: usize,
    out_len: usize,
) -> Option<(usize, usize, isize)> {
    let off = (k * spec.dilation) as isize - spec.pad_left as isize;
    let lo = (-off).max(0) as usize;
    let hi = ((len as isize - off).max(0) as usize).min(out_len);
    (lo < hi).then_some((lo, hi, off))
}

impl Tensor {
    /// Stride-1 cross-correlation of `x[batch×c_in×l]` with `w[c_out×c_in×k]`.
    pub fn conv1d(&self, w: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
        self.conv1d_with(w, bias, Conv1dSpec::same(padding))
    }

    pub fn conv1d_with(
        &self,
        w: &Tensor,
        bias: Option<&Tensor>,
        spec: Conv1dSpec,
    ) -> Result<Tensor> {
        let (xs, ws) = (self.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, kernel) = (ws[0], ws[2]);
        let span = (kernel - 1) * spec.dilation + 1;
        let padded = len + spec.pad_left + spec.pad_right;
        if span > padded {
            return Err(TensorError::dim(
                "conv1d",
                format!("kernel span {span} exceeds padded input length {padded}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: vec![c_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let out_len = padded - span + 1;
        let mut out = vec![0f32; batch * c_out * out_len];
        {
            let (xd, wd) = (self.data(), w.data());
            let bd = bias.map(|b| b.data());
            for b in 0..batch {
                for co in 0..c_out {
                    let row = &mut out[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
                    if let Some(bd) = &bd {
                        row.iter_mut().for_each(|v| *v = bd[co]);
                    }
                    for ci in 0..c_in {
                        let xrow = &xd[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                        for k in 0..kernel {
                            let wv = wd[(co * c_in + ci) * kernel + k];
                            let Some((lo, hi, off)) = tap_range(k, spec, len, out_len) else {
                                continue;
                            };
                            let src =
                                &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            row[lo..hi]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, &x)| *o += wv * x);
                        }
                    }
                }
            }
        }
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, c_out, out_len],
            parents,
            Box::new(move |ctx: &GradCtx<'_>| {
                let (xd, wd) = (ctx.parents[0].data(), ctx.parents[1].data());
                let g = ctx.grad;
                let mut gx = ctx.needs[0].then(|| vec![0f32; batch * c_in * len]);
                let mut gw = ctx.needs[1].then(|| vec![0f64; c_out * c_in * kernel]);
                for b in 0..batch {
                    for co in 0..c_out {
                        let grow = &g[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
                        for ci in 0..c_in {
                            let xbase = (b * c_in + ci) * len;
                            for k in 0..kernel {
                                let widx = (co * c_in + ci) * kernel + k;
                                let Some((lo, hi, off)) = tap_range(k, spec, len, out_len) else {
                                    continue;
                                };
                                let s = (xbase as isize + lo as isize + off) as usize;
                                let e = s + (hi - lo);
                                if let Some(gx) = gx.as_mut() {
                                    let wv = wd[widx];
                                    gx[s..e]
                                        .iter_mut()
                                        .zip(&grow[lo..hi])
                                        .for_each(|(a, &gv)| *a += wv * gv);
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let dot: f32 = xd[s..e]
                                        .iter()
                                        .zip(&grow[lo..hi])
                                        .map(|(&xv, &gv)| xv * gv)
                                        .sum();
                                    gw[widx] += dot as f64;
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gw.map(|v| v.into_iter().map(|x| x as f32).collect())];
                if ctx.parents.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        let mut gb = vec![0f64; c_out];
                        for b in 0..batch {
                            for (co, acc) in gb.iter_mut().enumerate() {
                                let grow =
                                    &g[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
                                *acc += grow.iter().map(|&v| v as f64).sum::<f64>();
                            }
                        }
                        gb.into_iter().map(|v| v as f32).collect()
                    }));
                }
                grads
            }),
        ))
    }

    /// Average pooling over the last axis.
    pub fn avg_pool(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| TensorError::dim("avg_pool", "scalar input"))?;
        if kernel == 0 || stride == 0 || kernel > len {
            return Err(TensorError::dim(
                "avg_pool",
                format!("kernel {kernel} / stride {stride} invalid for length {len}"),
            ));
        }
        let out_len = (len - kernel) / stride + 1;
        let rows = self.numel() / len;
        let mut out = Vec::with_capacity(rows * out_len);
        {
            let d = self.data();
            for r in 0..rows {
                let row = &d[r * len..(r + 1) * len];
                for j in 0..out_len {
                    let s: f64 = row[j * stride..j * stride + kernel]
                        .iter()
                        .map(|&v| v as f64)
                        .sum();
                    out.push((s / kernel as f64) as f32);
                }
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let mut g = vec![0f32; rows * len];
                let inv = 1.0 / kernel as f32;
                for r in 0..rows {
                    for j in 0..out_len {
                        let gv = ctx.grad[r * out_len + j] * inv;
                        g[r * len + j * stride..r * len + j * stride + kernel]
                            .iter_mut()
                            .for_each(|v| *v += gv);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Doubles the last axis by center-aligned linear interpolation: output
    /// `j` samples source coordinate `(j + 0.5) / 2 - 0.5`, clamped to the
    /// valid range.
    pub fn upsample_linear(&self) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| TensorError::dim("upsample_linear", "scalar input"))?;
        let out_len = 2 * len;
        let taps: Vec<(usize, usize, f32)> = (0..out_len)
            .map(|j| {
                let s = ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect();
        let rows = self.numel() / len;
        let mut out = Vec::with_capacity(rows * out_len);
        {
            let d = self.data();
            for r in 0..rows {
                let row = &d[r * len..(r + 1) * len];
                out.extend(
                    taps.iter()
                        .map(|&(i0, i1, w)| row[i0] + w * (row[i1] - row[i0])),
                );
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let mut g = vec![0f32; rows * len];
                for r in 0..rows {
                    let grow = &ctx.grad[r * out_len..(r + 1) * out_len];
                    let dst = &mut g[r * len..(r + 1) * len];
                    for (&(i0, i1, w), &gv) in taps.iter().zip(grow) {
                        dst[i0] += gv * (1.0 - w);
                        dst[i1] += gv * w;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}
