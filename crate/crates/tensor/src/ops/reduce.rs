use crate::error::{Result, TensorError};
use crate::tensor::{GradCtx, Tensor};

/// `(outer, len, inner)` view of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(TensorError::dim(
            op,
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    /// Sum of all elements as a scalar, accumulated in f64.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s as f32],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let inv = 1.0 / n as f32;
        Tensor::from_op(
            vec![(s / n as f64) as f32],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| vec![Some(vec![ctx.grad[0] * inv; n])]),
        )
    }

    /// Population standard deviation over all elements. The adjoint at zero
    /// spread is taken as zero.
    pub fn std_all(&self) -> Tensor {
        let n = self.numel();
        let (mean, std) = {
            let d = self.data();
            let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        Tensor::from_op(
            vec![std as f32],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                if std == 0.0 {
                    return vec![Some(vec![0.0; n])];
                }
                let scale = ctx.grad[0] as f64 / (n as f64 * std);
                let g = ctx.parents[0]
                    .data()
                    .iter()
                    .map(|&v| ((v as f64 - mean) * scale) as f32)
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("sum_axis", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![0f64; outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for k in 0..len {
                    let row = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                    let acc = &mut out[o * inner..(o + 1) * inner];
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            out.into_iter().map(|v| v as f32).collect(),
            shape,
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let mut g = vec![0f32; outer * len * inner];
                for o in 0..outer {
                    let src = &ctx.grad[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        g[(o * len + k) * inner..(o * len + k + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("mean_axis", self, axis)?;
        let len = self.shape()[axis];
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f32))
    }

    /// Maximum along `axis` (removed from the shape). Ties send the gradient
    /// to the first maximal element.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("max_axis", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![f32::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        let v = d[(o * len + k) * inner + i];
                        let slot = o * inner + i;
                        if v > out[slot] || k == 0 {
                            out[slot] = v;
                            arg[slot] = k;
                        }
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let mut g = vec![0f32; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        g[(o * len + arg[slot]) * inner + i] = ctx.grad[slot];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![0f32; self.numel()];
        {
            let d = self.data();
            let mut e = vec![0f64; len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let m = (0..len).map(|k| d[at(k)]).fold(f32::NEG_INFINITY, f32::max);
                    let mut z = 0f64;
                    for (k, ek) in e.iter_mut().enumerate() {
                        *ek = ((d[at(k)] - m) as f64).exp();
                        z += *ek;
                    }
                    for (k, ek) in e.iter().enumerate() {
                        out[at(k)] = (ek / z) as f32;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let (y, gy) = (ctx.out, ctx.grad);
                let mut g = vec![0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| (y[at(k)] * gy[at(k)]) as f64).sum();
                        for k in 0..len {
                            g[at(k)] = y[at(k)] * (gy[at(k)] - dot as f32);
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}
