use crate::error::{Result, TensorError};
use crate::ops::elementwise::broadcast_shape;
use crate::ops::reduce::split_axis;
use crate::tensor::{numel_of, GradCtx, Tensor};

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &GradCtx<'_>| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::dim(
                "permute",
                format!("{perm:?} is not a permutation of {n} axes"),
            ));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = row_major_strides(&in_shape);
        // source offset of every output element
        let src: Vec<usize> = {
            let total = self.numel();
            let mut idx = vec![0usize; n];
            let mut res = Vec::with_capacity(total);
            let mut off = 0usize;
            for _ in 0..total {
                res.push(off);
                for d in (0..n).rev() {
                    idx[d] += 1;
                    off += in_strides[perm[d]];
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    off -= in_strides[perm[d]] * out_shape[d];
                    idx[d] = 0;
                }
            }
            res
        };
        let data = {
            let d = self.data();
            src.iter().map(|&s| d[s]).collect()
        };
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let mut g = vec![0f32; ctx.grad.len()];
                for (k, &s) in src.iter().enumerate() {
                    g[s] = ctx.grad[k];
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.ndim()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(TensorError::dim(
                "transpose",
                format!("axes ({a}, {b}) out of range for shape {:?}", self.shape()),
            ));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Expands size-1 (or missing leading) axes to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if broadcast_shape(self.shape(), shape).as_deref() != Some(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        // Route through the broadcasting add so the adjoint reduction is shared.
        self.add(&Tensor::zeros(shape))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn cat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| TensorError::dim("cat", "no tensors to concatenate"))?;
        if axis >= first.ndim() {
            return Err(TensorError::dim(
                "cat",
                format!("axis {axis} out of range for shape {:?}", first.shape()),
            ));
        }
        for t in tensors {
            let ok = t.ndim() == first.ndim()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "cat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = vec![0f32; outer * total * inner];
        let mut offset = 0;
        for (t, &len) in tensors.iter().zip(&lens) {
            let d = t.data();
            let chunk = len * inner;
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                out[dst..dst + chunk].copy_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
            offset += len;
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            out,
            shape,
            tensors.to_vec(),
            Box::new(move |ctx: &GradCtx<'_>| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for (p, &len) in lens.iter().enumerate() {
                    if ctx.needs[p] {
                        let chunk = len * inner;
                        let mut g = vec![0f32; outer * chunk];
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            g[o * chunk..(o + 1) * chunk]
                                .copy_from_slice(&ctx.grad[src..src + chunk]);
                        }
                        grads.push(Some(g));
                    } else {
                        grads.push(None);
                    }
                    offset += len;
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape()[axis] {
            return Err(TensorError::dim(
                "narrow",
                format!(
                    "range {start}..{} on axis {axis} invalid for shape {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let chunk = len * inner;
        let mut out = Vec::with_capacity(outer * chunk);
        {
            let d = self.data();
            for o in 0..outer {
                let s = (o * full + start) * inner;
                out.extend_from_slice(&d[s..s + chunk]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let mut g = vec![0f32; outer * full * inner];
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    g[s..s + chunk].copy_from_slice(&ctx.grad[o * chunk..(o + 1) * chunk]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Gathers rows of a 2-D table; the adjoint scatters back into the
    /// selected rows only.
    pub fn index_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(TensorError::dim(
                "index_rows",
                format!("expected a 2-D table, got shape {:?}", self.shape()),
            ));
        }
        let (n, width) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Index { index: bad, len: n });
        }
        if rows.is_empty() {
            return Err(TensorError::dim("index_rows", "empty row selection"));
        }
        let mut out = Vec::with_capacity(rows.len() * width);
        {
            let d = self.data();
            for &r in rows {
                out.extend_from_slice(&d[r * width..(r + 1) * width]);
            }
        }
        let rows = rows.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![rows.len(), width],
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let mut g = vec![0f32; n * width];
                for (k, &r) in rows.iter().enumerate() {
                    let src = &ctx.grad[k * width..(k + 1) * width];
                    g[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
                vec![Some(g)]
            }),
        ))
    }
}
