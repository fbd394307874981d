use crate::error::{Result, TensorError};
use crate::tensor::{GradCtx, Tensor};

fn transposed(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `C[m×n] = op(A)·op(B)` with f64 accumulation of the inner products.
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
) -> Vec<f32> {
    let a_owned;
    let a = if ta {
        a_owned = transposed(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transposed(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            acc.iter_mut()
                .zip(row)
                .for_each(|(c, &bv)| *c += aip * bv as f64);
        }
        out[i * n..(i + 1) * n]
            .iter_mut()
            .zip(&acc)
            .for_each(|(o, &v)| *o = v as f32);
    }
    out
}

impl Tensor {
    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(false, false, m, k, n, &self.data(), &other.data());
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let ga = ctx.needs[0].then(|| gemm(false, true, m, n, k, ctx.grad, &b));
                let gb = ctx.needs[1].then(|| gemm(true, false, k, m, n, &a, ctx.grad));
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product `op(A)·op(B)` over a leading batch axis, where `op`
    /// optionally transposes the last two axes.
    pub fn bmm(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let batch = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(mismatch());
        }
        let k = ka;
        let (la, lb) = (m * k, k * n);
        let mut data = Vec::with_capacity(batch * m * n);
        {
            let (ad, bd) = (self.data(), other.data());
            for bi in 0..batch {
                data.extend(gemm(
                    ta,
                    tb,
                    m,
                    k,
                    n,
                    &ad[bi * la..(bi + 1) * la],
                    &bd[bi * lb..(bi + 1) * lb],
                ));
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![batch, m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let (ad, bd) = (ctx.parents[0].data(), ctx.parents[1].data());
                let mut ga = ctx.needs[0].then(|| Vec::with_capacity(batch * la));
                let mut gb = ctx.needs[1].then(|| Vec::with_capacity(batch * lb));
                for bi in 0..batch {
                    let gc = &ctx.grad[bi * m * n..(bi + 1) * m * n];
                    let a = &ad[bi * la..(bi + 1) * la];
                    let b = &bd[bi * lb..(bi + 1) * lb];
                    if let Some(ga) = ga.as_mut() {
                        // C = A·B: dA = dC·Bᵀ; stored transposed when ta.
                        ga.extend(if ta {
                            gemm(tb, true, k, n, m, b, gc)
                        } else {
                            gemm(false, !tb, m, n, k, gc, b)
                        });
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.extend(if tb {
                            gemm(true, ta, n, m, k, gc, a)
                        } else {
                            gemm(!ta, false, k, m, n, a, gc)
                        });
                    }
                }
                vec![ga, gb]
            }),
        ))
    }
}
