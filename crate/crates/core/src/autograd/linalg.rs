//! Matrix products: plain, batched and the affine `linear` layer op.

use super::{rule, Graph, Var};
use crate::error::TensorError;
use crate::tensor::{gemm, numel, Real, Tensor};

impl<F: Real> Graph<F> {
    /// `a[M×K] · b[K×P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (a3, b3) = (self.reshape(a, &[1, sa[0], sa[1]])?, self.reshape(b, &[1, sb[0], sb[1]])?);
        let c = self.batched_matmul(a3, b3, false, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Per-batch `op(a) · op(b)` for `a[G×·×·]`, `b[G×·×·]`.
    ///
    /// With `trans_a` the stored matrix `a[g]` is `K×M`; with `trans_b` the
    /// stored `b[g]` is `P×K`.
    pub fn batched_matmul(
        &mut self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "batched_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let groups = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![F::zero(); groups * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for gi in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    &da[gi * m * k..(gi + 1) * m * k],
                    trans_a,
                    &db[gi * k * n..(gi + 1) * k * n],
                    trans_b,
                    &mut out[gi * m * n..(gi + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(&[groups, m, n], out)?;
        Ok(self.push(
            value,
            rule(vec![a, b], move |ctx, g| {
                let (va, vb) = (ctx.value(a).data(), ctx.value(b).data());
                let da = ctx.needs_grad(a).then(|| {
                    let mut d = vec![F::zero(); groups * m * k];
                    for gi in 0..groups {
                        let gc = &g[gi * m * n..(gi + 1) * m * n];
                        let bs = &vb[gi * k * n..(gi + 1) * k * n];
                        let dst = &mut d[gi * m * k..(gi + 1) * m * k];
                        if trans_a {
                            // stored A is K×M: dA = op(B) · dCᵀ
                            gemm(k, n, m, bs, trans_b, gc, true, dst, false);
                        } else {
                            // dA = dC · op(B)ᵀ
                            gemm(m, n, k, gc, false, bs, !trans_b, dst, false);
                        }
                    }
                    d
                });
                let db = ctx.needs_grad(b).then(|| {
                    let mut d = vec![F::zero(); groups * k * n];
                    for gi in 0..groups {
                        let gc = &g[gi * m * n..(gi + 1) * m * n];
                        let as_ = &va[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut d[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            // stored B is P×K: dB = dCᵀ · op(A)
                            gemm(n, m, k, gc, true, as_, trans_a, dst, false);
                        } else {
                            // dB = op(A)ᵀ · dC
                            gemm(k, m, n, as_, !trans_a, gc, false, dst, false);
                        }
                    }
                    d
                });
                vec![da, db]
            }),
        ))
    }

    /// Affine map over the last axis: `x[…×D_in] · w[D_in×D_out] (+ bias)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = numel(&sx[..sx.len() - 1]);
        let mut out = vec![F::zero(); rows * dout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            out.chunks_mut(dout).for_each(|r| r.copy_from_slice(bv));
        }
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            bias.is_some(),
        );
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            value,
            rule(inputs, move |ctx, g| {
                let dx = ctx.needs_grad(x).then(|| {
                    let mut d = vec![F::zero(); rows * din];
                    gemm(rows, dout, din, g, false, ctx.value(w).data(), true, &mut d, false);
                    d
                });
                let dw = ctx.needs_grad(w).then(|| {
                    let mut d = vec![F::zero(); din * dout];
                    gemm(din, rows, dout, ctx.value(x).data(), true, g, false, &mut d, false);
                    d
                });
                let mut grads = vec![dx, dw];
                if let Some(b) = bias {
                    grads.push(ctx.needs_grad(b).then(|| {
                        let mut d = vec![F::zero(); dout];
                        for r in g.chunks(dout) {
                            d.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                        }
                        d
                    }));
                }
                grads
            }),
        ))
    }
}
