//! Batch normalization over every axis except the channel axis.

use super::{rule, Graph, Var};
use crate::error::TensorError;
use crate::tensor::{split_axis, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean and (unbiased) variance of one batch-norm layer.
///
/// The first batches are averaged with equal weight before the
/// exponential decay takes over. Otherwise the initial unit variance
/// lingers for dozens of steps and, with small initial weights, silences
/// the network in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    /// Training batches folded in so far.
    pub updates: u64,
}

impl<F: Real> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

impl<F: Real> Graph<F> {
    /// Normalizes `x` per channel along `axis`.
    ///
    /// In train mode the batch statistics are used and `stats` is updated;
    /// otherwise the running statistics act as fixed constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        stats: &mut RunningStats<F>,
        train: bool,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("axis {axis} out of range for {sx:?}"),
            ));
        }
        let (outer, ch, inner) = split_axis(&sx, axis);
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if stats.channels() != ch {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm stats",
                lhs: sx,
                rhs: vec![stats.channels()],
            });
        }
        let n = outer * inner;
        if n == 0 {
            return Err(TensorError::Empty { op: "batch_norm" });
        }
        let xv = self.value(x).data();
        let eps = BN_EPS;

        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let mut mean = vec![0f64; ch];
            for row in xv.chunks(ch * inner) {
                if inner == 1 {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v.as_f64());
                    continue;
                }
                for (m, seg) in mean.iter_mut().zip(row.chunks(inner)) {
                    *m += seg.iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            let nf = n as f64;
            mean.iter_mut().for_each(|m| *m /= nf);
            let mut var = vec![0f64; ch];
            let mut m2 = vec![0f64; ch];
            for row in xv.chunks(ch * inner) {
                if inner == 1 {
                    for ((acc, &v), &mu) in m2.iter_mut().zip(row).zip(&mean) {
                        let d = v.as_f64() - mu;
                        *acc += d * d;
                    }
                    continue;
                }
                for ((acc, seg), &mu) in m2.iter_mut().zip(row.chunks(inner)).zip(&mean) {
                    for &v in seg {
                        let d = v.as_f64() - mu;
                        *acc += d * d;
                    }
                }
            }
            let m = BN_MOMENTUM.max(1.0 / (stats.updates + 1) as f64);
            stats.updates += 1;
            for c in 0..ch {
                var[c] = m2[c] / nf;
                let unbiased = if n > 1 { m2[c] / (nf - 1.0) } else { var[c] };
                stats.mean[c] = F::of((1.0 - m) * stats.mean[c].as_f64() + m * mean[c]);
                stats.var[c] = F::of((1.0 - m) * stats.var[c].as_f64() + m * unbiased);
            }
            (mean, var)
        } else {
            (
                stats.mean.iter().map(|v| v.as_f64()).collect(),
                stats.var.iter().map(|v| v.as_f64()).collect(),
            )
        };

        let inv_std: Vec<F> = var.iter().map(|&v| F::of(1.0 / (v + eps).sqrt())).collect();
        let mean_f: Vec<F> = mean.iter().map(|&m| F::of(m)).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        let ld = ch * inner;
        for ((row, hrow), orow) in xv.chunks(ld).zip(xhat.chunks_mut(ld)).zip(out.chunks_mut(ld)) {
            if inner == 1 {
                for c in 0..ch {
                    hrow[c] = (row[c] - mean_f[c]) * inv_std[c];
                    orow[c] = gv[c] * hrow[c] + bv[c];
                }
                continue;
            }
            for (c, ((seg, hseg), oseg)) in row.chunks(inner).zip(hrow.chunks_mut(inner)).zip(orow.chunks_mut(inner)).enumerate() {
                let (mu, is, ga, be) = (mean_f[c], inv_std[c], gv[c], bv[c]);
                for ((&v, h), o) in seg.iter().zip(hseg).zip(oseg) {
                    *h = (v - mu) * is;
                    *o = ga * *h + be;
                }
            }
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(
            value,
            rule(vec![x, gamma, beta], move |ctx, g: &[F]| {
                let mut sum_dy = vec![0f64; ch];
                let mut sum_dy_xhat = vec![0f64; ch];
                let ld = ch * inner;
                for (grow, hrow) in g.chunks(ld).zip(xhat.chunks(ld)) {
                    if inner == 1 {
                        for c in 0..ch {
                            sum_dy[c] += grow[c].as_f64();
                            sum_dy_xhat[c] += (grow[c] * hrow[c]).as_f64();
                        }
                        continue;
                    }
                    for (c, (gseg, hseg)) in grow.chunks(inner).zip(hrow.chunks(inner)).enumerate() {
                        let (mut a, mut b) = (F::zero(), F::zero());
                        for (&gi, &h) in gseg.iter().zip(hseg) {
                            a += gi;
                            b += gi * h;
                        }
                        sum_dy[c] += a.as_f64();
                        sum_dy_xhat[c] += b.as_f64();
                    }
                }
                let dx = ctx.needs_grad(x).then(|| {
                    let gv = ctx.value(gamma).data();
                    let mut dx = vec![F::zero(); g.len()];
                    let nf = F::of(n as f64);
                    let scale: Vec<F> = gv.iter().zip(&inv_std).map(|(&a, &b)| a * b).collect();
                    let sd: Vec<F> = sum_dy.iter().map(|&v| F::of(v)).collect();
                    let sdx: Vec<F> = sum_dy_xhat.iter().map(|&v| F::of(v)).collect();
                    for ((drow, grow), hrow) in dx.chunks_mut(ld).zip(g.chunks(ld)).zip(xhat.chunks(ld)) {
                        if inner == 1 {
                            for c in 0..ch {
                                drow[c] = if train {
                                    scale[c] / nf * (nf * grow[c] - sd[c] - hrow[c] * sdx[c])
                                } else {
                                    scale[c] * grow[c]
                                };
                            }
                            continue;
                        }
                        let segs = drow.chunks_mut(inner).zip(grow.chunks(inner)).zip(hrow.chunks(inner));
                        for (c, ((dseg, gseg), hseg)) in segs.enumerate() {
                            let k = scale[c] / nf;
                            for ((d, &gi), &h) in dseg.iter_mut().zip(gseg).zip(hseg) {
                                *d = if train {
                                    k * (nf * gi - sd[c] - h * sdx[c])
                                } else {
                                    scale[c] * gi
                                };
                            }
                        }
                    }
                    dx
                });
                let dgamma = ctx
                    .needs_grad(gamma)
                    .then(|| sum_dy_xhat.iter().map(|&v| F::of(v)).collect());
                let dbeta = ctx
                    .needs_grad(beta)
                    .then(|| sum_dy.iter().map(|&v| F::of(v)).collect());
                vec![dx, dgamma, dbeta]
            }),
        ))
    }
}
