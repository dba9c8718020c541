//! Softmax over the last axis and mean cross-entropy.

use super::{rule, Graph, Var};
use crate::error::TensorError;
use crate::tensor::{Real, Tensor};

fn softmax_row<F: Real>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

impl<F: Real> Graph<F> {
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var, TensorError> {
        let src = self.value(x);
        let Some(&cols) = src.shape().last() else {
            return Err(TensorError::invalid("softmax", "scalar input"));
        };
        if cols == 0 {
            return Err(TensorError::Empty { op: "softmax" });
        }
        let mut out = vec![F::zero(); src.len()];
        for (r, o) in src.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(r, o);
        }
        let value = Tensor::new(src.shape(), out)?;
        Ok(self.push(
            value,
            rule(vec![x], move |ctx, g| {
                let y = ctx.output().data();
                let mut dx = vec![F::zero(); g.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot = yr.iter().zip(gr).fold(F::zero(), |a, (&yi, &gi)| a + yi * gi);
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean negative log-likelihood of `labels` under `logits[B×C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let src = self.value(logits);
        if src.rank() != 2 || src.shape()[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: src.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (src.shape()[0], src.shape()[1]);
        if b == 0 || c == 0 {
            return Err(TensorError::Empty { op: "cross_entropy" });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = vec![F::zero(); b * c];
        let mut total = 0f64;
        for (i, (row, p)) in src.data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).fold(F::zero(), |a, e| a + e).ln() + max;
            total += (lse - row[labels[i]]).as_f64();
            softmax_row(row, p);
        }
        let labels = labels.to_vec();
        let value = Tensor::scalar(F::of(total / b as f64));
        Ok(self.push(
            value,
            rule(vec![logits], move |_, g| {
                let scale = g[0] / F::of(b as f64);
                let mut dx = probs.clone();
                for (i, row) in dx.chunks_mut(c).enumerate() {
                    row[labels[i]] -= F::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(dx)]
            }),
        ))
    }
}
