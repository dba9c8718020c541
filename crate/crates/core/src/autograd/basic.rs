//! Elementwise, shape and reduction ops.

use super::{ensure_same_shape, rule, Graph, Var};
use crate::error::TensorError;
use crate::tensor::{numel, split_axis, Real, Tensor};

impl<F: Real> Graph<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure_same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(
            out,
            rule(vec![a, b], move |ctx, g| {
                vec![
                    ctx.needs_grad(a).then(|| g.to_vec()),
                    ctx.needs_grad(b).then(|| g.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure_same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(
            out,
            rule(vec![a, b], move |ctx, g: &[F]| {
                vec![
                    ctx.needs_grad(a).then(|| g.to_vec()),
                    ctx.needs_grad(b).then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure_same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(
            out,
            rule(vec![a, b], move |ctx, g| {
                let da = ctx.needs_grad(a).then(|| {
                    let vb = ctx.value(b).data();
                    g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect()
                });
                let db = ctx.needs_grad(b).then(|| {
                    let va = ctx.value(a).data();
                    g.iter().zip(va).map(|(&gi, &x)| gi * x).collect()
                });
                vec![da, db]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let c = F::of(factor);
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(
            out,
            rule(vec![a], move |_, g| vec![Some(g.iter().map(|&v| v * c).collect())]),
        ))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var, TensorError> {
        let c = F::of(offset);
        let out = self.value(a).map(|x| x + c);
        Ok(self.push(out, rule(vec![a], move |_, g| vec![Some(g.to_vec())])))
    }

    /// Multiplies every element by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let factor = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * factor);
        Ok(self.push(
            out,
            rule(vec![a, s], move |ctx, g| {
                let da = ctx
                    .needs_grad(a)
                    .then(|| g.iter().map(|&v| v * factor).collect());
                let ds = ctx.needs_grad(s).then(|| {
                    let sum = g
                        .iter()
                        .zip(ctx.value(a).data())
                        .fold(F::zero(), |acc, (&gi, &x)| acc + gi * x);
                    vec![sum]
                });
                vec![da, ds]
            }),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, negative_slope: f64) -> Result<Var, TensorError> {
        let slope = F::of(negative_slope);
        let out = self
            .value(a)
            .map(|x| if x > F::zero() { x } else { x * slope });
        Ok(self.push(
            out,
            rule(vec![a], move |ctx, g| {
                let x = ctx.value(a).data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > F::zero() { gi } else { gi * slope })
                        .collect(),
                )]
            }),
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(sigmoid);
        Ok(self.push(
            out,
            rule(vec![a], move |ctx, g| {
                let s = ctx.output().data();
                vec![Some(
                    g.iter()
                        .zip(s)
                        .map(|(&gi, &si)| gi * (si * (F::one() - si)))
                        .collect(),
                )]
            }),
        ))
    }

    /// Same values, cut from the tape.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.input(value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, rule(vec![a], move |_, g| vec![Some(g.to_vec())])))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let src = self.value(a);
        let rank = src.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let (data, shape) = permute_data(src.data(), src.shape(), perm);
        let out = Tensor::new(&shape, data)?;
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(
            out,
            rule(vec![a], move |ctx, g| {
                let (back, _) = permute_data(g, ctx.output().shape(), &inverse);
                vec![Some(back)]
            }),
        ))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn narrow0(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let src = self.value(a);
        if src.rank() == 0 || start + len > src.shape()[0] {
            return Err(TensorError::invalid(
                "narrow0",
                format!("range {start}..{} outside {:?}", start + len, src.shape()),
            ));
        }
        let row = numel(&src.shape()[1..]);
        let mut shape = src.shape().to_vec();
        shape[0] = len;
        let total = src.len();
        let out = Tensor::new(&shape, src.data()[start * row..(start + len) * row].to_vec())?;
        Ok(self.push(
            out,
            rule(vec![a], move |_, g| {
                let mut full = vec![F::zero(); total];
                full[start * row..(start + len) * row].copy_from_slice(g);
                vec![Some(full)]
            }),
        ))
    }

    /// Concatenates along the leading axis. A var may appear more than once.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Empty { op: "concat0" });
        };
        let tail = self.value(first).shape().get(1..).unwrap_or(&[]).to_vec();
        if self.value(first).rank() == 0 {
            return Err(TensorError::invalid("concat0", "scalars cannot be concatenated"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat0",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            extents.push((data.len(), t.len()));
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        let inputs = parts.to_vec();
        Ok(self.push(
            out,
            rule(parts.to_vec(), move |ctx, g| {
                extents
                    .iter()
                    .zip(&inputs)
                    .map(|(&(off, len), &p)| ctx.needs_grad(p).then(|| g[off..off + len].to_vec()))
                    .collect()
            }),
        ))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let src = self.value(a);
        if axis >= src.rank() {
            return Err(TensorError::invalid(
                "mean_axis",
                format!("axis {axis} out of range for {:?}", src.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        if len == 0 {
            return Err(TensorError::Empty { op: "mean_axis" });
        }
        let inv = F::one() / F::of(len as f64);
        let mut data = vec![F::zero(); outer * inner];
        let x = src.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(&x[base..base + inner]).for_each(|(d, &v)| *d += v);
            }
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            rule(vec![a], move |_, g| {
                let mut dx = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        dx[base..base + inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, &gv)| *d = gv * inv);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let src = self.value(a);
        let n = src.len();
        let total = src.data().iter().fold(F::zero(), |acc, &v| acc + v);
        Ok(self.push(
            Tensor::scalar(total),
            rule(vec![a], move |_, g| vec![Some(vec![g[0]; n])]),
        ))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Empty { op: "mean_all" });
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Copies `data` (shaped `shape`) into the axis order given by `perm`.
pub(crate) fn permute_data<F: Copy>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    (out, out_shape)
}
