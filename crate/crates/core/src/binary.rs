//! Multiplication-free kernels for products involving {0,1} matrices.
//!
//! Every kernel also returns the number of accumulate operations it
//! performed: one per (set bit, output column) pair it visits.

use crate::error::TensorError;
use crate::tensor::Real;

/// Row-major {0,1} matrix packed 64 columns per word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words: usize,
    bits: Vec<u64>,
    row_ones: Vec<u32>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words = cols.div_ceil(64);
        BitMatrix {
            rows,
            cols,
            words,
            bits: vec![0; rows * words],
            row_ones: vec![0; rows],
        }
    }

    /// Packs a row-major `rows×cols` slice; any value other than 0 or 1 is
    /// rejected.
    pub fn from_values<F: Real>(values: &[F], rows: usize, cols: usize) -> Result<Self, TensorError> {
        Self::pack(values, rows, cols, false)
    }

    /// Packs the transpose of a row-major `rows×cols` slice.
    pub fn from_values_transposed<F: Real>(values: &[F], rows: usize, cols: usize) -> Result<Self, TensorError> {
        Self::pack(values, rows, cols, true)
    }

    fn pack<F: Real>(values: &[F], rows: usize, cols: usize, transpose: bool) -> Result<Self, TensorError> {
        if values.len() != rows * cols {
            return Err(TensorError::ElementCount {
                shape: vec![rows, cols],
                expected: rows * cols,
                actual: values.len(),
            });
        }
        let (out_rows, out_cols) = if transpose { (cols, rows) } else { (rows, cols) };
        let mut m = BitMatrix::zeros(out_rows, out_cols);
        for (index, &v) in values.iter().enumerate() {
            if v == F::zero() {
                continue;
            }
            if v != F::one() {
                return Err(TensorError::NotBinary {
                    op: "bit pack",
                    index,
                    value: v.as_f64(),
                });
            }
            let (r, c) = (index / cols, index % cols);
            let (r, c) = if transpose { (c, r) } else { (r, c) };
            m.set(r, c);
        }
        Ok(m)
    }

    fn set(&mut self, r: usize, c: usize) {
        let w = &mut self.bits[r * self.words + c / 64];
        let mask = 1u64 << (c % 64);
        if *w & mask == 0 {
            *w |= mask;
            self.row_ones[r] += 1;
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.words + c / 64] >> (c % 64) & 1 == 1
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.bits[r * self.words..(r + 1) * self.words]
    }

    pub fn ones(&self) -> u64 {
        self.row_ones.iter().map(|&c| c as u64).sum()
    }

    /// Indices of set bits in row `r`, ascending.
    pub fn row_indices(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(r).iter().enumerate().flat_map(|(wi, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + b)
            })
        })
    }
}

/// `a · bᵀ` for packed `a[M×K]` and `b[P×K]`, as `M×P` counts.
///
/// Each output entry is `popcount(a_row AND b_row)`. The accumulate count is
/// the number of set bits of `a` times `P`.
pub fn and_popcount(a: &BitMatrix, b: &BitMatrix) -> Result<(Vec<u32>, u64), TensorError> {
    if a.cols != b.cols {
        return Err(TensorError::ShapeMismatch {
            op: "and_popcount",
            lhs: vec![a.rows, a.cols],
            rhs: vec![b.rows, b.cols],
        });
    }
    let mut out = vec![0u32; a.rows * b.rows];
    let mut accumulates = 0u64;
    for i in 0..a.rows {
        let ar = a.row(i);
        let dst = &mut out[i * b.rows..(i + 1) * b.rows];
        if a.row_ones[i] == 0 {
            continue;
        }
        for (j, d) in dst.iter_mut().enumerate() {
            *d = ar.iter().zip(b.row(j)).map(|(x, y)| (x & y).count_ones()).sum();
            accumulates += a.row_ones[i] as u64;
        }
    }
    Ok((out, accumulates))
}

/// `mask · values` for binary `mask[M×K]` and integer `values[K×P]`.
///
/// Row `k` of `values` is added into output row `i` whenever `mask[i][k]`
/// is set; no multiplications occur.
pub fn mask_left(mask: &BitMatrix, values: &[u32], p: usize) -> Result<(Vec<u32>, u64), TensorError> {
    if values.len() != mask.cols * p {
        return Err(TensorError::ShapeMismatch {
            op: "mask_left",
            lhs: vec![mask.rows, mask.cols],
            rhs: vec![values.len() / p.max(1), p],
        });
    }
    let mut out = vec![0u32; mask.rows * p];
    let mut accumulates = 0u64;
    for i in 0..mask.rows {
        let dst = &mut out[i * p..(i + 1) * p];
        for k in mask.row_indices(i) {
            dst.iter_mut().zip(&values[k * p..(k + 1) * p]).for_each(|(d, &v)| *d += v);
            accumulates += p as u64;
        }
    }
    Ok((out, accumulates))
}

/// `values · mask` for integer `values[M×K]` and binary `mask[K×P]`.
///
/// For every set bit `mask[k][j]`, column `k` of `values` is added into
/// column `j` of the output.
pub fn mask_right(values: &[u32], m: usize, mask: &BitMatrix) -> Result<(Vec<u32>, u64), TensorError> {
    let k = mask.rows;
    let p = mask.cols;
    if values.len() != m * k {
        return Err(TensorError::ShapeMismatch {
            op: "mask_right",
            lhs: vec![m, values.len() / m.max(1)],
            rhs: vec![k, p],
        });
    }
    let mut out = vec![0u32; m * p];
    let mut accumulates = 0u64;
    for kk in 0..k {
        for j in mask.row_indices(kk) {
            for i in 0..m {
                out[i * p + j] += values[i * k + kk];
            }
            accumulates += m as u64;
        }
    }
    Ok((out, accumulates))
}

/// Dot product of two {0,1} vectors by masked accumulation: the entries of
/// `k` at positions where `q` is 1 are summed.
pub fn sparse_dot(q: &[u8], k: &[u8]) -> Result<u32, TensorError> {
    if q.len() != k.len() {
        return Err(TensorError::ShapeMismatch {
            op: "sparse_dot",
            lhs: vec![q.len()],
            rhs: vec![k.len()],
        });
    }
    let mut acc = 0u32;
    for (i, (&qi, &ki)) in q.iter().zip(k).enumerate() {
        if qi > 1 || ki > 1 {
            return Err(TensorError::NotBinary {
                op: "sparse_dot",
                index: i,
                value: qi.max(ki) as f64,
            });
        }
        if qi == 1 {
            acc += ki as u32;
        }
    }
    Ok(acc)
}

/// Naive triple-loop float product `a[M×K] · b[K×P]`, kept as the oracle
/// for the packed kernels.
pub fn float_matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * p];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            for j in 0..p {
                out[i * p + j] += av * b[kk * p + j];
            }
        }
    }
    out
}
