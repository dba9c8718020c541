//! 3×3 same-padding convolution (lowered to GEMM via im2col) and 2×2 max-pool.

use rayon::prelude::*;

use super::{rule, Graph, Var};
use crate::error::TensorError;
use crate::tensor::{gemm, Real, Tensor};

const K: usize = 3;
const PAD: usize = 1;

/// Target width of the column matrix; images are grouped until they fill it.
const GEMM_COLS: usize = 1024;

/// Unfolds one `C×H×W` image into `H·W` columns, starting at column `at`, of
/// a `(C·9)×ld` column matrix.
fn im2col<F: Real>(img: &[F], c: usize, h: usize, w: usize, cols: &mut [F], ld: usize, at: usize) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * K + ky) * K + kx;
                let dst = &mut cols[row * ld + at..row * ld + at + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - PAD as isize;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, v) in line.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - PAD as isize;
                        *v = if sx < 0 || sx >= w as isize {
                            F::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize, img: &mut [F], ld: usize, at: usize) {
    let hw = h * w;
    img.iter_mut().for_each(|v| *v = F::zero());
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * K + ky) * K + kx;
                let src = &cols[row * ld + at..row * ld + at + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - PAD as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - PAD as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Real> Graph<F> {
    /// Cross-correlation of `x[B×C×H×W]` with `w[O×C×3×3]`, stride 1, zero
    /// padding 1, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != K || sw[3] != K || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let o = sw[0];
        let (hw, ck) = (h * wd, c * K * K);
        // images per GEMM; fixed by shape alone so results do not depend on
        // the thread count
        let per = GEMM_COLS.div_ceil(hw).clamp(1, b.max(1));
        let mut out = vec![F::zero(); b * o * hw];
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            out.par_chunks_mut(per * o * hw).enumerate().for_each(|(ci, dst)| {
                let n = dst.len() / (o * hw);
                let first = ci * per;
                let ld = n * hw;
                let mut cols = vec![F::zero(); ck * ld];
                for i in 0..n {
                    let img = &xv[(first + i) * c * hw..(first + i + 1) * c * hw];
                    im2col(img, c, h, wd, &mut cols, ld, i * hw);
                }
                let mut tmp = vec![F::zero(); o * ld];
                gemm(o, ck, ld, wv, false, &cols, false, &mut tmp, false);
                for i in 0..n {
                    for oc in 0..o {
                        dst[(i * o + oc) * hw..(i * o + oc + 1) * hw]
                            .copy_from_slice(&tmp[oc * ld + i * hw..oc * ld + (i + 1) * hw]);
                    }
                }
            });
        }
        let value = Tensor::new(&[b, o, h, wd], out)?;
        Ok(self.push(
            value,
            rule(vec![x, w], move |ctx, g| {
                let (xv, wv) = (ctx.value(x).data(), ctx.value(w).data());
                let need_x = ctx.needs_grad(x);
                let need_w = ctx.needs_grad(w);
                // per-group partials, reduced afterwards in group order
                let groups = b.div_ceil(per);
                let parts: Vec<(Option<Vec<F>>, Option<Vec<F>>)> = (0..groups)
                    .into_par_iter()
                    .map(|gi| {
                        let first = gi * per;
                        let n = per.min(b - first);
                        let ld = n * hw;
                        let mut gy = vec![F::zero(); o * ld];
                        for i in 0..n {
                            for oc in 0..o {
                                let src = &g[((first + i) * o + oc) * hw..((first + i) * o + oc + 1) * hw];
                                gy[oc * ld + i * hw..oc * ld + (i + 1) * hw].copy_from_slice(src);
                            }
                        }
                        let dw = need_w.then(|| {
                            let mut cols = vec![F::zero(); ck * ld];
                            for i in 0..n {
                                let img = &xv[(first + i) * c * hw..(first + i + 1) * c * hw];
                                im2col(img, c, h, wd, &mut cols, ld, i * hw);
                            }
                            let mut dw = vec![F::zero(); o * ck];
                            gemm(o, ld, ck, &gy, false, &cols, true, &mut dw, false);
                            dw
                        });
                        let dx = need_x.then(|| {
                            let mut dcols = vec![F::zero(); ck * ld];
                            gemm(ck, o, ld, wv, true, &gy, false, &mut dcols, false);
                            let mut dx = vec![F::zero(); n * c * hw];
                            for (i, img) in dx.chunks_mut(c * hw).enumerate() {
                                col2im(&dcols, c, h, wd, img, ld, i * hw);
                            }
                            dx
                        });
                        (dx, dw)
                    })
                    .collect();
                let mut dx_all = need_x.then(|| Vec::with_capacity(b * c * hw));
                let mut dw_all = need_w.then(|| vec![F::zero(); o * ck]);
                for (dx, dw) in parts {
                    if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                        all.extend_from_slice(&dx);
                    }
                    if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
                        all.iter_mut().zip(&dw).for_each(|(a, &v)| *a += v);
                    }
                }
                vec![dx_all, dw_all]
            }),
        ))
    }

    /// 2×2 max-pool with stride 2 over `x[B×C×H×W]`; `H` and `W` must be even.
    /// The gradient goes to the first maximum in row-major window order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0 {
            return Err(TensorError::invalid(
                "max_pool2d",
                format!("needs rank-4 input with even spatial dims, got {sx:?}"),
            ));
        }
        let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let total = xv.len();
        let value = Tensor::new(&[sx[0], sx[1], oh, ow], out)?;
        Ok(self.push(
            value,
            rule(vec![x], move |_, g| {
                let mut dx = vec![F::zero(); total];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i as usize] += gv;
                }
                vec![Some(dx)]
            }),
        ))
    }
}
