//! 2-D and 1-D convolutions.
//!
//! Both follow the deep-learning convention of cross-correlation: the kernel
//! is not flipped, `y[o, i, j] = b[o] + sum_{c, u, v} w[o, c, u, v] *
//! x[c, i*s + u - p, j*s + v - p]`. The 2-D path lowers each sample to a
//! column matrix and runs one GEMM per sample.

use super::{check_rank, Backward, Ctx, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{matmul_into, Float, MatRef, Tensor};

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1, stride-1, unpadded kernel sees the input plane as its own
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `u`.
    fn valid_range(&self, u: usize, extent: usize, out: usize) -> (usize, usize) {
        // need 0 <= o*s + u - p < extent
        let lo = if u >= self.pad {
            0
        } else {
            (self.pad - u).div_ceil(self.stride)
        };
        let hi = if extent + self.pad > u {
            ((extent + self.pad - u - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Float>(x: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.k {
            let (oh_lo, oh_hi) = g.valid_range(u, g.h, g.h_out);
            for v in 0..g.k {
                let (ow_lo, ow_hi) = g.valid_range(v, g.w, g.w_out);
                let row = (c * g.k + u) * g.k + v;
                let dst = &mut col[row * cols..(row + 1) * cols];
                dst.fill(T::zero());
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + u - g.pad;
                    let src_row = &plane[ih * g.w..(ih + 1) * g.w];
                    let dst_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if g.stride == 1 {
                        let iw0 = ow_lo + v - g.pad;
                        let len = ow_hi.saturating_sub(ow_lo);
                        dst_row[ow_lo..ow_lo + len].copy_from_slice(&src_row[iw0..iw0 + len]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            dst_row[ow] = src_row[ow * g.stride + v - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.k {
            let (oh_lo, oh_hi) = g.valid_range(u, g.h, g.h_out);
            for v in 0..g.k {
                let (ow_lo, ow_hi) = g.valid_range(v, g.w, g.w_out);
                let row = (c * g.k + u) * g.k + v;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + u - g.pad;
                    let dst_row = &mut plane[ih * g.w..(ih + 1) * g.w];
                    let src_row = &src[oh * g.w_out..(oh + 1) * g.w_out];
                    for ow in ow_lo..ow_hi {
                        dst_row[ow * g.stride + v - g.pad] += src_row[ow];
                    }
                }
            }
        }
    }
}

struct Conv2d {
    geom: Geometry,
}

impl<T: Float> Backward<T> for Conv2d {
    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let x = ctx.input(0);
        let w = ctx.input(1);
        let n = x.shape()[0];
        let c_out = w.shape()[0];
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let in_sz = g.c_in * g.h * g.w;
        let out_sz = c_out * cols;

        let need_x = ctx.needs_grad(0);
        let need_w = ctx.needs_grad(1);
        let mut dx = need_x.then(|| Tensor::zeros(x.shape().to_vec()));
        let mut dw = need_w.then(|| Tensor::zeros(w.shape().to_vec()));
        let db = ctx.needs_grad(2).then(|| {
            Tensor::from_fn(vec![c_out], |o| {
                let mut acc = 0.0f64;
                for s in 0..n {
                    let base = s * out_sz + o * cols;
                    acc += grad.data()[base..base + cols].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                T::from_f64(acc)
            })
        });

        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * cols]
        };
        let mut dcol = if need_x && !g.is_pointwise() {
            vec![T::zero(); rows * cols]
        } else {
            Vec::new()
        };
        let w_mat = MatRef::new(w.data(), c_out, rows);
        for s in 0..n {
            let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
            let gs = MatRef::new(&grad.data()[s * out_sz..(s + 1) * out_sz], c_out, cols);
            if let Some(dw) = dw.as_mut() {
                let col_ref = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, &mut col);
                    &col
                };
                matmul_into(dw.data_mut(), gs, MatRef::new(col_ref, rows, cols).t(), true);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[s * in_sz..(s + 1) * in_sz];
                if g.is_pointwise() {
                    matmul_into(dxs, w_mat.t(), gs, false);
                } else {
                    matmul_into(&mut dcol, w_mat.t(), gs, false);
                    col2im_add(&dcol, g, dxs);
                }
            }
        }
        vec![dx, dw, db]
    }
}

struct Conv1d {
    pad: usize,
}

impl<T: Float> Backward<T> for Conv1d {
    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.input(0);
        let w = ctx.input(1).data();
        let (n, len) = (x.shape()[0], x.shape()[2]);
        let k = w.len();
        let mut dx = ctx.needs_grad(0).then(|| Tensor::zeros(x.shape().to_vec()));
        let mut dw = vec![0.0f64; k];
        for s in 0..n {
            let xs = &x.data()[s * len..(s + 1) * len];
            let gs = &grad.data()[s * len..(s + 1) * len];
            for (i, &gi) in gs.iter().enumerate() {
                for (j, &wj) in w.iter().enumerate() {
                    let Some(src) = (i + j).checked_sub(self.pad).filter(|&p| p < len) else {
                        continue;
                    };
                    dw[j] += (gi * xs[src]).as_f64();
                    if let Some(dx) = dx.as_mut() {
                        dx.data_mut()[s * len + src] += gi * wj;
                    }
                }
            }
        }
        let dw = ctx
            .needs_grad(1)
            .then(|| Tensor::from_fn(ctx.input(1).shape().to_vec(), |j| T::from_f64(dw[j])));
        vec![dx, dw]
    }
}

impl<T: Float> Tape<T> {
    /// 2-D cross-correlation of `x: [N, C_in, H, W]` with `w: [C_out, C_in, K, K]`
    /// plus bias `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        check_rank(xv, 4, "conv2d input")?;
        check_rank(wv, 4, "conv2d weight")?;
        check_rank(bv, 1, "conv2d bias")?;
        let [n, c_in, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [c_out, wc_in, k, k2] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        ensure!(k == k2, Shape, "conv2d kernel must be square, got {k}x{k2}");
        ensure!(
            wc_in == c_in,
            Shape,
            "conv2d input has {c_in} channels, weight expects {wc_in}"
        );
        ensure!(
            bv.shape()[0] == c_out,
            Shape,
            "conv2d bias has {} entries for {c_out} filters",
            bv.shape()[0]
        );
        ensure!(stride >= 1, InvalidArgument, "conv2d stride must be >= 1");
        ensure!(
            h + 2 * pad >= k && wd + 2 * pad >= k,
            Shape,
            "conv2d kernel {k} larger than padded input {h}x{wd} (pad {pad})"
        );
        let geom = Geometry {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_sz = c_in * h * wd;
        let out_sz = c_out * cols;
        let mut out = vec![T::zero(); n * out_sz];
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * cols]
        };
        let w_mat = MatRef::new(wv.data(), c_out, rows);
        for s in 0..n {
            let xs = &xv.data()[s * in_sz..(s + 1) * in_sz];
            let col_ref = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, &geom, &mut col);
                &col
            };
            let os = &mut out[s * out_sz..(s + 1) * out_sz];
            for (o, chunk) in os.chunks_mut(cols).enumerate() {
                chunk.fill(bv.data()[o]);
            }
            matmul_into(os, w_mat, MatRef::new(col_ref, rows, cols), true);
        }
        let y = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(y, vec![x, w, b], Conv2d { geom }))
    }

    /// Same-length 1-D cross-correlation of `x: [N, 1, L]` with an odd
    /// kernel `w: [1, 1, k]`, zero padded by `(k - 1) / 2` on each side.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        check_rank(xv, 3, "conv1d input")?;
        check_rank(wv, 3, "conv1d weight")?;
        ensure!(
            xv.shape()[1] == 1 && wv.shape()[0] == 1 && wv.shape()[1] == 1,
            Shape,
            "conv1d supports a single channel, got input {:?} weight {:?}",
            xv.shape(),
            wv.shape()
        );
        let k = wv.shape()[2];
        ensure!(k % 2 == 1, InvalidArgument, "conv1d kernel length must be odd, got {k}");
        let pad = (k - 1) / 2;
        let (n, len) = (xv.shape()[0], xv.shape()[2]);
        let mut out = vec![T::zero(); n * len];
        for s in 0..n {
            let xs = &xv.data()[s * len..(s + 1) * len];
            for (i, o) in out[s * len..(s + 1) * len].iter_mut().enumerate() {
                let mut acc = T::zero();
                for (j, &wj) in wv.data().iter().enumerate() {
                    if let Some(src) = (i + j).checked_sub(pad).filter(|&p| p < len) {
                        acc += wj * xs[src];
                    }
                }
                *o = acc;
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(y, vec![x, w], Conv1d { pad }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn scalar_kernel_doubles() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = tape.input(t(vec![1, 1, 1, 1], vec![2.0]));
        let b = tape.input(t(vec![1], vec![0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(vec![1, 1, 3, 3], 2.0));
    }

    #[test]
    fn diagonal_kernel_sums_diagonal() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.input(t(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.input(t(vec![1], vec![0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn output_extent_formula() {
        for (h, k, s, p) in [(7, 3, 2, 1), (10, 3, 1, 1), (5, 5, 1, 0), (9, 2, 3, 2)] {
            let mut tape = Tape::<f64>::new();
            let x = tape.input(Tensor::full(vec![2, 3, h, h], 1.0));
            let w = tape.input(Tensor::full(vec![4, 3, k, k], 1.0));
            let b = tape.input(Tensor::zeros(vec![4]));
            let y = tape.conv2d(x, w, b, s, p).unwrap();
            let e = (h + 2 * p - k) / s + 1;
            assert_eq!(tape.value(y).shape(), &[2, 4, e, e]);
        }
    }

    #[test]
    fn padding_matches_direct_sum() {
        // direct evaluation of the cross-correlation definition
        let (n, c_in, c_out, h, wd, k, s, p) = (2, 2, 3, 5, 4, 3, 2, 1);
        let xv = Tensor::from_fn(vec![n, c_in, h, wd], |i| ((i * 37) % 11) as f64 - 5.0);
        let wv = Tensor::from_fn(vec![c_out, c_in, k, k], |i| ((i * 13) % 7) as f64 * 0.25 - 0.7);
        let bv = t(vec![c_out], vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let (x, w, b) = (tape.input(xv.clone()), tape.input(wv.clone()), tape.input(bv.clone()));
        let y = tape.conv2d(x, w, b, s, p).unwrap();
        let yv = tape.value(y);
        let (ho, wo) = (yv.shape()[2], yv.shape()[3]);
        for b_ in 0..n {
            for o in 0..c_out {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bv.data()[o];
                        for c in 0..c_in {
                            for u in 0..k {
                                for v in 0..k {
                                    let ih = (i * s + u) as isize - p as isize;
                                    let iw = (j * s + v) as isize - p as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += wv.data()[((o * c_in + c) * k + u) * k + v]
                                        * xv.data()[((b_ * c_in + c) * h + ih as usize) * wd + iw as usize];
                                }
                            }
                        }
                        let got = yv.data()[((b_ * c_out + o) * ho + i) * wo + j];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(vec![1, 2, 3, 3]));
        let w = tape.input(Tensor::zeros(vec![1, 3, 1, 1]));
        let b = tape.input(Tensor::zeros(vec![1]));
        assert!(tape.conv2d(x, w, b, 1, 0).is_err());
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![1, 1, 3], vec![1.0, 2.0, 3.0]));
        let id = tape.input(t(vec![1, 1, 3], vec![0.0, 1.0, 0.0]));
        let y = tape.conv1d(x, id).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

        let ones = tape.input(Tensor::full(vec![1, 1, 3], 1.0));
        let box3 = tape.input(Tensor::full(vec![1, 1, 3], 1.0));
        let y = tape.conv1d(ones, box3).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 2.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(vec![1, 1, 4]));
        let w = tape.input(Tensor::zeros(vec![1, 1, 2]));
        assert!(tape.conv1d(x, w).is_err());
    }
}
