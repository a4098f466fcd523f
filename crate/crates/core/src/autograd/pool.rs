use super::{check_rank, Backward, Ctx, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Float, Tensor};

/// Routes each output gradient to a single recorded input index.
struct Scatter {
    argmax: Vec<usize>,
}

impl<T: Float> Backward<T> for Scatter {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(ctx.input(0).shape().to_vec());
        for (&src, &gv) in self.argmax.iter().zip(g.data()) {
            dx.data_mut()[src] += gv;
        }
        vec![Some(dx)]
    }
}

struct GlobalAvg;

impl<T: Float> Backward<T> for GlobalAvg {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.input(0);
        let plane: usize = x.shape()[2..].iter().product();
        let inv = T::from_f64(1.0 / plane as f64);
        let mut dx = vec![T::zero(); x.numel()];
        for (p, &gv) in dx.chunks_mut(plane.max(1)).zip(g.data()) {
            p.fill(gv * inv);
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("same shape"))]
    }
}

fn pool_2x2<T: Float>(
    plane: &[T],
    base: usize,
    w: usize,
    ho: usize,
    wo: usize,
    out: &mut Vec<T>,
    argmax: &mut Vec<usize>,
) {
    for i in 0..ho {
        let r0 = &plane[2 * i * w..];
        let r1 = &plane[(2 * i + 1) * w..];
        for j in 0..wo {
            let c = 2 * j;
            let mut best = (r0[c], 2 * i * w + c);
            for (v, idx) in [
                (r0[c + 1], 2 * i * w + c + 1),
                (r1[c], (2 * i + 1) * w + c),
                (r1[c + 1], (2 * i + 1) * w + c + 1),
            ] {
                if v > best.0 {
                    best = (v, idx);
                }
            }
            out.push(best.0);
            argmax.push(base + best.1);
        }
    }
}

impl<T: Float> Tape<T> {
    /// Max pooling with a `kernel x kernel` window. Ties resolve to the first
    /// element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        check_rank(xv, 4, "max_pool2d input")?;
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        ensure!(
            kernel >= 1 && stride >= 1,
            InvalidArgument,
            "max_pool2d window and stride must be >= 1"
        );
        ensure!(
            h >= kernel && w >= kernel,
            Shape,
            "max_pool2d window {kernel} larger than input {h}x{w}"
        );
        let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        if kernel == 2 && stride == 2 {
            for (k, plane) in xv.data().chunks(h * w).enumerate() {
                pool_2x2(plane, k * h * w, w, ho, wo, &mut out, &mut argmax);
            }
            let y = Tensor::new(vec![n, c, ho, wo], out)?;
            return Ok(self.push(y, vec![x], Scatter { argmax }));
        }
        for plane_idx in 0..n * c {
            let base = plane_idx * h * w;
            let plane = &xv.data()[base..base + h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = i * stride * w + j * stride;
                    for u in 0..kernel {
                        for v in 0..kernel {
                            let idx = (i * stride + u) * w + j * stride + v;
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(base + best);
                }
            }
        }
        let y = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(y, vec![x], Scatter { argmax }))
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_rank(xv, 4, "global_avg_pool input")?;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let plane = xv.shape()[2] * xv.shape()[3];
        let y = Tensor::from_fn(vec![n, c], |nc| {
            let s: f64 = xv.data()[nc * plane..(nc + 1) * plane].iter().map(|v| v.as_f64()).sum();
            T::from_f64(s / plane as f64)
        });
        Ok(self.push(y, vec![x], GlobalAvg))
    }

    /// Spatial max per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_rank(xv, 4, "global_max_pool input")?;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let plane = xv.shape()[2] * xv.shape()[3];
        let mut argmax = Vec::with_capacity(n * c);
        let y = Tensor::from_fn(vec![n, c], |nc| {
            let base = nc * plane;
            let mut best = base;
            for i in base..base + plane {
                if xv.data()[i] > xv.data()[best] {
                    best = i;
                }
            }
            argmax.push(best);
            xv.data()[best]
        });
        Ok(self.push(y, vec![x], Scatter { argmax }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let ramp = tape.input(Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64));
        let y = tape.max_pool2d(ramp, 2, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn max_pool_ties_go_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 4, 4]), true);
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        let mut want = vec![0.0; 16];
        for idx in [0, 2, 8, 10] {
            want[idx] = 1.0;
        }
        assert_eq!(g.get(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn max_pool_window_too_large() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(vec![1, 1, 1, 3]));
        assert!(tape.max_pool2d(x, 2, 2).is_err());
    }

    #[test]
    fn global_pools() {
        let mut tape = Tape::<f64>::new();
        let c = tape.input(Tensor::full(vec![1, 1, 3, 3], 7.0));
        let a = tape.global_avg_pool(c).unwrap();
        let m = tape.global_max_pool(c).unwrap();
        assert_eq!(tape.value(a).data(), &[7.0]);
        assert_eq!(tape.value(m).data(), &[7.0]);

        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 2.0, 4.0, 10.0]).unwrap(), true);
        let a = tape.global_avg_pool(x).unwrap();
        let m = tape.global_max_pool(x).unwrap();
        assert_eq!(tape.value(a).data(), &[4.0]);
        assert_eq!(tape.value(m).data(), &[10.0]);
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }
}
