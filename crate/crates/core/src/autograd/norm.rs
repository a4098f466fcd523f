use super::{check_rank, Backward, Ctx, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and (unbiased) variance used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::full(vec![channels], T::one()),
        }
    }

    /// Exponential moving average update with momentum 0.1.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = BN_MOMENTUM;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = T::from_f64((1.0 - m) * r.as_f64() + m * b);
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&batch.unbiased_var) {
            *r = T::from_f64((1.0 - m) * r.as_f64() + m * b);
        }
    }
}

/// Statistics of one training batch, returned so the caller can update the
/// running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running estimates.
    Eval(&'a RunningStats<T>),
}

struct BnTrain<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

/// Per-channel sums of `g` and `g * xhat`.
fn grad_sums<T: Float>(g: &[T], xhat: &[T], c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (k, (gp, xp)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
        let ch = k % c;
        let (mut a, mut b) = (0.0f64, 0.0f64);
        for (&gi, &xi) in gp.iter().zip(xp) {
            a += gi.as_f64();
            b += gi.as_f64() * xi.as_f64();
        }
        sum_g[ch] += a;
        sum_gx[ch] += b;
    }
    (sum_g, sum_gx)
}

fn affine_grads<T: Float>(ctx: &Ctx<'_, T>, sum_g: &[f64], sum_gx: &[f64]) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let c = sum_g.len();
    (
        ctx.needs_grad(1)
            .then(|| Tensor::from_fn(vec![c], |ch| T::from_f64(sum_gx[ch]))),
        ctx.needs_grad(2)
            .then(|| Tensor::from_fn(vec![c], |ch| T::from_f64(sum_g[ch]))),
    )
}

impl<T: Float> Backward<T> for BnTrain<T> {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.input(0);
        let gamma = ctx.input(1).data();
        let (n, c, plane) = dims(x);
        let count = (n * plane) as f64;
        let (sum_g, sum_gx) = grad_sums(g.data(), &self.xhat, c, plane);
        // dx = k (g - sum_g / count - xhat * sum_gx / count),  k = gamma * inv_std
        let dx = ctx.needs_grad(0).then(|| {
            let mut out = vec![T::zero(); x.numel()];
            for (k, ((op, gp), xp)) in out
                .chunks_mut(plane)
                .zip(g.data().chunks(plane))
                .zip(self.xhat.chunks(plane))
                .enumerate()
            {
                let ch = k % c;
                let scale = gamma[ch].as_f64() * self.inv_std[ch];
                let a = T::from_f64(scale);
                let b = T::from_f64(-scale * sum_gx[ch] / count);
                let d = T::from_f64(-scale * sum_g[ch] / count);
                for ((o, &gi), &xi) in op.iter_mut().zip(gp).zip(xp) {
                    *o = a * gi + b * xi + d;
                }
            }
            Tensor::new(x.shape().to_vec(), out).expect("same shape")
        });
        let (dgamma, dbeta) = affine_grads(ctx, &sum_g, &sum_gx);
        vec![dx, dgamma, dbeta]
    }
}

struct BnEval<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Float> Backward<T> for BnEval<T> {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.input(0);
        let gamma = ctx.input(1).data();
        let (_, c, plane) = dims(x);
        let dx = ctx.needs_grad(0).then(|| {
            let mut out = g.data().to_vec();
            for (k, op) in out.chunks_mut(plane).enumerate() {
                let a = gamma[k % c] * self.inv_std[k % c];
                op.iter_mut().for_each(|v| *v *= a);
            }
            Tensor::new(x.shape().to_vec(), out).expect("same shape")
        });
        let (sum_g, sum_gx) = grad_sums(g.data(), &self.xhat, c, plane);
        let (dgamma, dbeta) = affine_grads(ctx, &sum_g, &sum_gx);
        vec![dx, dgamma, dbeta]
    }
}

fn dims<T: Copy>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2] * s[3])
}

/// `xhat = (x - mean) * inv_std` and `y = gamma * xhat + beta`, plane by plane.
fn normalize<T: Float>(
    x: &[T],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    beta: &[T],
    plane: usize,
) -> (Vec<T>, Vec<T>) {
    let c = mean.len();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for (k, ((xp, hp), yp)) in x
        .chunks(plane)
        .zip(xhat.chunks_mut(plane))
        .zip(y.chunks_mut(plane))
        .enumerate()
    {
        let ch = k % c;
        let s = T::from_f64(inv_std[ch]);
        let shift = T::from_f64(-mean[ch] * inv_std[ch]);
        let (gm, bt) = (gamma[ch], beta[ch]);
        for ((&xi, h), o) in xp.iter().zip(hp.iter_mut()).zip(yp.iter_mut()) {
            let v = xi * s + shift;
            *h = v;
            *o = gm * v + bt;
        }
    }
    (xhat, y)
}

impl<T: Float> Tape<T> {
    /// Batch normalization over `[N, C, H, W]` with per-channel affine `gamma`,
    /// `beta`. In train mode the batch statistics are returned.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        check_rank(xv, 4, "batch_norm2d input")?;
        let (n, c, plane) = dims(xv);
        ensure!(
            gv.shape() == [c] && bv.shape() == [c],
            Shape,
            "batch_norm2d affine params {:?}/{:?} for {c} channels",
            gv.shape(),
            bv.shape()
        );
        match mode {
            BnMode::Train => {
                ensure!(
                    n >= 2,
                    InvalidArgument,
                    "batch_norm2d in train mode needs a batch of at least 2, got {n}"
                );
                let count = (n * plane) as f64;
                let mut mean = vec![0.0f64; c];
                for (k, p) in xv.data().chunks(plane).enumerate() {
                    mean[k % c] += p.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0f64; c];
                for (k, p) in xv.data().chunks(plane).enumerate() {
                    let m = mean[k % c];
                    var[k % c] += p.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / count + BN_EPS).sqrt()).collect();
                let (xhat, y) = normalize(xv.data(), &mean, &inv_std, gv.data(), bv.data(), plane);
                let y = Tensor::new(xv.shape().to_vec(), y)?;
                let stats = BatchStats {
                    unbiased_var: var.iter().map(|v| v / (count - 1.0)).collect(),
                    mean,
                };
                let out = self.push(y, vec![x, gamma, beta], BnTrain { xhat, inv_std });
                Ok((out, Some(stats)))
            }
            BnMode::Eval(running) => {
                ensure!(
                    running.mean.shape() == [c] && running.var.shape() == [c],
                    Shape,
                    "running stats do not cover {c} channels"
                );
                let inv_std: Vec<f64> = running
                    .var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v.as_f64() + BN_EPS).sqrt())
                    .collect();
                let mean: Vec<f64> = running.mean.data().iter().map(|v| v.as_f64()).collect();
                let (xhat, y) = normalize(xv.data(), &mean, &inv_std, gv.data(), bv.data(), plane);
                let y = Tensor::new(xv.shape().to_vec(), y)?;
                let inv_std = inv_std.into_iter().map(T::from_f64).collect();
                let out = self.push(y, vec![x, gamma, beta], BnEval { xhat, inv_std });
                Ok((out, None))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_input_passes_through() {
        // per-channel mean 0, biased variance 1
        let data = vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![2, 1, 2, 2], data.clone()).unwrap());
        let g = tape.input(Tensor::full(vec![1], 1.0));
        let b = tape.input(Tensor::zeros(vec![1]));
        let (y, stats) = tape.batch_norm2d(x, g, b, BnMode::Train).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, e) in tape.value(y).data().iter().zip(&data) {
            assert!((a - e * scale).abs() < 1e-15);
        }
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert!((stats.unbiased_var[0] - 8.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_fn(vec![3, 2, 2, 2], |i| (i as f32).sin() * 4.0));
        let g = tape.input(Tensor::zeros(vec![2]));
        let b = tape.input(Tensor::new(vec![2], vec![0.25, -3.0]).unwrap());
        let (y, _) = tape.batch_norm2d(x, g, b, BnMode::Train).unwrap();
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            assert_eq!(v, if (i / 4) % 2 == 0 { 0.25 } else { -3.0 });
        }
    }

    #[test]
    fn batch_of_one_rejected_in_train() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(vec![1, 2, 2, 2]));
        let g = tape.input(Tensor::full(vec![2], 1.0));
        let b = tape.input(Tensor::zeros(vec![2]));
        assert!(tape.batch_norm2d(x, g, b, BnMode::Train).is_err());
        let rs = RunningStats::new(2);
        assert!(tape.batch_norm2d(x, g, b, BnMode::Eval(&rs)).is_ok());
    }

    #[test]
    fn running_stats_update() {
        let mut rs = RunningStats::<f64>::new(1);
        rs.update(&BatchStats {
            mean: vec![2.0],
            unbiased_var: vec![3.0],
        });
        assert!((rs.mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((rs.var.data()[0] - 1.2).abs() < 1e-15);
    }
}
