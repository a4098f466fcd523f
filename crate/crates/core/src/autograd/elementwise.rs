use rand::Rng;

use super::{check_rank, Backward, Ctx, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Float, Tensor};

struct Relu;

impl<T: Float> Backward<T> for Relu {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.input(0).data();
        vec![Some(zip_map(
            g,
            x,
            |gi, xi| if xi > T::zero() { gi } else { T::zero() },
        ))]
    }
}

struct Sigmoid;

impl<T: Float> Backward<T> for Sigmoid {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let y = ctx.output().data();
        let gx = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * y[i] * (T::one() - y[i]));
        vec![Some(gx)]
    }
}

struct Add;

impl<T: Float> Backward<T> for Add {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![
            ctx.needs_grad(0).then(|| g.clone()),
            ctx.needs_grad(1).then(|| g.clone()),
        ]
    }
}

struct Mul;

impl<T: Float> Backward<T> for Mul {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (ctx.input(0), ctx.input(1));
        let prod = |other: &Tensor<T>| zip_map(g, other.data(), |gi, oi| gi * oi);
        vec![ctx.needs_grad(0).then(|| prod(b)), ctx.needs_grad(1).then(|| prod(a))]
    }
}

struct Scale<T>(T);

impl<T: Float> Backward<T> for Scale<T> {
    fn backward(&self, _ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.map(|v| v * self.0))]
    }
}

/// `c0 + c1 * a` for constants `c0`, `c1`.
struct Affine<T> {
    slope: T,
}

impl<T: Float> Backward<T> for Affine<T> {
    fn backward(&self, _ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.map(|v| v * self.slope))]
    }
}

/// Tensor scaled by a one-element variable.
struct ScaleBy;

impl<T: Float> Backward<T> for ScaleBy {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.input(0);
        let s = ctx.input(1);
        let sv = s.data()[0];
        let gx = ctx.needs_grad(0).then(|| g.map(|v| v * sv));
        let gs = ctx.needs_grad(1).then(|| {
            let dot: f64 = x.data().iter().zip(g.data()).map(|(&a, &b)| (a * b).as_f64()).sum();
            Tensor::full(s.shape().to_vec(), T::from_f64(dot))
        });
        vec![gx, gs]
    }
}

struct Sum;

impl<T: Float> Backward<T> for Sum {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(ctx.input(0).shape().to_vec(), g.data()[0]))]
    }
}

struct Reshape;

impl<T: Float> Backward<T> for Reshape {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let shape = ctx.input(0).shape().to_vec();
        vec![Some(
            Tensor::new(shape, g.data().to_vec()).expect("reshape preserves numel"),
        )]
    }
}

struct Dropout<T> {
    mask: Vec<T>,
}

impl<T: Float> Backward<T> for Dropout<T> {
    fn backward(&self, _ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(zip_map(g, &self.mask, |gi, m| gi * m))]
    }
}

/// `x[n, c, ..] * s[n, c]`.
struct ChannelScale;

impl<T: Float> Backward<T> for ChannelScale {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.input(0);
        let s = ctx.input(1);
        let plane: usize = x.shape()[2..].iter().product();
        let gx = ctx.needs_grad(0).then(|| scale_planes(g, s.data(), plane));
        let gs = ctx.needs_grad(1).then(|| {
            Tensor::from_fn(s.shape().to_vec(), |nc| {
                let r = nc * plane..(nc + 1) * plane;
                let acc: f64 = x.data()[r.clone()]
                    .iter()
                    .zip(&g.data()[r])
                    .map(|(&a, &b)| (a * b).as_f64())
                    .sum();
                T::from_f64(acc)
            })
        });
        vec![gx, gs]
    }
}

/// Training/evaluation switch shared by dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// `f(a[i], b[i])` over a tensor and an equally long slice.
fn zip_map<T: Float>(a: &Tensor<T>, b: &[T], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Each contiguous plane of `x` multiplied by its own factor.
fn scale_planes<T: Float>(x: &Tensor<T>, factors: &[T], plane: usize) -> Tensor<T> {
    let mut out = x.data().to_vec();
    for (p, &f) in out.chunks_mut(plane.max(1)).zip(factors) {
        p.iter_mut().for_each(|v| *v *= f);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        Shape,
        "{what}: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

impl<T: Float> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, vec![x], Relu)
    }

    /// Logistic sigmoid `1 / (1 + e^-x)`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(y, vec![x], Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "add")?;
        let y = zip_map(av, bv.data(), |x, y| x + y);
        Ok(self.push(y, vec![a, b], Add))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "mul")?;
        let y = zip_map(av, bv.data(), |x, y| x * y);
        Ok(self.push(y, vec![a, b], Mul))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let y = self.value(x).map(|v| v * f);
        self.push(y, vec![x], Scale(f))
    }

    /// `offset + slope * x` for constants.
    pub fn affine(&mut self, x: Var, offset: f64, slope: f64) -> Var {
        let (o, s) = (T::from_f64(offset), T::from_f64(slope));
        let y = self.value(x).map(|v| o + s * v);
        self.push(y, vec![x], Affine { slope: s })
    }

    /// `x * s` where `s` holds exactly one value.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        ensure!(
            sv.numel() == 1,
            Shape,
            "scale_by needs a one-element scale, got {:?}",
            sv.shape()
        );
        let f = sv.data()[0];
        let y = self.value(x).map(|v| f * v);
        Ok(self.push(y, vec![x, s], ScaleBy))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(total)), vec![x], Sum)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, vec![x], Reshape))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        ensure!(
            (0.0..1.0).contains(&p),
            InvalidArgument,
            "dropout probability must be in [0, 1), got {p}"
        );
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let y = zip_map(xv, &mask, |x, m| x * m);
        Ok(self.push(y, vec![x], Dropout { mask }))
    }

    /// Broadcast multiply of an `[N, C, ...]` map by per-channel `[N, C]` weights.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        ensure!(xv.rank() >= 2, Shape, "channel_scale input {:?}", xv.shape());
        check_rank(sv, 2, "channel_scale weights")?;
        ensure!(
            sv.shape() == &xv.shape()[..2],
            Shape,
            "channel_scale weights {:?} vs input {:?}",
            sv.shape(),
            xv.shape()
        );
        let plane: usize = xv.shape()[2..].iter().product();
        let y = scale_planes(xv, sv.data(), plane);
        Ok(self.push(y, vec![x, s], ChannelScale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), Some(0.5));
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_fn(vec![10], |i| i as f32));
        for (p, mode) in [(0.0, Mode::Train), (0.0, Mode::Eval), (0.7, Mode::Eval)] {
            let y = tape.dropout(x, p, mode, &mut rng).unwrap();
            assert_eq!(tape.value(y), tape.value(x));
        }
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_fn(vec![200_000], |i| 1.0 + (i % 7) as f64));
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean_in = tape.value(x).sum() / 200_000.0;
        let mean_out = tape.value(y).sum() / 200_000.0;
        assert!(((mean_out - mean_in) / mean_in).abs() < 0.02);
        let zeros = tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!((zeros as f64 / 200_000.0 - 0.5).abs() < 0.01);
    }

    #[test]
    fn channel_scale_broadcasts() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::full(vec![1, 2, 2, 2], 2.0));
        let s = tape.input(Tensor::new(vec![1, 2], vec![0.5, 3.0]).unwrap());
        let y = tape.channel_scale(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0, 6.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(vec![2]));
        let b = tape.input(Tensor::zeros(vec![3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        assert!(tape.scale_by(a, b).is_err());
    }
}
