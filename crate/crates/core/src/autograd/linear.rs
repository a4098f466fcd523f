use super::{check_rank, Backward, Ctx, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{matmul_into, Float, MatRef, Tensor};

struct Linear;

impl<T: Float> Backward<T> for Linear {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (ctx.input(0), ctx.input(1));
        let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let gm = MatRef::new(g.data(), n, m);
        let dx = ctx.needs_grad(0).then(|| {
            let mut out = vec![T::zero(); n * d];
            matmul_into(&mut out, gm, MatRef::new(w.data(), d, m).t(), false);
            Tensor::new(vec![n, d], out).expect("linear dx shape")
        });
        let dw = ctx.needs_grad(1).then(|| {
            let mut out = vec![T::zero(); d * m];
            matmul_into(&mut out, MatRef::new(x.data(), n, d).t(), gm, false);
            Tensor::new(vec![d, m], out).expect("linear dw shape")
        });
        let db = ctx.needs_grad(2).then(|| {
            Tensor::from_fn(vec![m], |j| {
                T::from_f64((0..n).map(|i| g.data()[i * m + j].as_f64()).sum())
            })
        });
        vec![dx, dw, db]
    }
}

impl<T: Float> Tape<T> {
    /// Affine map `x: [N, D]` times `w: [D, M]` plus `b: [M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        check_rank(xv, 2, "linear input")?;
        check_rank(wv, 2, "linear weight")?;
        let (n, d, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
        ensure!(
            wv.shape()[0] == d,
            Shape,
            "linear input width {d} vs weight {:?}",
            wv.shape()
        );
        ensure!(bv.shape() == [m], Shape, "linear bias {:?} for {m} outputs", bv.shape());
        let mut out: Vec<T> = (0..n * m).map(|i| bv.data()[i % m]).collect();
        matmul_into(
            &mut out,
            MatRef::new(xv.data(), n, d),
            MatRef::new(wv.data(), d, m),
            true,
        );
        let y = Tensor::new(vec![n, m], out)?;
        Ok(self.push(y, vec![x, w, b], Linear))
    }
}
