//! Finite-difference verification of the backward passes.
//!
//! Each check builds a scalar function of a few `f64` tensors on a fresh
//! tape, runs [`Tape::backward`], and compares the analytic gradient with
//! central differences `(f(x + h) - f(x - h)) / 2h` at `h = 1e-5`. Non-scalar
//! op outputs are reduced by a fixed random projection so every output
//! element contributes.
//!
//! The reported error per element is `|a - n| / max(|a|, |n|, 1e-4)`; the
//! floor keeps near-zero gradients from turning rounding noise into large
//! relative errors.
//!
//! ReLU, max pooling and the triplet hinge are piecewise smooth. A probe whose
//! `+-h` interval straddles a kink has one-sided differences that disagree
//! with each other; such probes are counted as `skipped` instead of compared.
//! A check with more than 5% skipped probes fails.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autograd::{BnMode, Mode, RunningStats, Tape, Var};
use crate::error::Result;
use crate::loss::{Mining, TripletAverage, TripletConfig};
use crate::model::{Aecnn, Bound, ModelConfig};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-4;
/// Tolerance for single ops and composite blocks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole network.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Relative disagreement of the one-sided differences that marks a kink.
pub const KINK_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probes: usize,
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic and numerical gradients of `f` with respect to every
/// tensor in `inputs`. At most `max_probes` elements per input are perturbed;
/// they are picked with `seed`.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    max_probes: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let base = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.input(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).data()[0]
    };
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.input(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = inputs.to_vec();
    let (mut max_rel, mut max_abs, mut probes) = (0.0f64, 0.0f64, 0usize);
    let mut skipped = 0usize;
    for (k, &v) in vars.iter().enumerate() {
        let numel = inputs[k].numel();
        let analytic = grads
            .get(v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let idx: Vec<usize> = if numel <= max_probes {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, max_probes).into_vec()
        };
        for i in idx {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + STEP;
            let up = eval(&values)?;
            values[k].data_mut()[i] = orig - STEP;
            let down = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let fwd = (up - base) / STEP;
            let bwd = (base - down) / STEP;
            if (fwd - bwd).abs() > KINK_THRESHOLD * fwd.abs().max(bwd.abs()).max(1e-2) {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
            probes += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        probes,
        skipped,
        tolerance,
        passed: max_rel < tolerance && skipped * 20 <= probes + skipped,
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `sum(r * y)` for a fixed random `r` of `y`'s shape.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = randn(&mut rng, tape.value(y).shape().to_vec());
    let r = tape.input(r);
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

/// Small network used for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        input_height: 16,
        input_width: 16,
        stage_widths: vec![4, 6, 8, 8],
        fc_hidden: 6,
        ..ModelConfig::default()
    }
}

struct Suite {
    rng: ChaCha8Rng,
    reports: Vec<GradCheckReport>,
}

impl Suite {
    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let seed = self.rng.random();
        let report = check(name, &inputs, OP_TOLERANCE, 64, seed, |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        })?;
        self.reports.push(report);
        Ok(())
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor<f64> {
        randn(&mut self.rng, shape.to_vec())
    }
}

/// Every op, the two losses, a full stage and the whole network.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        reports: Vec::new(),
    };

    let x = s.randn(&[2, 3, 5, 5]);
    let w = s.randn(&[4, 3, 3, 3]);
    let b = s.randn(&[4]);
    s.op("conv2d 3x3 pad 1", vec![x.clone(), w.clone(), b.clone()], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 1)
    })?;
    s.op("conv2d 3x3 stride 2", vec![x, w, b], |t, v| {
        t.conv2d(v[0], v[1], v[2], 2, 0)
    })?;
    let x = s.randn(&[3, 1, 8]);
    let w = s.randn(&[1, 1, 5]);
    s.op("conv1d k=5", vec![x, w], |t, v| t.conv1d(v[0], v[1]))?;

    let x = s.randn(&[2, 3, 4, 4]);
    let g = s.randn(&[3]);
    let b = s.randn(&[3]);
    s.op("batch_norm2d train", vec![x.clone(), g.clone(), b.clone()], |t, v| {
        Ok(t.batch_norm2d(v[0], v[1], v[2], BnMode::Train)?.0)
    })?;
    let running = RunningStats {
        mean: Tensor::new(vec![3], vec![0.3, -0.2, 0.1])?,
        var: Tensor::new(vec![3], vec![0.5, 1.5, 2.0])?,
    };
    s.op("batch_norm2d eval", vec![x, g, b], move |t, v| {
        Ok(t.batch_norm2d(v[0], v[1], v[2], BnMode::Eval(&running))?.0)
    })?;

    let x = s.randn(&[2, 3, 4, 4]);
    s.op("relu", vec![x.clone()], |t, v| Ok(t.relu(v[0])))?;
    s.op("sigmoid", vec![x.clone()], |t, v| Ok(t.sigmoid(v[0])))?;
    s.op("max_pool2d", vec![x.clone()], |t, v| t.max_pool2d(v[0], 2, 2))?;
    s.op("global_avg_pool", vec![x.clone()], |t, v| t.global_avg_pool(v[0]))?;
    s.op("global_max_pool", vec![x.clone()], |t, v| t.global_max_pool(v[0]))?;
    let y = s.randn(&[2, 3, 4, 4]);
    s.op("add", vec![x.clone(), y.clone()], |t, v| t.add(v[0], v[1]))?;
    s.op("mul", vec![x.clone(), y], |t, v| t.mul(v[0], v[1]))?;
    s.op("affine", vec![x.clone()], |t, v| Ok(t.affine(v[0], 1.0, -0.7)))?;
    let a = s.randn(&[1]);
    s.op("scale_by", vec![x.clone(), a], |t, v| t.scale_by(v[0], v[1]))?;
    let c = s.randn(&[2, 3]);
    s.op("channel_scale", vec![x.clone(), c], |t, v| t.channel_scale(v[0], v[1]))?;
    s.op("dropout", vec![x], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        t.dropout(v[0], 0.5, Mode::Train, &mut rng)
    })?;
    let x = s.randn(&[3, 5]);
    let w = s.randn(&[5, 4]);
    let b = s.randn(&[4]);
    s.op("linear", vec![x, w, b], |t, v| t.linear(v[0], v[1], v[2]))?;

    let logits = s.randn(&[6, 6]);
    let labels = vec![0usize, 1, 2, 3, 4, 5];
    s.op("cross_entropy", vec![logits], move |t, v| {
        t.cross_entropy(v[0], &labels)
    })?;
    let emb = s.randn(&[8, 5]);
    let labels = vec![0usize, 1, 0, 2, 1, 2, 0, 1];
    for (name, cfg) in [
        ("triplet batch-all", TripletConfig::default()),
        (
            "triplet batch-all margin 0.5",
            TripletConfig {
                margin: 0.5,
                ..TripletConfig::default()
            },
        ),
        (
            "triplet batch-hard",
            TripletConfig {
                mining: Mining::BatchHard,
                average: TripletAverage::AllValid,
                margin: 0.2,
            },
        ),
    ] {
        let labels = labels.clone();
        s.op(name, vec![emb.clone()], move |t, v| {
            Ok(t.triplet_loss(v[0], &labels, &cfg)?.0)
        })?;
    }

    // one full stage (CBRP, attention, fusion) of a model with 5 channels
    let cfg = ModelConfig {
        input_channels: 2,
        input_height: 32,
        input_width: 32,
        stage_widths: vec![5, 5, 5, 5],
        fc_hidden: 4,
        alpha_init: 0.3,
        ..ModelConfig::default()
    };
    let model = Aecnn::<f64>::new(cfg, s.rng.random())?;
    let x = s.randn(&[2, 2, 6, 6]);
    stage_check(&mut s, &model, x)?;

    let model = Aecnn::<f64>::new(tiny_model_config(), s.rng.random())?;
    let x = s.randn(&[4, 3, 16, 16]);
    s.reports
        .push(model_check(&model, x, vec![0, 1, 0, 1], s.rng.random())?);
    Ok(s.reports)
}

fn stage_check(s: &mut Suite, model: &Aecnn<f64>, x: Tensor<f64>) -> Result<()> {
    let n_params = model.params().len();
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    s.op("stage (conv+bn+relu+pool+attention+fusion)", inputs, |t, v| {
        let bound = Bound::from_vars(v[1..=n_params].to_vec());
        Ok(model.stage_forward(t, &bound, 0, v[0], Mode::Train)?.output)
    })
}

/// End-to-end check of the joint loss through the whole network in train
/// mode (batch statistics and a fixed dropout mask).
pub fn model_check(model: &Aecnn<f64>, x: Tensor<f64>, labels: Vec<usize>, seed: u64) -> Result<GradCheckReport> {
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    let cfg = TripletConfig::default();
    check("model joint loss", &inputs, MODEL_TOLERANCE, 12, seed, |t, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.forward(t, &bound, v[0], Mode::Train, &mut rng)?;
        Ok(t.joint_loss(out.logits, out.embedding, &labels, Some(&cfg))?.0)
    })
}

/// Runs [`run_suite`] and reports its wall time in seconds.
pub fn run_timed(seed: u64) -> Result<(Vec<GradCheckReport>, f64)> {
    let start = Instant::now();
    let reports = run_suite(seed)?;
    Ok((reports, start.elapsed().as_secs_f64()))
}
