//! Optimization loop, evaluation, checkpoints and latency measurement.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Parameter, Tape};
use crate::data::batch::{batch_indices, load_batch, Dataset};
use crate::data::container::{load_tensor, save_tensor};
use crate::error::{ensure, Error, Result};
use crate::loss::{LossValue, Mining, TripletAverage, TripletConfig};
use crate::metrics::{argmax_rows, ConfusionMatrix, Metrics};
use crate::model::{Aecnn, ModelConfig};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// L2 coefficient added to the gradient before the Adam moments.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub margin: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Adds the triplet term to the cross-entropy.
    pub triplet_enabled: bool,
    pub mining: Mining,
    pub triplet_average: TripletAverage,
    /// Keep batch-norm running statistics fixed during training.
    pub freeze_bn_stats: bool,
    /// End training after the first epoch whose test accuracy reaches this.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 50,
            batch_size: 50,
            eval_batch_size: 100,
            seed: 42,
            margin: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            triplet_enabled: true,
            mining: Mining::BatchAll,
            triplet_average: TripletAverage::AllValid,
            freeze_bn_stats: false,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push(format!("train.lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!(
                "train.weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be > 0".into());
        }
        if self.batch_size < 2 {
            errs.push(format!(
                "train.batch_size must be >= 2 for batch statistics, got {}",
                self.batch_size
            ));
        }
        if self.eval_batch_size == 0 {
            errs.push("train.eval_batch_size must be > 0".into());
        }
        if !self.margin.is_finite() {
            errs.push("train.margin must be finite".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("train.{name} must be in [0, 1), got {b}"));
            }
        }
        if let Some(a) = self.stop_at_accuracy {
            if !(0.0..=1.0).contains(&a) {
                errs.push(format!("train.stop_at_accuracy must be in [0, 1], got {a}"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            errs.push(format!("train.eps must be > 0, got {}", self.eps));
        }
        errs
    }

    pub fn triplet(&self) -> Option<TripletConfig> {
        self.triplet_enabled.then_some(TripletConfig {
            margin: self.margin,
            mining: self.mining,
            average: self.triplet_average,
        })
    }
}

/// First and second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &[Parameter<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter, with
/// `weight_decay * p` added to the gradient.
pub fn adam_step<T: Float>(params: &mut [Parameter<T>], state: &mut AdamState<T>, cfg: &TrainConfig) -> Result<()> {
    ensure!(
        state.m.len() == params.len(),
        Shape,
        "optimizer state covers {} tensors, model has {}",
        state.m.len(),
        params.len()
    );
    for p in params.iter().filter(|p| p.trainable) {
        if p.grad.is_none() {
            return Err(Error::MissingGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above");
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let wf = w.as_f64();
            let g = grad.data()[i].as_f64() + cfg.weight_decay * wf;
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            *w = T::from_f64(wf - update);
        }
    }
    Ok(())
}

/// Per-epoch record. Contains no wall-clock values so identical runs produce
/// identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_triplet: f64,
    pub mean_valid_triplets: f64,
    pub test_accuracy: f64,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub timings: Vec<EpochTiming>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    /// Model state after the best epoch (earliest among ties).
    pub best_model: Aecnn<f32>,
    pub best_evaluation: Evaluation,
}

impl TrainOutcome {
    pub fn peak_accuracy(&self) -> f64 {
        self.best_accuracy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Eval-mode predictions over a whole dataset.
pub fn evaluate<D: Dataset + ?Sized>(model: &Aecnn<f32>, data: &D, batch_size: usize) -> Result<Evaluation> {
    let classes = model.config().num_classes;
    let mut confusion = ConfusionMatrix::new(classes);
    for idx in batch_indices(data.len(), batch_size, 0, 0, false)? {
        let batch = load_batch(data, &idx)?;
        let logits = model.predict_logits(batch.inputs)?;
        for (&t, p) in batch.labels.iter().zip(argmax_rows(&logits)?) {
            confusion.add(t, p)?;
        }
    }
    let metrics = confusion.metrics();
    Ok(Evaluation { confusion, metrics })
}

/// Result of one optimization step.
pub struct StepResult {
    pub loss: LossValue,
}

/// Forward, joint loss, backward and Adam update on one batch.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Aecnn<f32>,
    adam: &mut AdamState<f32>,
    inputs: Tensor<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepResult> {
    let triplet = cfg.triplet();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.input(inputs);
    let out = model.forward(&mut tape, &bound, x, Mode::Train, rng)?;
    let (loss, value) = tape.joint_loss(out.logits, out.embedding, labels, triplet.as_ref())?;
    if !value.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {} (ce {}, triplet {})",
            value.total, value.ce, value.triplet
        )));
    }
    let mut grads = tape.backward(loss)?;
    model.store_grads(&mut grads, &bound)?;
    if !cfg.freeze_bn_stats {
        model.update_running_stats(&out.bn_stats);
    }
    adam_step(model.params_mut(), adam, cfg)?;
    if let Some(p) = model.params().iter().find(|p| !p.value.all_finite()) {
        return Err(Error::NonFinite(format!("parameter `{}` became non-finite", p.name)));
    }
    Ok(StepResult { loss: value })
}

/// Trains for `cfg.epochs` epochs, evaluating on `test` after each one.
/// `on_epoch` sees every log as soon as it is produced.
pub fn train<D: Dataset + ?Sized>(
    model: &mut Aecnn<f32>,
    train_set: &D,
    test_set: &D,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &EpochTiming),
) -> Result<TrainOutcome> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    let mut adam = AdamState::new(model.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ce_5eed);
    let mut logs = Vec::new();
    let mut timings = Vec::new();
    let mut best: Option<(usize, f64, Aecnn<f32>, Evaluation)> = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut loss, mut ce, mut tl, mut valid, mut seen, mut skipped) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
        for (b, idx) in batch_indices(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64, true)?
            .into_iter()
            .enumerate()
        {
            // batch statistics are undefined for a single sample
            if idx.len() < 2 {
                skipped += 1;
                continue;
            }
            let batch = load_batch(train_set, &idx)?;
            let step = train_step(model, &mut adam, batch.inputs, &batch.labels, cfg, &mut dropout_rng).map_err(
                |e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                },
            )?;
            let n = idx.len() as f64;
            loss += step.loss.total * n;
            ce += step.loss.ce * n;
            tl += step.loss.triplet * n;
            valid += step.loss.valid_triplet_count as f64;
            seen += idx.len();
        }
        let train_seconds = start.elapsed().as_secs_f64();
        let eval_start = Instant::now();
        let evaluation = evaluate(model, test_set, cfg.eval_batch_size)?;
        let batches = (train_set.len().div_ceil(cfg.batch_size) - skipped).max(1) as f64;
        let seen = seen.max(1) as f64;
        let log = EpochLog {
            epoch,
            train_loss: loss / seen,
            train_ce: ce / seen,
            train_triplet: tl / seen,
            mean_valid_triplets: valid / batches,
            test_accuracy: evaluation.metrics.accuracy,
            skipped_batches: skipped,
        };
        let timing = EpochTiming {
            epoch,
            train_seconds,
            eval_seconds: eval_start.elapsed().as_secs_f64(),
        };
        on_epoch(&log, &timing);
        if best.as_ref().is_none_or(|(_, acc, _, _)| log.test_accuracy > *acc) {
            best = Some((epoch, log.test_accuracy, model.clone(), evaluation));
        }
        let reached = cfg.stop_at_accuracy.is_some_and(|a| log.test_accuracy >= a);
        logs.push(log);
        timings.push(timing);
        if reached {
            break;
        }
    }
    let (best_epoch, best_accuracy, best_model, best_evaluation) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        logs,
        timings,
        best_epoch,
        best_accuracy,
        best_model,
        best_evaluation,
    })
}

/// `epoch,train_ce,train_triplet,test_accuracy`, one row per epoch.
pub fn export_curves(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_ce,train_triplet,test_accuracy\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            l.epoch, l.train_ce, l.train_triplet, l.test_accuracy
        ));
    }
    out
}

/// Inverse of [`export_curves`].
pub fn parse_curves(csv: &str) -> Result<Vec<(usize, f64, f64, f64)>> {
    let bad = |line: &str| Error::Format(format!("malformed curve row `{line}`"));
    csv.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            Ok((
                f[0].parse().map_err(|_| bad(line))?,
                f[1].parse().map_err(|_| bad(line))?,
                f[2].parse().map_err(|_| bad(line))?,
                f[3].parse().map_err(|_| bad(line))?,
            ))
        })
        .collect()
}

/// JSON header of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    pub test_accuracy: f64,
    pub tensors: Vec<String>,
}

const CHECKPOINT_META: &str = "config.json";

fn running_names(stage: usize) -> (String, String) {
    (
        format!("stage{stage}.bn.running_mean"),
        format!("stage{stage}.bn.running_var"),
    )
}

/// Writes `config.json` and one container per parameter and running
/// statistic into `dir`.
pub fn save_checkpoint(model: &Aecnn<f32>, dir: impl AsRef<Path>, epoch: usize, test_accuracy: f64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for p in model.params() {
        save_tensor(dir.join(format!("{}.dast", p.name)), &p.value)?;
        tensors.push(p.name.clone());
    }
    for (s, r) in model.running_stats().iter().enumerate() {
        let (mean, var) = running_names(s);
        save_tensor(dir.join(format!("{mean}.dast")), &r.mean)?;
        save_tensor(dir.join(format!("{var}.dast")), &r.var)?;
        tensors.push(mean);
        tensors.push(var);
    }
    let meta = CheckpointMeta {
        model: model.config().clone(),
        epoch,
        test_accuracy,
        tensors,
    };
    let path = dir.join(CHECKPOINT_META);
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Aecnn<f32>, CheckpointMeta)> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let mut model = Aecnn::<f32>::new(meta.model.clone(), 0)?;
    let load = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t: Tensor<f32> = load_tensor(dir.join(format!("{name}.dast")))?;
        ensure!(
            t.shape() == shape,
            Format,
            "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
            t.shape(),
            shape
        );
        Ok(t)
    };
    for p in model.params_mut() {
        p.value = load(&p.name, p.value.shape())?;
    }
    for (s, r) in model.running_stats_mut().iter_mut().enumerate() {
        let (mean, var) = running_names(s);
        r.mean = load(&mean, r.mean.shape())?;
        r.var = load(&var, r.var.shape())?;
    }
    Ok((model, meta))
}

/// Host description attached to latency reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub available_parallelism: usize,
    pub threads_used: usize,
    pub package_version: String,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads_used: 1,
            package_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub median_ms_per_sample: f64,
    pub p95_ms_per_sample: f64,
    pub environment: Environment,
}

/// Eval-mode forward latency on random inputs; warmup runs are excluded.
pub fn benchmark_inference(
    model: &Aecnn<f32>,
    batch_size: usize,
    warmup: usize,
    repetitions: usize,
    seed: u64,
) -> Result<LatencyReport> {
    ensure!(
        batch_size > 0 && repetitions > 0,
        InvalidArgument,
        "batch size and repetitions must be > 0"
    );
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::from_fn(
        vec![batch_size, c.input_channels, c.input_height, c.input_width],
        |_| rng.random::<f32>(),
    );
    for _ in 0..warmup {
        model.predict_logits(input.clone())?;
    }
    let mut per_sample: Vec<f64> = (0..repetitions)
        .map(|_| {
            let x = input.clone();
            let start = Instant::now();
            model.predict_logits(x)?;
            Ok(start.elapsed().as_secs_f64() * 1e3 / batch_size as f64)
        })
        .collect::<Result<_>>()?;
    per_sample.sort_by(f64::total_cmp);
    let pick = |q: f64| per_sample[((q * (per_sample.len() - 1) as f64).round() as usize).min(per_sample.len() - 1)];
    Ok(LatencyReport {
        batch_size,
        repetitions,
        warmup,
        median_ms_per_sample: pick(0.5),
        p95_ms_per_sample: pick(0.95),
        environment: Environment::current(),
    })
}
