//! The attention-enhanced CNN.
//!
//! Four stages, each `CBRP -> (SEAM, skip) -> alpha fusion`, followed by global
//! average pooling and a two-layer classification head:
//!
//! ```text
//! cbrp  = maxpool(relu(bn(conv3x3(x))))
//! attn  = sigmoid(conv1d(gap(cbrp)) + conv1d(gmp(cbrp)))     (shared kernel)
//! stage = alpha * (cbrp * attn) + (1 - alpha) * cbrp
//! emb   = gap(stage_4)
//! logit = fc2(dropout(relu(fc1(emb))))
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, BnMode, Gradients, Mode, Parameter, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Spatial sensing channels stacked as image channels.
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of the four stages.
    pub stage_widths: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// `gamma` and `b` of the adaptive attention kernel size rule.
    pub seam_gamma: f64,
    pub seam_b: f64,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub seam_enabled: bool,
    pub alpha_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 12,
            input_height: 100,
            input_width: 100,
            stage_widths: vec![32, 64, 128, 256],
            conv_kernel: 3,
            conv_stride: 1,
            conv_padding: 1,
            pool_kernel: 2,
            pool_stride: 2,
            seam_gamma: 2.0,
            seam_b: 1.0,
            fc_hidden: 128,
            dropout: 0.5,
            num_classes: 6,
            seam_enabled: true,
            alpha_init: 0.5,
        }
    }
}

impl ModelConfig {
    /// Spatial size after each stage, starting with the input.
    pub fn spatial_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.input_height, self.input_width)];
        let (mut h, mut w) = (self.input_height, self.input_width);
        for _ in &self.stage_widths {
            let conv = |e: usize| {
                (e + 2 * self.conv_padding)
                    .checked_sub(self.conv_kernel)
                    .map(|v| v / self.conv_stride.max(1) + 1)
            };
            let pool = |e: usize| e.checked_sub(self.pool_kernel).map(|v| v / self.pool_stride.max(1) + 1);
            match (conv(h).and_then(pool), conv(w).and_then(pool)) {
                (Some(nh), Some(nw)) => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    h = 0;
                    w = 0;
                }
            }
            dims.push((h, w));
        }
        dims
    }

    /// Every problem with the configuration, one message per field.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.input_channels == 0 {
            errs.push("model.input_channels must be > 0".into());
        }
        if self.stage_widths.len() != 4 {
            errs.push(format!(
                "model.stage_widths must list 4 stages, got {}",
                self.stage_widths.len()
            ));
        }
        if self.stage_widths.contains(&0) {
            errs.push("model.stage_widths entries must be > 0".into());
        }
        if self.conv_kernel == 0 {
            errs.push("model.conv_kernel must be > 0".into());
        }
        if self.conv_stride == 0 {
            errs.push("model.conv_stride must be > 0".into());
        }
        if self.pool_kernel == 0 || self.pool_stride == 0 {
            errs.push("model.pool_kernel and model.pool_stride must be > 0".into());
        }
        if self.seam_gamma <= 0.0 || !self.seam_gamma.is_finite() {
            errs.push("model.seam_gamma must be positive".into());
        }
        if !self.seam_b.is_finite() {
            errs.push("model.seam_b must be finite".into());
        }
        if self.fc_hidden == 0 {
            errs.push("model.fc_hidden must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("model.dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.num_classes < 2 {
            errs.push("model.num_classes must be >= 2".into());
        }
        if !self.alpha_init.is_finite() {
            errs.push("model.alpha_init must be finite".into());
        }
        if errs.is_empty() && self.spatial_dims().iter().any(|&(h, w)| h == 0 || w == 0) {
            errs.push(format!(
                "model.input_height/input_width {}x{} collapse to zero before the last stage",
                self.input_height, self.input_width
            ));
        }
        errs
    }

    pub fn embedding_dim(&self) -> usize {
        *self.stage_widths.last().unwrap_or(&0)
    }
}

/// Odd attention kernel length for `channels` channels:
/// `t = (log2(C) + b) / gamma`, rounded to the nearest odd integer with ties
/// rounding up, and never below 3.
pub fn seam_kernel_size(channels: usize, gamma: f64, b: f64) -> usize {
    let t = ((channels.max(1) as f64).log2() + b) / gamma;
    // nearest odd 2m+1: m = round_half_up((t - 1) / 2)
    let m = ((t - 1.0) / 2.0 + 0.5).floor();
    let k = 2.0 * m + 1.0;
    if k < 3.0 {
        3
    } else {
        k as usize
    }
}

#[derive(Debug, Clone)]
struct StageSlots {
    conv_w: usize,
    conv_b: usize,
    bn_gamma: usize,
    bn_beta: usize,
    seam: Option<SeamSlots>,
}

#[derive(Debug, Clone, Copy)]
struct SeamSlots {
    kernel: usize,
    alpha: usize,
}

/// Tape handles for every parameter of one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Uses caller-recorded nodes, one per parameter in [`Aecnn::params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, param_index: usize) -> Var {
        self.vars[param_index]
    }
}

/// Result of one stage.
pub struct StageOutput {
    pub output: Var,
    pub cbrp: Var,
    pub bn_stats: Option<BatchStats>,
}

pub struct ForwardOutput {
    /// `[batch, num_classes]`
    pub logits: Var,
    /// `[batch, last stage width]`, the pooled backbone feature.
    pub embedding: Var,
    /// Batch statistics per stage (train mode only).
    pub bn_stats: Vec<BatchStats>,
}

/// Network parameters, batch-norm running estimates and the configuration
/// they were built for.
#[derive(Debug, Clone)]
pub struct Aecnn<T> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    running: Vec<RunningStats<T>>,
    stages: Vec<StageSlots>,
    fc1: (usize, usize),
    fc2: (usize, usize),
}

fn uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl<T: Float> Aecnn<T> {
    /// Deterministic initialization: uniform `+-1/sqrt(fan_in)` for conv and
    /// linear weights and biases, unit/zero batch-norm affine, `alpha_init`
    /// for every fusion scalar. Values are drawn in `f64` so both precisions
    /// start from the same point.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::InvalidArgument(problems.join("; ")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Parameter<T>> = Vec::new();
        let mut add = |name: String, value: Tensor<f64>| {
            params.push(Parameter::new(name, value.cast()));
            params.len() - 1
        };
        let k = config.conv_kernel;
        let mut stages = Vec::new();
        let mut running = Vec::new();
        let mut c_in = config.input_channels;
        for (s, &c_out) in config.stage_widths.iter().enumerate() {
            let fan_in = (c_in * k * k) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let conv_w = add(
                format!("stage{s}.conv.weight"),
                uniform(&mut rng, vec![c_out, c_in, k, k], bound),
            );
            let conv_b = add(format!("stage{s}.conv.bias"), uniform(&mut rng, vec![c_out], bound));
            let bn_gamma = add(format!("stage{s}.bn.gamma"), Tensor::full(vec![c_out], 1.0));
            let bn_beta = add(format!("stage{s}.bn.beta"), Tensor::zeros(vec![c_out]));
            let seam = config.seam_enabled.then(|| {
                let ks = seam_kernel_size(c_out, config.seam_gamma, config.seam_b);
                let kernel = add(
                    format!("stage{s}.seam.weight"),
                    uniform(&mut rng, vec![1, 1, ks], 1.0 / (ks as f64).sqrt()),
                );
                let alpha = add(format!("stage{s}.alpha"), Tensor::full(vec![1], config.alpha_init));
                SeamSlots { kernel, alpha }
            });
            stages.push(StageSlots {
                conv_w,
                conv_b,
                bn_gamma,
                bn_beta,
                seam,
            });
            running.push(RunningStats::new(c_out));
            c_in = c_out;
        }
        let emb = config.embedding_dim();
        let b1 = 1.0 / (emb as f64).sqrt();
        let fc1 = (
            add(
                "head.fc1.weight".into(),
                uniform(&mut rng, vec![emb, config.fc_hidden], b1),
            ),
            add("head.fc1.bias".into(), uniform(&mut rng, vec![config.fc_hidden], b1)),
        );
        let b2 = 1.0 / (config.fc_hidden as f64).sqrt();
        let fc2 = (
            add(
                "head.fc2.weight".into(),
                uniform(&mut rng, vec![config.fc_hidden, config.num_classes], b2),
            ),
            add("head.fc2.bias".into(), uniform(&mut rng, vec![config.num_classes], b2)),
        );
        Ok(Aecnn {
            config,
            params,
            running,
            stages,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// Trainable scalar count; running statistics are not parameters.
    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }

    /// Records every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p)).collect(),
        }
    }

    /// Copies gradients from a backward pass into the parameters.
    pub fn store_grads(&mut self, grads: &mut Gradients<T>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            match grads.take(v) {
                Some(g) => p.set_grad(g)?,
                None => p.grad = None,
            }
        }
        Ok(())
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    fn slots(&self, stage: usize) -> Result<&StageSlots> {
        self.stages
            .get(stage)
            .ok_or_else(|| Error::InvalidArgument(format!("no stage {stage}")))
    }

    /// Convolution, batch norm, ReLU and max pooling of one stage.
    pub fn cbrp_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        stage: usize,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.slots(stage)?;
        let c = &self.config;
        let conv = tape.conv2d(
            x,
            bound.var(s.conv_w),
            bound.var(s.conv_b),
            c.conv_stride,
            c.conv_padding,
        )?;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval(&self.running[stage]),
        };
        let (bn, stats) = tape.batch_norm2d(conv, bound.var(s.bn_gamma), bound.var(s.bn_beta), bn_mode)?;
        let act = tape.relu(bn);
        let pooled = tape.max_pool2d(act, c.pool_kernel, c.pool_stride)?;
        Ok((pooled, stats))
    }

    /// Channel attention: `x * sigmoid(conv1d(gap(x)) + conv1d(gmp(x)))`.
    pub fn seam_forward(&self, tape: &mut Tape<T>, bound: &Bound, stage: usize, x: Var) -> Result<Var> {
        let seam = self
            .slots(stage)?
            .seam
            .ok_or_else(|| Error::InvalidArgument(format!("stage {stage} has no attention module")))?;
        let shape = tape.value(x).shape().to_vec();
        let (n, ch) = (shape[0], shape[1]);
        let kernel = bound.var(seam.kernel);
        let avg = tape.global_avg_pool(x)?;
        let avg = tape.reshape(avg, vec![n, 1, ch])?;
        let max = tape.global_max_pool(x)?;
        let max = tape.reshape(max, vec![n, 1, ch])?;
        let v_avg = tape.conv1d(avg, kernel)?;
        let v_max = tape.conv1d(max, kernel)?;
        let logits = tape.add(v_avg, v_max)?;
        let attn = tape.sigmoid(logits);
        let attn = tape.reshape(attn, vec![n, ch])?;
        tape.channel_scale(x, attn)
    }

    /// One stage with alpha fusion of the attention and skip paths. The CBRP
    /// output is shared by both paths.
    pub fn stage_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        stage: usize,
        x: Var,
        mode: Mode,
    ) -> Result<StageOutput> {
        let (cbrp, bn_stats) = self.cbrp_forward(tape, bound, stage, x, mode)?;
        let Some(seam) = self.slots(stage)?.seam else {
            return Ok(StageOutput {
                output: cbrp,
                cbrp,
                bn_stats,
            });
        };
        let alpha = bound.var(seam.alpha);
        let attended = self.seam_forward(tape, bound, stage, cbrp)?;
        let weighted = tape.scale_by(attended, alpha)?;
        let one_minus_alpha = tape.affine(alpha, 1.0, -1.0);
        let skip = tape.scale_by(cbrp, one_minus_alpha)?;
        let output = tape.add(weighted, skip)?;
        Ok(StageOutput { output, cbrp, bn_stats })
    }

    /// Full network. `rng` drives dropout in train mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1] != c.input_channels || shape[2] != c.input_height || shape[3] != c.input_width {
            return Err(Error::Shape(format!(
                "model expects [batch, {}, {}, {}], got {:?}",
                c.input_channels, c.input_height, c.input_width, shape
            )));
        }
        let mut h = x;
        let mut bn_stats = Vec::new();
        for stage in 0..self.stages.len() {
            let out = self.stage_forward(tape, bound, stage, h, mode)?;
            bn_stats.extend(out.bn_stats);
            h = out.output;
        }
        let embedding = tape.global_avg_pool(h)?;
        let hidden = tape.linear(embedding, bound.var(self.fc1.0), bound.var(self.fc1.1))?;
        let hidden = tape.relu(hidden);
        let hidden = tape.dropout(hidden, c.dropout, mode, rng)?;
        let logits = tape.linear(hidden, bound.var(self.fc2.0), bound.var(self.fc2.1))?;
        Ok(ForwardOutput {
            logits,
            embedding,
            bn_stats,
        })
    }

    /// Eval-mode logits for a batch `[N, C, H, W]`.
    pub fn predict_logits(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.input(batch);
        // dropout is the identity in eval mode; the rng is never drawn from
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, x, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Binds parameters without gradient tracking.
    fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.input(p.value.clone())).collect(),
        }
    }
}

/// Number of trainable scalars.
pub fn param_count<T: Float>(params: &[Parameter<T>]) -> usize {
    params.iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
}

/// Multiply-accumulate count of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: String,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
    pub total: u64,
}

/// Analytic multiply-accumulate count per sample. Only convolutions and
/// linear layers are counted (`H_out * W_out * C_out * C_in * K^2` and `D * M`);
/// normalization, activations, pooling and the attention gating are free.
pub fn macs_per_sample(config: &ModelConfig) -> MacReport {
    let dims = config.spatial_dims();
    let k = config.conv_kernel as u64;
    let mut layers = Vec::new();
    let mut c_in = config.input_channels as u64;
    for (s, &c_out) in config.stage_widths.iter().enumerate() {
        let (h, w) = dims[s];
        let conv_h =
            ((h + 2 * config.conv_padding).saturating_sub(config.conv_kernel) / config.conv_stride.max(1) + 1) as u64;
        let conv_w =
            ((w + 2 * config.conv_padding).saturating_sub(config.conv_kernel) / config.conv_stride.max(1) + 1) as u64;
        let c_out = c_out as u64;
        layers.push(LayerMacs {
            layer: format!("stage{s}.conv"),
            macs: conv_h * conv_w * c_out * c_in * k * k,
        });
        if config.seam_enabled {
            let ks = seam_kernel_size(c_out as usize, config.seam_gamma, config.seam_b) as u64;
            // the shared kernel runs over both pooled descriptors
            layers.push(LayerMacs {
                layer: format!("stage{s}.seam.conv1d"),
                macs: 2 * c_out * ks,
            });
        }
        c_in = c_out;
    }
    let emb = config.embedding_dim() as u64;
    layers.push(LayerMacs {
        layer: "head.fc1".into(),
        macs: emb * config.fc_hidden as u64,
    });
    layers.push(LayerMacs {
        layer: "head.fc2".into(),
        macs: config.fc_hidden as u64 * config.num_classes as u64,
    });
    let total = layers.iter().map(|l| l.macs).sum();
    MacReport { layers, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            input_height: 16,
            input_width: 16,
            stage_widths: vec![4, 6, 8, 8],
            fc_hidden: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn kernel_size_rule() {
        let k: Vec<usize> = [32, 64, 128, 256]
            .iter()
            .map(|&c| seam_kernel_size(c, 2.0, 1.0))
            .collect();
        assert_eq!(k, vec![3, 3, 5, 5]);
        assert_eq!(seam_kernel_size(2, 2.0, 1.0), 3);
        assert_eq!(seam_kernel_size(1, 2.0, 1.0), 3);
        // log2(4096) = 12 -> 6.5 -> 7
        assert_eq!(seam_kernel_size(4096, 2.0, 1.0), 7);
    }

    #[test]
    fn default_param_count() {
        let m = Aecnn::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.param_count(), 425_658);
        let no_seam = ModelConfig {
            seam_enabled: false,
            ..ModelConfig::default()
        };
        let m = Aecnn::<f32>::new(no_seam, 0).unwrap();
        assert_eq!(m.param_count(), 425_658 - (3 + 3 + 5 + 5) - 4);
    }

    #[test]
    fn param_count_ignores_values() {
        let mut m = Aecnn::<f32>::new(small_config(), 1).unwrap();
        let before = m.param_count();
        for p in m.params_mut() {
            p.value.data_mut().fill(3.0);
        }
        assert_eq!(m.param_count(), before);
    }

    #[test]
    fn spatial_dims_default() {
        let dims = ModelConfig::default().spatial_dims();
        assert_eq!(dims, vec![(100, 100), (50, 50), (25, 25), (12, 12), (6, 6)]);
    }

    #[test]
    fn validate_lists_every_problem() {
        let bad = ModelConfig {
            stage_widths: vec![1, 2],
            dropout: 1.5,
            num_classes: 1,
            ..ModelConfig::default()
        };
        assert_eq!(bad.validate().len(), 3);
        let tiny = ModelConfig {
            input_height: 8,
            input_width: 8,
            ..ModelConfig::default()
        };
        assert_eq!(tiny.validate().len(), 1);
    }

    #[test]
    fn first_conv_macs() {
        let cfg = ModelConfig::default();
        let r = macs_per_sample(&cfg);
        assert_eq!(r.layers[0].macs, 100 * 100 * 32 * 12 * 9);
        assert_eq!(r.layers[0].macs, 34_560_000);
        let wide = ModelConfig {
            stage_widths: vec![64, 64, 128, 256],
            ..cfg.clone()
        };
        assert_eq!(macs_per_sample(&wide).layers[0].macs, 2 * r.layers[0].macs);
    }

    #[test]
    fn forward_shapes() {
        let cfg = small_config();
        let m = Aecnn::<f64>::new(cfg.clone(), 2).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let x = tape.input(Tensor::from_fn(vec![5, 3, 16, 16], |i| (i as f64 * 0.37).sin()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&mut tape, &bound, x, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[5, 6]);
        assert_eq!(tape.value(out.embedding).shape(), &[5, 8]);
        assert_eq!(out.bn_stats.len(), 4);

        let bad = tape.input(Tensor::zeros(vec![5, 2, 16, 16]));
        assert!(m.forward(&mut tape, &bound, bad, Mode::Eval, &mut rng).is_err());
    }
}
