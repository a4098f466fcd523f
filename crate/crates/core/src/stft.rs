//! Multi-channel spectrogram front end.
//!
//! Each sensing channel is transformed independently:
//! `stft -> |.| -> log(1 + x) -> min-max to [0, 1]`, and the resulting planes
//! are stacked in channel order into a `[channels, bins, frames]` tensor.
//!
//! With the default configuration (symmetric Hann, `L = N = 198`, hop 100,
//! centered reflect framing) a `12 x 10000` recording becomes `12 x 100 x 100`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fft::FftPlan;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
}

/// Scope of the min-max scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Every channel plane independently.
    PerChannel,
    /// One min and max over the whole stack.
    Global,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window: Window,
    pub win_length: usize,
    pub fft_size: usize,
    pub hop_length: usize,
    /// Expected `(bins, frames)`; generation fails if the framing disagrees.
    pub target_dims: Option<(usize, usize)>,
    /// Reflect-pad by `win_length / 2` on both sides and produce
    /// `ceil(samples / hop)` frames centered on multiples of the hop.
    pub center: bool,
    pub log_compress: bool,
    pub normalize: Normalization,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window: Window::Hann,
            win_length: 198,
            fft_size: 198,
            hop_length: 100,
            target_dims: Some((100, 100)),
            center: true,
            log_compress: true,
            normalize: Normalization::PerChannel,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames for a signal of `samples` samples.
    pub fn frames(&self, samples: usize) -> usize {
        if self.hop_length == 0 {
            return 0;
        }
        if self.center {
            samples.div_ceil(self.hop_length)
        } else if samples < self.win_length {
            0
        } else {
            (samples - self.win_length) / self.hop_length + 1
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.win_length < 2 {
            errs.push(format!("stft.win_length must be >= 2, got {}", self.win_length));
        }
        if self.win_length > self.fft_size {
            errs.push(format!(
                "stft.win_length {} exceeds stft.fft_size {}",
                self.win_length, self.fft_size
            ));
        }
        if !self.fft_size.is_multiple_of(2) {
            errs.push(format!("stft.fft_size must be even, got {}", self.fft_size));
        }
        if self.hop_length == 0 {
            errs.push("stft.hop_length must be >= 1".into());
        }
        if let Some((h, w)) = self.target_dims {
            if h == 0 || w == 0 {
                errs.push("stft.target_dims must be positive".into());
            }
        }
        errs
    }
}

/// A multi-channel recording `[channels, samples]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub data: Tensor<f64>,
    pub label: Option<usize>,
}

impl RawEvent {
    pub fn new(data: Tensor<f64>, label: Option<usize>) -> Result<Self> {
        ensure!(
            data.rank() == 2,
            Shape,
            "raw event must be [channels, samples], got {:?}",
            data.shape()
        );
        ensure!(data.all_finite(), NonFinite, "raw event contains non-finite samples");
        Ok(RawEvent { data, label })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let n = self.samples();
        &self.data.data()[i * n..(i + 1) * n]
    }
}

/// Symmetric Hann window `0.5 (1 - cos(2 pi n / (L - 1)))`.
pub fn hann_window(len: usize) -> Result<Vec<f64>> {
    ensure!(len >= 2, InvalidArgument, "Hann window needs length >= 2, got {len}");
    let d = (len - 1) as f64;
    Ok((0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / d).cos()))
        .collect())
}

/// Complex one-sided STFT stored `[bins, frames]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }
}

/// Index into the signal for position `i` of the padded signal, mirroring
/// about the first and last sample without repeating them.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i;
    // a single reflection suffices because the pad is shorter than the signal
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

/// Reusable transform state for one configuration.
#[derive(Debug, Clone)]
pub struct SpectrogramGenerator {
    cfg: StftConfig,
    window: Vec<f64>,
    plan: FftPlan,
}

impl SpectrogramGenerator {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(Error::InvalidArgument(problems.join("; ")));
        }
        let window = match cfg.window {
            Window::Hann => hann_window(cfg.win_length)?,
        };
        let plan = FftPlan::new(cfg.fft_size)?;
        Ok(SpectrogramGenerator { cfg, window, plan })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Windowed frame `m` of `signal`, zero-padded to the transform length.
    fn frame(&self, signal: &[f64], m: usize, out: &mut [f64]) {
        let l = self.cfg.win_length;
        let start = (m * self.cfg.hop_length) as isize - if self.cfg.center { (l / 2) as isize } else { 0 };
        for (n, o) in out.iter_mut().enumerate() {
            *o = if n < l {
                signal[reflect(start + n as isize, signal.len())] * self.window[n]
            } else {
                0.0
            };
        }
    }

    fn check_signal(&self, signal: &[f64]) -> Result<()> {
        ensure!(
            signal.len() >= self.cfg.win_length,
            InvalidArgument,
            "signal of {} samples is shorter than the window ({})",
            signal.len(),
            self.cfg.win_length
        );
        Ok(())
    }

    /// One-sided STFT of a real signal.
    pub fn stft(&self, signal: &[f64]) -> Result<ComplexSpectrogram> {
        self.check_signal(signal)?;
        let (n, bins, frames) = (self.cfg.fft_size, self.cfg.bins(), self.cfg.frames(signal.len()));
        let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = Vec::new();
        // two real frames per complex transform: z = a + i b
        for m in (0..frames).step_by(2) {
            self.frame(signal, m, &mut a);
            let pair = m + 1 < frames;
            if pair {
                self.frame(signal, m + 1, &mut b);
            } else {
                b.fill(0.0);
            }
            for i in 0..n {
                buf[i] = Complex64::new(a[i], b[i]);
            }
            self.plan.forward(&mut buf, &mut scratch);
            for k in 0..bins {
                let z = buf[k];
                let zc = buf[(n - k) % n].conj();
                data[k * frames + m] = (z + zc) * 0.5;
                if pair {
                    data[k * frames + m + 1] = (z - zc) * Complex64::new(0.0, -0.5);
                }
            }
        }
        Ok(ComplexSpectrogram { bins, frames, data })
    }

    /// Magnitude, optional log compression; no normalization.
    pub fn channel_plane(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let mut p = magnitude(&self.stft(signal)?);
        if self.cfg.log_compress {
            p = log_compress(&p)?;
        }
        Ok(p)
    }

    /// Stacked `[channels, bins, frames]` spectrogram.
    pub fn generate<T: Float>(&self, raw: &RawEvent) -> Result<Tensor<T>> {
        let (bins, frames) = (self.cfg.bins(), self.cfg.frames(raw.samples()));
        if let Some((h, w)) = self.cfg.target_dims {
            ensure!(
                (bins, frames) == (h, w),
                Shape,
                "{} samples give {bins}x{frames} spectrograms, expected {h}x{w}",
                raw.samples()
            );
        }
        let plane = bins * frames;
        let mut out = Vec::with_capacity(raw.channels() * plane);
        for c in 0..raw.channels() {
            let mut p = self.channel_plane(raw.channel(c))?;
            if self.cfg.normalize == Normalization::PerChannel {
                p = minmax_normalize(&p);
            }
            out.extend(p);
        }
        if self.cfg.normalize == Normalization::Global {
            out = minmax_normalize(&out);
        }
        Tensor::new(
            vec![raw.channels(), bins, frames],
            out.into_iter().map(T::from_f64).collect(),
        )
    }
}

/// One-sided STFT with a freshly planned transform.
pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    SpectrogramGenerator::new(cfg.clone())?.stft(signal)
}

/// Elementwise modulus.
pub fn magnitude(s: &ComplexSpectrogram) -> Vec<f64> {
    s.data.iter().map(|z| z.re.hypot(z.im)).collect()
}

/// Elementwise `log(1 + x)`; negative input is rejected.
pub fn log_compress(p: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        p.iter().all(|&v| v >= 0.0),
        InvalidArgument,
        "log compression expects non-negative values"
    );
    Ok(p.iter().map(|v| v.ln_1p()).collect())
}

/// Scales to `[0, 1]`; a constant input maps to all zeros.
pub fn minmax_normalize(p: &[f64]) -> Vec<f64> {
    let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; p.len()];
    }
    p.iter().map(|&v| (v - lo) / range).collect()
}

/// [`SpectrogramGenerator::generate`] with a one-off generator.
pub fn generate_spectrogram<T: Float>(raw: &RawEvent, cfg: &StftConfig) -> Result<Tensor<T>> {
    SpectrogramGenerator::new(cfg.clone())?.generate(raw)
}

/// Per-frame naive DFT of the same framing, for testing.
pub fn naive_stft(signal: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let g = SpectrogramGenerator::new(cfg.clone())?;
    g.check_signal(signal)?;
    let (n, bins, frames) = (cfg.fft_size, cfg.bins(), cfg.frames(signal.len()));
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    let mut frame = vec![0.0; n];
    for m in 0..frames {
        g.frame(signal, m, &mut frame);
        for k in 0..bins {
            data[k * frames + m] = frame
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let q = (k * j) % n;
                    v * Complex64::from_polar(1.0, -2.0 * PI * q as f64 / n as f64)
                })
                .sum();
        }
    }
    Ok(ComplexSpectrogram { bins, frames, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn hann_examples() {
        assert!(close(&hann_window(3).unwrap(), &[0.0, 1.0, 0.0], 1e-15));
        assert!(close(&hann_window(5).unwrap(), &[0.0, 0.5, 1.0, 0.5, 0.0], 1e-15));
        let w = hann_window(198).unwrap();
        assert!((w.iter().sum::<f64>() - 197.0 / 2.0).abs() < 1e-10);
        assert!(hann_window(1).is_err());
    }

    #[test]
    fn default_framing() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.bins(), 100);
        assert_eq!(cfg.frames(10_000), 100);
        let uncentered = StftConfig { center: false, ..cfg };
        assert_eq!(uncentered.frames(10_000), 99);
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn dc_bin_is_window_sum() {
        let cfg = StftConfig {
            target_dims: None,
            ..StftConfig::default()
        };
        let c = 2.5;
        let s = stft(&vec![c; 1000], &cfg).unwrap();
        let wsum: f64 = hann_window(198).unwrap().iter().sum();
        for m in 0..s.frames {
            assert!((s.get(0, m).norm() - c * wsum).abs() < 1e-9);
        }
    }

    #[test]
    fn on_bin_sinusoid_peaks_at_its_bin() {
        let cfg = StftConfig {
            target_dims: None,
            ..StftConfig::default()
        };
        let k0 = 17;
        let x: Vec<f64> = (0..2000)
            .map(|t| (2.0 * PI * k0 as f64 * t as f64 / 198.0).cos())
            .collect();
        let s = stft(&x, &cfg).unwrap();
        let mag = magnitude(&s);
        for m in 0..s.frames {
            let peak = (0..s.bins)
                .max_by(|&a, &b| mag[a * s.frames + m].total_cmp(&mag[b * s.frames + m]))
                .unwrap();
            assert_eq!(peak, k0, "frame {m}");
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..10_000).map(|t| ((t * 7919) % 1009) as f64 / 1009.0 - 0.5).collect();
        let fast = stft(&x, &cfg).unwrap();
        let slow = naive_stft(&x, &cfg).unwrap();
        let scale = slow.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let err = fast
            .data
            .iter()
            .zip(&slow.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err / scale < 1e-9, "{err}");
        assert_eq!((fast.bins, fast.frames), (100, 100));
    }

    #[test]
    fn scalar_ops() {
        let s = ComplexSpectrogram {
            bins: 1,
            frames: 2,
            data: vec![Complex64::new(3.0, 4.0), Complex64::new(0.0, 0.0)],
        };
        assert_eq!(magnitude(&s), vec![5.0, 0.0]);
        let l = log_compress(&[0.0, std::f64::consts::E - 1.0]).unwrap();
        assert_eq!(l[0], 0.0);
        assert!((l[1] - 1.0).abs() < 1e-15);
        assert!(log_compress(&[-1e-12]).is_err());
        assert_eq!(minmax_normalize(&[1.0, 3.0]), vec![0.0, 1.0]);
        assert_eq!(minmax_normalize(&[5.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn short_signal_rejected() {
        assert!(stft(&[0.0; 100], &StftConfig::default()).is_err());
    }

    #[test]
    fn default_pipeline_shape_and_zero_input() {
        let raw = RawEvent::new(Tensor::zeros(vec![12, 10_000]), None).unwrap();
        let s: Tensor<f32> = generate_spectrogram(&raw, &StftConfig::default()).unwrap();
        assert_eq!(s.shape(), &[12, 100, 100]);
        assert!(s.data().iter().all(|&v| v == 0.0));
        let short = RawEvent::new(Tensor::zeros(vec![12, 9_000]), None).unwrap();
        assert!(generate_spectrogram::<f32>(&short, &StftConfig::default()).is_err());
    }

    #[test]
    fn global_normalization_spans_the_stack() {
        let cfg = StftConfig {
            target_dims: None,
            normalize: Normalization::Global,
            ..StftConfig::default()
        };
        let raw = RawEvent::new(
            Tensor::from_fn(vec![2, 400], |i| {
                if i < 400 {
                    (i as f64).sin()
                } else {
                    10.0 * (i as f64 * 0.3).cos()
                }
            }),
            None,
        )
        .unwrap();
        let s: Tensor<f64> = generate_spectrogram(&raw, &cfg).unwrap();
        let plane = s.numel() / 2;
        let max0 = s.data()[..plane].iter().cloned().fold(0.0, f64::max);
        let max1 = s.data()[plane..].iter().cloned().fold(0.0, f64::max);
        assert!(max0 < 1.0);
        assert_eq!(max1, 1.0);
    }

    #[test]
    fn invalid_config_lists_problems() {
        let cfg = StftConfig {
            win_length: 300,
            fft_size: 199,
            hop_length: 0,
            ..StftConfig::default()
        };
        assert_eq!(cfg.validate().len(), 3);
        assert!(SpectrogramGenerator::new(cfg).is_err());
    }

    fn small_cfg() -> StftConfig {
        StftConfig {
            win_length: 30,
            fft_size: 34,
            hop_length: 10,
            target_dims: None,
            ..StftConfig::default()
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn fast_equals_naive(x in prop::collection::vec(-100.0f64..100.0, 30..300)) {
            let cfg = small_cfg();
            let fast = stft(&x, &cfg).unwrap();
            let slow = naive_stft(&x, &cfg).unwrap();
            let scale = slow.data.iter().map(|z| z.norm()).fold(1e-12, f64::max);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                prop_assert!((a - b).norm() / scale < 1e-9);
            }
        }

        #[test]
        fn output_in_unit_range_with_extremes(
            x in prop::collection::vec(-5.0f64..5.0, 3 * 120),
        ) {
            let raw = RawEvent::new(Tensor::new(vec![3, 120], x).unwrap(), None).unwrap();
            let s: Tensor<f64> = generate_spectrogram(&raw, &small_cfg()).unwrap();
            let plane = s.numel() / 3;
            for c in 0..3 {
                let p = &s.data()[c * plane..(c + 1) * plane];
                prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let (lo, hi) = p.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
                if hi > 0.0 {
                    prop_assert_eq!(lo, 0.0);
                    prop_assert_eq!(hi, 1.0);
                }
            }
        }

        #[test]
        fn channels_are_independent(
            x in prop::collection::vec(-5.0f64..5.0, 3 * 100),
            y in prop::collection::vec(-5.0f64..5.0, 100),
            perm in Just(vec![2usize, 0, 1]).prop_shuffle(),
        ) {
            let cfg = small_cfg();
            let raw = RawEvent::new(Tensor::new(vec![3, 100], x.clone()).unwrap(), None).unwrap();
            let base: Tensor<f64> = generate_spectrogram(&raw, &cfg).unwrap();
            let plane = base.numel() / 3;

            let mut changed = x.clone();
            changed[100..200].copy_from_slice(&y);
            let raw2 = RawEvent::new(Tensor::new(vec![3, 100], changed).unwrap(), None).unwrap();
            let out2: Tensor<f64> = generate_spectrogram(&raw2, &cfg).unwrap();
            prop_assert_eq!(&base.data()[..plane], &out2.data()[..plane]);
            prop_assert_eq!(&base.data()[2 * plane..], &out2.data()[2 * plane..]);

            let permuted: Vec<f64> = perm.iter().flat_map(|&c| x[c * 100..(c + 1) * 100].to_vec()).collect();
            let raw3 = RawEvent::new(Tensor::new(vec![3, 100], permuted).unwrap(), None).unwrap();
            let out3: Tensor<f64> = generate_spectrogram(&raw3, &cfg).unwrap();
            for (i, &c) in perm.iter().enumerate() {
                prop_assert_eq!(&out3.data()[i * plane..(i + 1) * plane], &base.data()[c * plane..(c + 1) * plane]);
            }
        }

        #[test]
        fn deterministic(x in prop::collection::vec(-5.0f64..5.0, 2 * 90)) {
            let raw = RawEvent::new(Tensor::new(vec![2, 90], x).unwrap(), None).unwrap();
            let a: Tensor<f64> = generate_spectrogram(&raw, &small_cfg()).unwrap();
            let b: Tensor<f64> = generate_spectrogram(&raw, &small_cfg()).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
