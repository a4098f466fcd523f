//! Containers, manifests, dataset ingestion and batching.
//!
//! A dataset directory holds `manifest.json` and `samples/<id>.dast`.

pub mod batch;
pub mod bjtu;
pub mod container;
pub mod manifest;
pub mod synth;

use std::fs;
use std::path::Path;

pub use batch::{batch_indices, load_batch, Batch, BatchIter, Dataset, DiskDataset, InMemoryDataset};
pub use bjtu::{convert_bjtu, ConvertConfig, SampleFormat};
pub use container::{load_any, load_tensor, save_tensor, AnyTensor};
pub use manifest::{
    count_report, split_stratified, CountReport, DatasetManifest, ManifestEntry, SampleKind, Source, Split,
    BJTU_CLASS_COUNTS, CLASS_NAMES,
};
pub use synth::{synth_event, synth_generate, synth_splits, SynthConfig};

use crate::error::{Error, Result};
use crate::stft::{RawEvent, SpectrogramGenerator, StftConfig};

/// Outcome of [`preprocess_dataset`].
#[derive(Debug)]
pub struct PreprocessReport {
    /// Manifest of the output directory, listing converted samples only.
    pub manifest: DatasetManifest,
    /// `(sample id, error)` for every sample that could not be converted.
    pub failures: Vec<(String, String)>,
}

/// Turns a dataset of raw recordings into one of `f32` spectrograms with the
/// same ids, labels and split tags. A malformed sample is recorded in the
/// report and skipped; the others are still written.
pub fn preprocess_dataset(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    stft: &StftConfig,
) -> Result<PreprocessReport> {
    let (input, output) = (input.as_ref(), output.as_ref());
    let manifest = DatasetManifest::load(input)?;
    if manifest.content != SampleKind::Raw {
        return Err(Error::Data(format!("{} already holds spectrograms", input.display())));
    }
    let generator = SpectrogramGenerator::new(stft.clone())?;
    let dir = output.join(manifest::SAMPLES_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let convert = |e: &ManifestEntry| -> Result<()> {
        let raw = RawEvent::new(load_any(input.join(&e.path))?.to_f64(), Some(e.label))?;
        let spec: crate::Tensor<f32> = generator.generate(&raw)?;
        save_tensor(output.join(&e.path), &spec)
    };
    let mut kept = Vec::new();
    let mut failures = Vec::new();
    for e in &manifest.samples {
        match convert(e) {
            Ok(()) => kept.push(e.clone()),
            Err(err) => failures.push((e.id.clone(), err.to_string())),
        }
    }
    let mut out = manifest;
    out.samples = kept;
    out.recount();
    out.content = SampleKind::Spectrogram { stft: stft.clone() };
    out.save(output)?;
    Ok(PreprocessReport {
        manifest: out,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_keeps_entries_and_matches_on_the_fly() {
        let raw = tempfile::tempdir().unwrap();
        let spec = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            samples_per_class: 1,
            ..SynthConfig::default()
        };
        let m = synth_generate(&cfg, raw.path()).unwrap();
        split_stratified(&m, 0.5, 0).unwrap().save(raw.path()).unwrap();
        let stft = StftConfig::default();
        let out = preprocess_dataset(raw.path(), spec.path(), &stft).unwrap();
        assert!(out.failures.is_empty());
        assert_eq!(out.manifest.samples, DatasetManifest::load(raw.path()).unwrap().samples);

        let on_the_fly = DiskDataset::open(raw.path(), None, &stft).unwrap();
        let stored = DiskDataset::open(spec.path(), None, &stft).unwrap();
        for i in 0..on_the_fly.len() {
            assert_eq!(on_the_fly.spectrogram(i).unwrap(), stored.spectrogram(i).unwrap());
        }
        let other = StftConfig {
            log_compress: false,
            ..stft
        };
        assert!(DiskDataset::open(spec.path(), None, &other).is_err());
        assert!(preprocess_dataset(spec.path(), raw.path(), &StftConfig::default()).is_err());
    }

    #[test]
    fn corrupt_sample_is_reported_and_skipped() {
        let raw = tempfile::tempdir().unwrap();
        let spec = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            samples_per_class: 1,
            ..SynthConfig::default()
        };
        let m = synth_generate(&cfg, raw.path()).unwrap();
        let bad = &m.samples[2];
        fs::write(raw.path().join(&bad.path), b"DASTgarbage").unwrap();
        let out = preprocess_dataset(raw.path(), spec.path(), &StftConfig::default()).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, bad.id);
        assert_eq!(out.manifest.samples.len(), 5);
        assert_eq!(out.manifest.class_counts[bad.label], 0);
        assert!(!spec.path().join(&bad.path).exists());
    }

    #[test]
    fn in_memory_splits_match_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            seed: 5,
            samples_per_class: 3,
            ..SynthConfig::default()
        };
        let stft = StftConfig::default();
        let m = synth_generate(&cfg, dir.path()).unwrap();
        split_stratified(&m, 0.67, 9).unwrap().save(dir.path()).unwrap();
        let (train, test) = synth_splits(&cfg, &stft, 0.67, 9).unwrap();
        for (split, mem) in [(Split::Train, &train), (Split::Test, &test)] {
            let disk = InMemoryDataset::load(dir.path(), Some(split), &stft).unwrap();
            assert_eq!(disk.len(), mem.len());
            assert_eq!(disk.labels(), mem.labels());
            for i in 0..disk.len() {
                assert_eq!(disk.spectrogram(i).unwrap(), mem.spectrogram(i).unwrap());
            }
        }
        assert_eq!(train.len(), 12);
    }
}
