use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::container::load_any;
use super::manifest::{DatasetManifest, SampleKind, Split};
use crate::error::{ensure, Error, Result};
use crate::stft::{RawEvent, SpectrogramGenerator, StftConfig};
use crate::tensor::Tensor;

/// Labelled spectrograms addressable by index.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize;

    /// Spectrogram `[channels, bins, frames]` of one sample.
    fn spectrogram(&self, index: usize) -> Result<Tensor<f32>>;
}

/// Spectrograms held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    samples: Vec<Tensor<f32>>,
    labels: Vec<usize>,
}

impl InMemoryDataset {
    pub fn new(samples: Vec<Tensor<f32>>, labels: Vec<usize>) -> Result<Self> {
        ensure!(
            samples.len() == labels.len(),
            Shape,
            "{} samples but {} labels",
            samples.len(),
            labels.len()
        );
        if let Some(first) = samples.first() {
            ensure!(
                samples.iter().all(|s| s.shape() == first.shape()),
                Shape,
                "samples differ in shape"
            );
        }
        Ok(InMemoryDataset { samples, labels })
    }

    pub fn push(&mut self, sample: Tensor<f32>, label: usize) -> Result<()> {
        if let Some(first) = self.samples.first() {
            ensure!(
                first.shape() == sample.shape(),
                Shape,
                "sample {:?} does not match {:?}",
                sample.shape(),
                first.shape()
            );
        }
        self.samples.push(sample);
        self.labels.push(label);
        Ok(())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Loads every sample of `split` from a dataset directory.
    pub fn load(root: impl AsRef<Path>, split: Option<Split>, stft: &StftConfig) -> Result<Self> {
        Self::from_disk(&DiskDataset::open(root, split, stft)?)
    }

    pub fn from_disk(disk: &DiskDataset) -> Result<Self> {
        let mut out = InMemoryDataset::default();
        for i in 0..disk.len() {
            out.push(disk.spectrogram(i)?, disk.label(i))?;
        }
        Ok(out)
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn spectrogram(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self.samples[index].clone())
    }
}

/// Samples read from a dataset directory on demand. Raw recordings are
/// transformed on load.
pub struct DiskDataset {
    root: PathBuf,
    paths: Vec<String>,
    labels: Vec<usize>,
    generator: Option<SpectrogramGenerator>,
}

impl DiskDataset {
    pub fn open(root: impl AsRef<Path>, split: Option<Split>, stft: &StftConfig) -> Result<Self> {
        let manifest = DatasetManifest::load(root.as_ref())?;
        Self::with_manifest(root, &manifest, split, stft)
    }

    /// Like [`DiskDataset::open`] but with a manifest supplied by the caller,
    /// e.g. a re-split copy of the one on disk.
    pub fn with_manifest(
        root: impl AsRef<Path>,
        manifest: &DatasetManifest,
        split: Option<Split>,
        stft: &StftConfig,
    ) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let generator = match &manifest.content {
            SampleKind::Raw => Some(SpectrogramGenerator::new(stft.clone())?),
            SampleKind::Spectrogram { stft: used } => {
                ensure!(
                    used == stft,
                    Data,
                    "spectrograms in {} were made with a different STFT configuration",
                    root.display()
                );
                None
            }
        };
        let entries = manifest.entries(split);
        ensure!(
            !entries.is_empty(),
            Data,
            "split {:?} of {} is empty",
            split,
            root.display()
        );
        Ok(DiskDataset {
            paths: entries.iter().map(|e| e.path.clone()).collect(),
            labels: entries.iter().map(|e| e.label).collect(),
            root,
            generator,
        })
    }
}

impl Dataset for DiskDataset {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn spectrogram(&self, index: usize) -> Result<Tensor<f32>> {
        let any = load_any(self.root.join(&self.paths[index]))?;
        match &self.generator {
            Some(g) => g.generate(&RawEvent::new(any.to_f64(), Some(self.labels[index]))?),
            None => Ok(any.to_f32()),
        }
    }
}

/// Sample order for one epoch: a seeded shuffle of `0..n` (or the identity
/// when `shuffle` is off) cut into batches; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    ensure!(n > 0, Data, "cannot batch an empty split");
    ensure!(batch_size > 0, InvalidArgument, "batch size must be > 0");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacked inputs `[B, channels, bins, frames]` with their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

pub fn load_batch<D: Dataset + ?Sized>(dataset: &D, indices: &[usize]) -> Result<Batch> {
    ensure!(!indices.is_empty(), InvalidArgument, "empty batch");
    let items = indices
        .iter()
        .map(|&i| {
            if i >= dataset.len() {
                return Err(Error::InvalidArgument(format!("sample {i} out of range")));
            }
            dataset.spectrogram(i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        inputs: Tensor::stack(&items)?,
        labels: indices.iter().map(|&i| dataset.label(i)).collect(),
        indices: indices.to_vec(),
    })
}

/// Batches of one epoch, loaded lazily.
pub struct BatchIter<'a, D: ?Sized> {
    dataset: &'a D,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<'a, D: Dataset + ?Sized> BatchIter<'a, D> {
    pub fn new(dataset: &'a D, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Self> {
        Ok(BatchIter {
            dataset,
            batches: batch_indices(dataset.len(), batch_size, seed, epoch, shuffle)?.into_iter(),
        })
    }
}

impl<D: Dataset + ?Sized> Iterator for BatchIter<'_, D> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.batches.next().map(|idx| load_batch(self.dataset, &idx))
    }
}
