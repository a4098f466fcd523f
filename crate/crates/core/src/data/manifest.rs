use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::stft::StftConfig;

/// Class names in label order.
pub const CLASS_NAMES: [&str; 6] = ["background", "digging", "knocking", "watering", "shaking", "walking"];

/// Samples per class in the published BJTU event dataset.
pub const BJTU_CLASS_COUNTS: [usize; 6] = [2946, 2512, 2530, 2253, 2728, 2450];

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_DIR: &str = "samples";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Bjtu,
    Synthetic,
}

/// What the sample containers hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SampleKind {
    /// `[channels, samples]` recordings.
    Raw,
    /// `[channels, bins, frames]` spectrograms made with `stft`.
    Spectrogram { stft: StftConfig },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the dataset root.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub content: SampleKind,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(source: Source, seed: Option<u64>, content: SampleKind, samples: Vec<ManifestEntry>) -> Self {
        let mut m = DatasetManifest {
            source,
            seed,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            class_counts: vec![0; CLASS_NAMES.len()],
            content,
            samples,
        };
        m.recount();
        m
    }

    pub fn recount(&mut self) {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            if let Some(c) = counts.get_mut(s.label) {
                *c += 1;
            }
        }
        self.class_counts = counts;
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.class_names.iter().map(String::as_str).eq(CLASS_NAMES),
            Data,
            "class names {:?} do not match {:?}",
            self.class_names,
            CLASS_NAMES
        );
        for s in &self.samples {
            ensure!(
                s.label < CLASS_NAMES.len(),
                Data,
                "sample `{}` has label {} outside 0..{}",
                s.id,
                s.label,
                CLASS_NAMES.len()
            );
        }
        let mut counts = vec![0; CLASS_NAMES.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        ensure!(
            counts == self.class_counts,
            Data,
            "class_counts {:?} disagree with the sample list {:?}",
            self.class_counts,
            counts
        );
        Ok(())
    }

    pub fn entries(&self, split: Option<Split>) -> Vec<&ManifestEntry> {
        self.samples
            .iter()
            .filter(|s| split.is_none_or(|t| s.split == t))
            .collect()
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<PathBuf> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }
}

/// Per class, shuffles the samples with `seed` and sends
/// `floor(ratio * count)` of them to train, the rest to test.
pub fn split_stratified(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest> {
    ensure!(
        ratio > 0.0 && ratio < 1.0,
        InvalidArgument,
        "split ratio must be in (0, 1), got {ratio}"
    );
    let classes = manifest.class_names.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in manifest.samples.iter().enumerate() {
        ensure!(s.label < classes, Data, "sample `{}` has label {}", s.id, s.label);
        by_class[s.label].push(i);
    }
    let mut out = manifest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (c, idx) in by_class.iter_mut().enumerate() {
        ensure!(
            !idx.is_empty(),
            Data,
            "class {} ({}) has no samples",
            c,
            manifest.class_names[c]
        );
        idx.shuffle(&mut rng);
        let n_train = (ratio * idx.len() as f64).floor() as usize;
        for (k, &i) in idx.iter().enumerate() {
            out.samples[i].split = if k < n_train { Split::Train } else { Split::Test };
        }
    }
    Ok(out)
}

/// Class counts compared against the published composition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountReport {
    pub counts: Vec<usize>,
    pub expected: Vec<usize>,
    pub total: usize,
    pub matches_reference: bool,
}

pub fn count_report(manifest: &DatasetManifest) -> CountReport {
    let total = manifest.class_counts.iter().sum();
    CountReport {
        counts: manifest.class_counts.clone(),
        expected: BJTU_CLASS_COUNTS.to_vec(),
        total,
        matches_reference: manifest.class_counts == BJTU_CLASS_COUNTS,
    }
}
