//! Ingestion of the BJTU event recordings.
//!
//! The expected layout is one directory per class under the input root, each
//! holding one file per recording. A recording is a time-major
//! `samples x channels` matrix (10000 x 12 for the published data) and is
//! re-emitted channels-first as an `f32` container.
//!
//! Class directories are matched by name: a leading label digit (`0_noise`,
//! `3`) or a class keyword (`background`, `dig`, `knock`, `water`, `shak`,
//! `walk`; `noise` also means background), case-insensitively.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::save_tensor;
use super::manifest::{DatasetManifest, ManifestEntry, SampleKind, Source, Split, CLASS_NAMES, SAMPLES_DIR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How one recording file is decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    /// Numbers separated by whitespace, commas or semicolons, one time step
    /// per line.
    Text,
    /// Little-endian `f32`, time-major.
    RawF32,
    /// Little-endian `f64`, time-major.
    RawF64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertConfig {
    pub format: SampleFormat,
    pub channels: usize,
    pub samples: usize,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        ConvertConfig {
            format: SampleFormat::Text,
            channels: 12,
            samples: 10_000,
        }
    }
}

/// Label of a class directory name, if it names one.
pub fn resolve_class(dir_name: &str) -> Option<usize> {
    let name = dir_name.to_ascii_lowercase();
    let digits: String = name.chars().take_while(|c| c.is_ascii_digit()).collect();
    if !digits.is_empty() {
        return digits.parse().ok().filter(|&l: &usize| l < CLASS_NAMES.len());
    }
    const KEYS: [(&str, usize); 7] = [
        ("background", 0),
        ("noise", 0),
        ("dig", 1),
        ("knock", 2),
        ("water", 3),
        ("shak", 4),
        ("walk", 5),
    ];
    KEYS.iter().find(|(k, _)| name.contains(k)).map(|&(_, l)| l)
}

/// Decodes one time-major recording into a `[channels, samples]` tensor.
pub fn read_sample(bytes: &[u8], cfg: &ConvertConfig) -> Result<Tensor<f64>> {
    let (nc, nt) = (cfg.channels, cfg.samples);
    let values: Vec<f64> = match cfg.format {
        SampleFormat::Text => {
            let text = std::str::from_utf8(bytes).map_err(|_| Error::Data("text sample is not valid UTF-8".into()))?;
            let mut values = Vec::with_capacity(nc * nt);
            for (line_no, line) in text.lines().enumerate() {
                let fields: Vec<&str> = line
                    .split(|c: char| c.is_whitespace() || c == ',' || c == ';')
                    .filter(|f| !f.is_empty())
                    .collect();
                if fields.is_empty() {
                    continue;
                }
                if fields.len() != nc {
                    return Err(Error::Data(format!(
                        "line {} has {} values, expected {nc}",
                        line_no + 1,
                        fields.len()
                    )));
                }
                for f in fields {
                    values.push(
                        f.parse()
                            .map_err(|_| Error::Data(format!("line {}: cannot parse `{f}`", line_no + 1)))?,
                    );
                }
            }
            values
        }
        SampleFormat::RawF32 => {
            if !bytes.len().is_multiple_of(4) {
                return Err(Error::Data(format!(
                    "{} bytes is not a whole number of f32",
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        }
        SampleFormat::RawF64 => {
            if !bytes.len().is_multiple_of(8) {
                return Err(Error::Data(format!(
                    "{} bytes is not a whole number of f64",
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        }
    };
    if values.len() != nc * nt {
        return Err(Error::Data(format!(
            "expected {nt} x {nc} = {} values, found {}",
            nc * nt,
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("sample contains non-finite values".into()));
    }
    // time-major -> channels-first
    Ok(Tensor::from_fn(vec![nc, nt], |i| {
        let (c, t) = (i / nt, i % nt);
        values[t * nc + c]
    }))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Converts every recording under `input` and writes the dataset to `output`.
pub fn convert_bjtu(input: impl AsRef<Path>, output: impl AsRef<Path>, cfg: &ConvertConfig) -> Result<DatasetManifest> {
    let (input, output) = (input.as_ref(), output.as_ref());
    let samples_dir = output.join(SAMPLES_DIR);
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut entries = Vec::new();
    for class_dir in sorted_entries(input)? {
        if !class_dir.is_dir() {
            continue;
        }
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let label = resolve_class(&name)
            .ok_or_else(|| Error::Data(format!("directory `{name}` does not name a known class")))?;
        for file in sorted_entries(&class_dir)? {
            if !file.is_file() {
                continue;
            }
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let data = read_sample(&bytes, cfg).map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
            let stem = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let id = format!("{label}_{}_{}", sanitize(&name), sanitize(&stem));
            let rel = format!("{SAMPLES_DIR}/{id}.dast");
            save_tensor(output.join(&rel), &data.map(|v| v as f32))?;
            entries.push(ManifestEntry {
                id,
                path: rel,
                label,
                split: Split::Unassigned,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no recordings found under {}", input.display())));
    }
    let manifest = DatasetManifest::new(Source::Bjtu, None, SampleKind::Raw, entries);
    manifest.save(output)?;
    Ok(manifest)
}
