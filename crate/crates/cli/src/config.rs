//! Run configuration: built-in defaults, then a JSON file, then `--set`
//! overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use aecnn::data::{SampleFormat, Source, SynthConfig};
use aecnn::model::ModelConfig;
use aecnn::stft::StftConfig;
use aecnn::train::TrainConfig;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory used when a command gets no `--data`.
    pub root: Option<PathBuf>,
    pub source: Source,
    /// Fraction of every class assigned to the training split.
    pub train_ratio: f64,
    pub split_seed: u64,
    /// Decoder for recordings handed to `convert`.
    pub format: SampleFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            source: Source::Synthetic,
            train_ratio: 0.8,
            split_seed: 0,
            format: SampleFormat::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Every problem with the merged configuration, one line per field.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.stft.validate();
        errs.extend(self.model.validate());
        errs.extend(self.train.validate());
        errs.extend(self.synth.validate());
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            errs.push(format!(
                "data.train_ratio must be in (0, 1), got {}",
                self.data.train_ratio
            ));
        }
        if let Some((h, w)) = self.stft.target_dims {
            if (h, w) != (self.model.input_height, self.model.input_width) {
                errs.push(format!(
                    "stft.target_dims {h}x{w} does not match model input {}x{}",
                    self.model.input_height, self.model.input_width
                ));
            }
        }
        errs
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Configuration problems; every entry names one field.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

fn defaults_value() -> Value {
    serde_json::to_value(RunConfig::default()).expect("config serializes")
}

/// Parses `section.field=value`. The value is read as JSON when possible and
/// as a plain string otherwise.
fn parse_override(s: &str) -> Result<(Vec<String>, Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("override `{s}` is not of the form section.field=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(format!("override `{s}` has an empty key segment"));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

/// Recursively overlays `patch` onto `base`, recording keys unknown to `base`.
fn merge(base: &mut Value, patch: &Value, prefix: &str, errs: &mut Vec<String>) {
    let (Value::Object(b), Value::Object(p)) = (&mut *base, patch) else {
        *base = patch.clone();
        return;
    };
    for (k, v) in p {
        let name = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match b.get_mut(k) {
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &name, errs),
            Some(slot) if slot.is_object() => errs.push(format!("{name} is a section, not a value")),
            Some(slot) => *slot = v.clone(),
            None => errs.push(format!("{name} is not a known field")),
        }
    }
}

fn section<T: DeserializeOwned>(root: &Map<String, Value>, name: &str, errs: &mut Vec<String>) -> Option<T> {
    let value = root.get(name).cloned().unwrap_or(Value::Null);
    match serde_json::from_value(value) {
        Ok(v) => Some(v),
        Err(e) => {
            errs.push(format!("{name}: {e}"));
            None
        }
    }
}

/// Builds the configuration from defaults, an optional file and overrides,
/// in increasing precedence, and validates the result.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut errs = Vec::new();
    let mut value = defaults_value();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(vec![format!("{}: {e}", path.display())]))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| ConfigError(vec![format!("{}: {e}", path.display())]))?;
        if !patch.is_object() {
            return Err(ConfigError(vec![format!("{}: expected a JSON object", path.display())]));
        }
        merge(&mut value, &patch, "", &mut errs);
    }
    for o in overrides {
        match parse_override(o) {
            Ok((path, v)) => {
                let patch = path.iter().rev().fold(v, |acc, k| {
                    let mut m = Map::new();
                    m.insert(k.clone(), acc);
                    Value::Object(m)
                });
                merge(&mut value, &patch, "", &mut errs);
            }
            Err(e) => errs.push(e),
        }
    }
    let root = value.as_object().expect("object");
    let stft = section(root, "stft", &mut errs);
    let model = section(root, "model", &mut errs);
    let train = section(root, "train", &mut errs);
    let synth = section(root, "synth", &mut errs);
    let data = section(root, "data", &mut errs);
    let cfg = (|| {
        Some(RunConfig {
            stft: stft?,
            model: model?,
            train: train?,
            synth: synth?,
            data: data?,
        })
    })();
    match cfg {
        Some(cfg) if errs.is_empty() => {
            let problems = cfg.validate();
            if problems.is_empty() {
                Ok(cfg)
            } else {
                Err(ConfigError(problems))
            }
        }
        _ => Err(ConfigError(errs)),
    }
}

/// `section.field = default` for every configuration field.
pub fn reference() -> String {
    fn walk(v: &Value, prefix: &str, out: &mut String) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let name = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(child, &name, out);
                }
            }
            leaf => {
                let _ = writeln!(out, "  {prefix} = {leaf}");
            }
        }
    }
    let mut out =
        String::from("Configuration fields and defaults (override with --config FILE or --set section.field=value):\n");
    walk(&defaults_value(), "", &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        assert_eq!(load(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"train": {"epochs": 7, "lr": 0.01}, "model": {"seam_enabled": false}}"#,
        )
        .unwrap();
        let cfg = load(Some(&path), &["train.epochs=3".into(), "data.source=bjtu".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.01);
        assert!(!cfg.model.seam_enabled);
        assert_eq!(cfg.data.source, Source::Bjtu);
        assert_eq!(cfg.stft, StftConfig::default());
    }

    #[test]
    fn every_bad_field_is_listed() {
        let err = load(
            None,
            &[
                "train.lr=-1".into(),
                "train.batch_size=0".into(),
                "stft.hop_length=0".into(),
            ],
        )
        .unwrap_err();
        assert_eq!(err.0.len(), 3, "{err}");
        let err = load(None, &["train.bogus=1".into(), "nope.x=2".into(), "model=3".into()]).unwrap_err();
        assert_eq!(err.0.len(), 3, "{err}");
        let err = load(None, &["train.epochs=many".into()]).unwrap_err();
        assert!(err.0[0].starts_with("train:"), "{err}");
    }

    #[test]
    fn reference_lists_nested_fields() {
        let r = reference();
        assert!(r.contains("train.lr = 0.0001"));
        assert!(r.contains("stft.hop_length = 100"));
        assert!(r.contains("model.stage_widths = [32,64,128,256]"));
        assert!(r.contains("data.train_ratio = 0.8"));
    }
}
