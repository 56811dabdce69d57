//! Experiment configuration: one JSON document per run, with dotted-path
//! overrides applied before schema validation.

use crate::error::{CliError, Result};
use btsf_core::augment::{NegativePolicy, PolicyKind};
use btsf_core::data::{
    load_from_manifest, synth_anomaly_series, synth_freq_classes, zscore_normalize, FreqClassMode,
    NormalizationStats, TimeSeriesDataset,
};
use btsf_core::encoders::EncoderConfig;
use btsf_core::eval::{DecoderConfig, ThresholdPolicy};
use btsf_core::fusion::FusionConfig;
use btsf_core::loss::LossConfig;
use btsf_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

/// Where the series come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Path to a manifest JSON; relative paths resolve against the config file.
    Manifest(PathBuf),
    /// Seeded generator.
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SynthSpec {
    FreqClasses {
        n_classes: usize,
        n_per_class: usize,
        #[serde(rename = "D")]
        d: usize,
        #[serde(rename = "T")]
        t: usize,
        mode: FreqClassMode,
        noise_std: f64,
        seed: u64,
    },
    AnomalySeries {
        #[serde(rename = "D")]
        d: usize,
        #[serde(rename = "T")]
        t: usize,
        n_instances: usize,
        spike_rate: f64,
        spike_magnitude: f64,
        seed: u64,
    },
}

/// Optimizer and augmentation settings; the architecture and loss live in
/// their own sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: Option<usize>,
    pub dropout_rate: f64,
    pub augmentation: Option<PolicyKind>,
    pub negatives: NegativePolicy,
    pub n_negatives: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            dropout_rate: t.dropout_rate,
            augmentation: t.augmentation,
            negatives: t.negatives,
            n_negatives: t.n_negatives,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// L2 penalty of the logistic-regression probe.
    pub l2_strength: f64,
    /// Penalty of the forecasting ridge head.
    pub ridge_strength: f64,
    /// Input window of the forecasting protocol.
    pub input_len: usize,
    pub horizons: Vec<usize>,
    pub stride: usize,
    pub decoder: DecoderConfig,
    pub threshold_policy: ThresholdPolicy,
    /// Seed of the augmentation pairs used for alignment.
    pub diagnose_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            l2_strength: 1e-2,
            ridge_strength: 1.0,
            input_len: 48,
            horizons: vec![24, 48],
            stride: 8,
            decoder: DecoderConfig::default(),
            threshold_policy: ThresholdPolicy::BestF1,
            diagnose_seed: 0,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Z-score every variable with training-split statistics.
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Directory of the config file, for resolving relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Sets `path` (dot separated) in `doc` to `raw`, parsed as JSON when it is
/// valid JSON and kept as a string otherwise. Missing objects are created.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Input(format!("--set: bad path `{path}`")));
    }
    let mut cur = doc;
    for (i, key) in keys.iter().enumerate() {
        let obj = match cur {
            Value::Object(map) => map,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just created")
            }
            _ => {
                return Err(CliError::Input(format!(
                    "--set {path}: `{}` is not an object",
                    keys[..i].join(".")
                )));
            }
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

/// Splits a `key=value` override.
pub fn parse_set(arg: &str) -> Result<(String, String)> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Input(format!("--set expects key=value, got `{arg}`")))
}

impl ExperimentConfig {
    /// Parses `doc` after applying `overrides`, rejecting unknown keys with
    /// the JSON path of the offending entry, and validates the result.
    pub fn from_value(mut doc: Value, overrides: &[(String, String)], base_dir: &Path) -> Result<Self> {
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let mut cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            CliError::Input(format!("config: at `{path}`: {}", e.into_inner()))
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: invalid JSON: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_value(doc, overrides, &base)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()
            .validate()
            .map_err(|e| CliError::Input(format!("config: {e}")))?;
        self.eval
            .decoder
            .validate()
            .map_err(|e| CliError::Input(format!("config: {e}")))?;
        if self.eval.horizons.is_empty() || self.eval.horizons.contains(&0) {
            return Err(CliError::Input("config: eval.horizons must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// The training configuration assembled from the sections.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            seed: self.seed,
            dropout_rate: t.dropout_rate,
            augmentation: t.augmentation.clone(),
            negatives: t.negatives,
            n_negatives: t.n_negatives,
            loss: self.loss,
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
        }
    }

    /// Output directory, resolved like the dataset path.
    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.output_dir)
    }

    /// Loads or generates the dataset and, when configured, normalizes it.
    pub fn load_dataset(&self) -> Result<(TimeSeriesDataset, Option<NormalizationStats>)> {
        let raw = match &self.dataset {
            DatasetSource::Manifest(p) => load_from_manifest(&self.base_dir.join(p))?,
            DatasetSource::Synthetic(SynthSpec::FreqClasses {
                n_classes,
                n_per_class,
                d,
                t,
                mode,
                noise_std,
                seed,
            }) => synth_freq_classes(*n_classes, *n_per_class, *d, *t, *mode, *noise_std, *seed)?,
            DatasetSource::Synthetic(SynthSpec::AnomalySeries {
                d,
                t,
                n_instances,
                spike_rate,
                spike_magnitude,
                seed,
            }) => synth_anomaly_series(*d, *t, *n_instances, *spike_rate, *spike_magnitude, *seed)?,
        };
        if self.normalize {
            let (ds, stats) = zscore_normalize(&raw, None)?;
            Ok((ds, Some(stats)))
        } else {
            Ok((raw, None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "dataset": {"synthetic": {"generator": "freq-classes", "n_classes": 2, "n_per_class": 5,
                         "D": 1, "T": 32, "mode": "spectral-only", "noise_std": 0.1, "seed": 0}},
            "encoder": {"d": 4, "m": 4, "n": 4},
            "fusion": {"l": 2}
        })
    }

    #[test]
    fn overrides_reach_leaves() {
        let sets = vec![
            ("fusion.loops".to_string(), "1".to_string()),
            ("loss.temperature".to_string(), "0.1".to_string()),
            ("train.augmentation".to_string(), r#"{"kind":"jitter","sigma":0.1}"#.to_string()),
        ];
        let cfg = ExperimentConfig::from_value(base(), &sets, Path::new(".")).unwrap();
        assert_eq!(cfg.fusion.loops, 1);
        assert_eq!(cfg.loss.temperature, 0.1);
        assert_eq!(cfg.train.augmentation, Some(PolicyKind::Jitter { sigma: 0.1 }));
        assert_eq!(cfg.train_config().fusion.loops, 1);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let mut doc = base();
        doc["fusion"]["lops"] = json!(2);
        let err = ExperimentConfig::from_value(doc, &[], Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("fusion"), "{err}");
        assert!(err.to_string().contains("lops"), "{err}");

        let sets = vec![("nonsense.key".to_string(), "1".to_string())];
        let err = ExperimentConfig::from_value(base(), &sets, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn invalid_values_are_input_errors() {
        let sets = vec![("train.dropout_rate".to_string(), "1.5".to_string())];
        let err = ExperimentConfig::from_value(base(), &sets, Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(parse_set("no_equals").is_err());
        let mut v = json!({"a": 1});
        assert!(apply_override(&mut v, "a.b", "2").is_err());
        assert!(apply_override(&mut v, "a..b", "2").is_err());
    }

    #[test]
    fn string_values_fall_back_to_strings() {
        let mut v = json!({});
        apply_override(&mut v, "x.y", "hello").unwrap();
        apply_override(&mut v, "x.z", "[1,2]").unwrap();
        assert_eq!(v, json!({"x": {"y": "hello", "z": [1, 2]}}));
    }
}
