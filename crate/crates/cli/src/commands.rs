//! One function per subcommand. Each returns a serializable summary; the
//! binary prints it and maps errors to exit codes.

use crate::config::{parse_set, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::{
    BenchAugArgs, ConfigArgs, DiagnoseArgs, EvalArgs, GradcheckArgs, IngestArgs, SweepArgs, SweepParam, Task,
    ThresholdArg, TrainArgs,
};
use btsf_core::augment::PolicyKind;
use btsf_core::data::{
    load_from_manifest, write_csv, zscore_normalize, LabelKind, Labels, Split, TimeSeriesDataset,
};
use btsf_core::eval::{
    anomaly_eval, extract_features, extract_representations, false_prediction_overlap, forecast_dataset,
    forecast_eval, linear_probe_classify, positive_pair_alignment, uniformity_metric, AlignmentSummary,
    OverlapReport, TaskMetrics, TaskReport, ThresholdPolicy,
};
use btsf_core::model::{Model, ModelConfig};
use btsf_core::train::{draw_batch, gradcheck, train, Checkpoint, GradCheckReport, TrainConfig, Trainer};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter().map(|s| parse_set(s)).collect()
}

fn load_config(common: &ConfigArgs, extra: Vec<(String, String)>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut sets = overrides(&common.set)?;
    sets.extend(extra);
    let cfg = ExperimentConfig::load(&common.config, &sets)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir());
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    Ok((cfg, out))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("report serializes") + "\n")
}

/// A checkpoint can serve a dataset when the variable counts agree (or the
/// model encodes single variables) and the series are long enough.
fn check_compat(model: &ModelConfig, ds: &TimeSeriesDataset) -> Result<()> {
    let (c, d) = (model.in_channels, ds.n_vars());
    if c != d && c != 1 {
        return Err(CliError::Compatibility(format!(
            "checkpoint expects {c} variables per view, dataset has {d}"
        )));
    }
    let need = model.encoder.min_length();
    if ds.n_steps() < need {
        return Err(CliError::Compatibility(format!(
            "checkpoint encoder needs series of at least {need} steps, dataset has {}",
            ds.n_steps()
        )));
    }
    Ok(())
}

fn load_model(path: &Path, ds: &TimeSeriesDataset) -> Result<(Checkpoint, Model)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.model().map_err(|e| CliError::Compatibility(e.to_string()))?;
    check_compat(&model.config, ds)?;
    Ok((ckpt, model))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn split_counts(ds: &TimeSeriesDataset) -> SplitCounts {
    SplitCounts {
        train: ds.indices_of(Split::Train).len(),
        val: ds.indices_of(Split::Val).len(),
        test: ds.indices_of(Split::Test).len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub name: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub splits: SplitCounts,
    pub label_kind: LabelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_histogram: Option<BTreeMap<usize, usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_rate: Option<f64>,
    pub normalized: bool,
    pub processed_manifest: PathBuf,
}

pub fn cmd_ingest(args: &IngestArgs) -> Result<IngestSummary> {
    let raw = load_from_manifest(&args.manifest)?;
    let ds = if args.no_normalize {
        raw
    } else {
        let (ds, stats) = zscore_normalize(&raw, None)?;
        fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
        write_json(&args.out.join("stats.json"), &stats)?;
        ds
    };
    let processed_manifest = write_csv(&ds, &args.out)?;
    let class_histogram = ds.labels.classes().map(|c| {
        let mut h = BTreeMap::new();
        for &k in c {
            *h.entry(k).or_insert(0) += 1;
        }
        h
    });
    Ok(IngestSummary {
        name: ds.manifest.name.clone(),
        n: ds.len(),
        d: ds.n_vars(),
        t: ds.n_steps(),
        splits: split_counts(&ds),
        label_kind: ds.labels.kind(),
        class_histogram,
        anomaly_rate: ds.anomaly_rate(),
        normalized: !args.no_normalize,
        processed_manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub loss_csv: PathBuf,
    pub epochs: usize,
    pub steps: u64,
    pub final_loss: Option<f64>,
}

/// `step,loss` with losses in shortest round-trip notation.
fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt-{epoch}.bin"))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut extra = Vec::new();
    if let Some(s) = args.seed {
        extra.push(("seed".to_string(), s.to_string()));
    }
    if let Some(e) = args.epochs {
        extra.push(("train.epochs".to_string(), e.to_string()));
    }
    let (cfg, out) = load_config(&args.common, extra)?;
    let (ds, stats) = cfg.load_dataset()?;
    let tc = cfg.train_config();
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let trainer = Trainer::resume(ckpt, tc.clone())?;
            check_compat(&trainer.model.config, &ds)?;
            trainer
        }
        None => {
            let trainer = Trainer::new(tc.clone(), ds.n_vars())?;
            if ds.n_steps() < tc.encoder.min_length() {
                return Err(CliError::Input(format!(
                    "series of {} steps are shorter than the encoder's minimum {}",
                    ds.n_steps(),
                    tc.encoder.min_length()
                )));
            }
            trainer
        }
    };
    write_json(&out.join("config.json"), &cfg)?;
    if let Some(stats) = &stats {
        write_json(&out.join("stats.json"), stats)?;
    }
    let loss_path = out.join("loss.csv");
    let mut checkpoints = Vec::new();
    if args.resume.is_none() {
        let p = checkpoint_path(&out, 0);
        trainer.checkpoint().save(&p)?;
        checkpoints.push(p);
    }
    while trainer.epoch < tc.epochs {
        if let Err(e) = trainer.run_epoch(&ds) {
            write_file(&loss_path, loss_csv(&trainer.loss_history))?;
            return Err(e.into());
        }
        let p = checkpoint_path(&out, trainer.epoch);
        trainer.checkpoint().save(&p)?;
        checkpoints.push(p);
    }
    write_file(&loss_path, loss_csv(&trainer.loss_history))?;
    Ok(TrainSummary {
        output_dir: out,
        checkpoints,
        loss_csv: loss_path,
        epochs: trainer.epoch,
        steps: trainer.step_count(),
        final_loss: trainer.loss_history.last().copied(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub report: TaskReport,
    pub path: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let (cfg, out) = load_config(&args.common, vec![])?;
    let (ds, _) = cfg.load_dataset()?;
    let (_, model) = load_model(&args.checkpoint, &ds)?;
    let mut report = match args.task {
        Task::Classify => linear_probe_classify(&extract_representations(&model, &ds)?, cfg.eval.l2_strength)?,
        Task::Forecast => {
            let horizons = args.horizons.clone().unwrap_or_else(|| cfg.eval.horizons.clone());
            let data = forecast_dataset(&model, &ds, cfg.eval.input_len, &horizons, cfg.eval.stride)?;
            forecast_eval(&data, cfg.eval.ridge_strength)?
        }
        Task::Anomaly => {
            let policy = match (args.threshold_policy, args.tau) {
                (Some(ThresholdArg::Fixed), Some(tau)) => ThresholdPolicy::Fixed { tau },
                (Some(ThresholdArg::Fixed), None) => {
                    return Err(CliError::Input("--threshold-policy fixed requires --tau".into()));
                }
                (Some(ThresholdArg::BestF1), _) => ThresholdPolicy::BestF1,
                (None, Some(tau)) => ThresholdPolicy::Fixed { tau },
                (None, None) => cfg.eval.threshold_policy,
            };
            anomaly_eval(&model, &ds, &cfg.eval.decoder, policy)?
        }
    };
    if let serde_json::Value::Object(map) = &mut report.config {
        map.insert("checkpoint".into(), args.checkpoint.display().to_string().into());
        map.insert("dataset".into(), ds.manifest.name.clone().into());
    }
    let path = out.join(format!("report-{}.json", args.task.name()));
    write_json(&path, &report)?;
    Ok(EvalOutcome { report, path })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseReport {
    pub alignment: AlignmentSummary,
    pub uniformity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<OverlapReport>,
    pub n_instances: usize,
    pub notes: Vec<String>,
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<DiagnoseReport> {
    let (cfg, out) = load_config(&args.common, vec![])?;
    let (ds, _) = cfg.load_dataset()?;
    let (ckpt, model) = load_model(&args.checkpoint, &ds)?;
    let mut notes = Vec::new();
    let mut idx = ds.indices_of(Split::Test);
    if idx.is_empty() {
        notes.push("no test split; diagnostics use every instance".into());
        idx = (0..ds.len()).collect();
    }
    let alignment = positive_pair_alignment(&model, &ds, &idx, &ckpt.config.view_policy(), cfg.eval.diagnose_seed)?;
    let reps = extract_representations(&model, &ds.select(&idx))?;
    let uniformity = uniformity_metric(reps.reps.view())?;
    let overlap = match ds.labels {
        Labels::Class(_) => Some(false_prediction_overlap(&model, &ds, cfg.eval.l2_strength)?),
        _ => {
            notes.push("no class labels; overlap report skipped".into());
            None
        }
    };
    let report = DiagnoseReport {
        alignment,
        uniformity,
        overlap,
        n_instances: idx.len(),
        notes,
    };
    write_file(&out.join("alignment_hist.csv"), report.alignment.histogram_csv())?;
    write_json(&out.join("diagnose.json"), &report)?;
    Ok(report)
}

/// Trains on `ds` and returns test accuracy, AUPRC and the last loss.
fn train_and_probe(tc: &TrainConfig, ds: &TimeSeriesDataset, l2: f64) -> Result<(f64, f64, f64)> {
    let ckpt = train(tc, ds)?;
    let model = ckpt.model()?;
    let report = linear_probe_classify(&extract_representations(&model, ds)?, l2)?;
    let TaskMetrics::Classify(m) = report.metrics else {
        unreachable!("classification report")
    };
    Ok((m.accuracy, m.auprc, ckpt.loss_history.last().copied().unwrap_or(f64::NAN)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub accuracy: Option<f64>,
    pub auprc: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub csv: PathBuf,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepOutcome> {
    let (cfg, out) = load_config(&args.common, vec![])?;
    let (ds, _) = cfg.load_dataset()?;
    let mut rows = Vec::with_capacity(args.values.len());
    for &value in &args.values {
        let mut tc = cfg.train_config();
        let setting: std::result::Result<(), String> = match args.param {
            SweepParam::DropoutRate => {
                tc.dropout_rate = value;
                Ok(())
            }
            SweepParam::Temperature => {
                tc.loss.temperature = value;
                Ok(())
            }
            SweepParam::Loops if value >= 1.0 && value.fract() == 0.0 => {
                tc.fusion.loops = value as usize;
                Ok(())
            }
            SweepParam::Loops => Err(format!("loops must be a positive integer, got {value}")),
        };
        let result = setting.and_then(|()| train_and_probe(&tc, &ds, cfg.eval.l2_strength).map_err(|e| e.to_string()));
        rows.push(match result {
            Ok((acc, auprc, loss)) => SweepRow {
                param: args.param.name().into(),
                value,
                accuracy: Some(acc),
                auprc: Some(auprc),
                final_loss: Some(loss),
                error: None,
            },
            Err(e) => SweepRow {
                param: args.param.name().into(),
                value,
                accuracy: None,
                auprc: None,
                final_loss: None,
                error: Some(e),
            },
        });
    }
    let csv = out.join(format!("sweep-{}.csv", args.param.name()));
    let mut w = csv::Writer::from_path(&csv).map_err(|e| csv_error(&csv, e))?;
    w.write_record(["param", "value", "accuracy", "auprc", "final_loss", "error"])
        .map_err(|e| csv_error(&csv, e))?;
    for r in &rows {
        w.write_record([
            r.param.clone(),
            r.value.to_string(),
            opt(r.accuracy),
            opt(r.auprc),
            opt(r.final_loss),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_error(&csv, e))?;
    }
    w.flush().map_err(|e| CliError::io(&csv, e))?;
    Ok(SweepOutcome { rows, csv })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub policy: String,
    pub mean: Option<f64>,
    /// Sample variance over successful seeds; zero for a single seed.
    pub variance: Option<f64>,
    pub accuracies: Vec<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub csv: PathBuf,
}

pub fn cmd_bench_aug(args: &BenchAugArgs) -> Result<BenchOutcome> {
    if args.repeats == 0 {
        return Err(CliError::Input("--repeats must be at least 1".into()));
    }
    let (cfg, out) = load_config(&args.common, vec![])?;
    let (ds, _) = cfg.load_dataset()?;
    let mut rows = Vec::new();
    for policy in PolicyKind::benchmark_set(cfg.train.dropout_rate) {
        let mut accuracies = Vec::new();
        let mut errors = Vec::new();
        for r in 0..args.repeats as u64 {
            let mut tc = cfg.train_config();
            tc.seed = cfg.seed + r;
            tc.augmentation = Some(policy.clone());
            match train_and_probe(&tc, &ds, cfg.eval.l2_strength) {
                Ok((acc, _, _)) => accuracies.push(acc),
                Err(e) => errors.push(format!("seed {}: {e}", tc.seed)),
            }
        }
        let n = accuracies.len() as f64;
        let mean = (!accuracies.is_empty()).then(|| accuracies.iter().sum::<f64>() / n);
        let variance = mean.map(|m| {
            if accuracies.len() < 2 {
                0.0
            } else {
                accuracies.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0)
            }
        });
        rows.push(BenchRow {
            policy: policy.name().into(),
            mean,
            variance,
            accuracies,
            errors,
        });
    }
    let csv = out.join("bench-aug.csv");
    let mut w = csv::Writer::from_path(&csv).map_err(|e| csv_error(&csv, e))?;
    w.write_record(["policy", "mean", "variance", "runs", "accuracies", "errors"])
        .map_err(|e| csv_error(&csv, e))?;
    for r in &rows {
        let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
        w.write_record([
            r.policy.clone(),
            opt(r.mean),
            opt(r.variance),
            r.accuracies.len().to_string(),
            accs.join(";"),
            r.errors.join(";"),
        ])
        .map_err(|e| csv_error(&csv, e))?;
    }
    w.flush().map_err(|e| CliError::io(&csv, e))?;
    Ok(BenchOutcome { rows, csv })
}

/// Configuration of the built-in gradient check: m = n = 4, d = 4, l = 2 on
/// a 2-variable synthetic batch of four series.
pub fn gradcheck_default_config() -> ExperimentConfig {
    let doc = serde_json::json!({
        "dataset": {"synthetic": {"generator": "freq-classes", "n_classes": 2, "n_per_class": 10,
                     "D": 2, "T": 32, "mode": "spectral-only", "noise_std": 0.1, "seed": 1}},
        "seed": 11,
        "train": {"batch_size": 4},
        "encoder": {"d": 4, "m": 4, "n": 4},
        "fusion": {"l": 2}
    });
    ExperimentConfig::from_value(doc, &[], Path::new(".")).expect("built-in config is valid")
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradCheckReport> {
    let sets = overrides(&args.set)?;
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, &sets)?,
        None => {
            let doc = serde_json::to_value(gradcheck_default_config()).expect("config serializes");
            ExperimentConfig::from_value(doc, &sets, Path::new("."))?
        }
    };
    let (ds, _) = cfg.load_dataset()?;
    let tc = cfg.train_config();
    let model = Model::init(tc.model_config(ds.n_vars()), tc.seed)?;
    let idx = ds.indices_of(Split::Train);
    if idx.is_empty() {
        return Err(btsf_core::data::DataError::EmptyTrainSplit.into());
    }
    let batch = draw_batch(&tc, &ds, &idx, 0)?;
    let report = gradcheck(&model, &batch, &tc.loss, args.epsilon, args.tolerance)?;
    if let Some(path) = &args.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Probe accuracies of the fused representation and of the S2T and T2S
/// outputs of a model, on the test split.
pub fn feature_probe_accuracies(model: &Model, ds: &TimeSeriesDataset, l2: f64) -> Result<BTreeMap<String, f64>> {
    use btsf_core::eval::{probe_on_features, FeatureKind};
    let feats = extract_features(model, ds)?;
    let mut out = BTreeMap::new();
    for (name, kind) in [
        ("fused", FeatureKind::Fused),
        ("s2t", FeatureKind::S2T),
        ("t2s", FeatureKind::T2S),
        ("temporal_encoder", FeatureKind::Temporal),
        ("spectral_encoder", FeatureKind::Spectral),
    ] {
        let o = probe_on_features(feats.get(kind).view(), &feats.labels, &feats.splits, l2)?;
        out.insert(name.to_string(), o.metrics.accuracy);
    }
    Ok(out)
}
