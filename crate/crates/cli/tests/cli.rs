//! End-to-end checks of the `btsf` binary: exit codes, output files and
//! the documented command examples.

use btsf_core::data::{synth_anomaly_series, synth_freq_classes, write_csv, FreqClassMode};
use btsf_core::model::Model;
use btsf_core::train::Checkpoint;
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn btsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btsf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A small classification config: 2 spectral classes, 2 variables, T = 64.
fn class_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "dataset": {"synthetic": {"generator": "freq-classes", "n_classes": 2, "n_per_class": 10,
                     "D": 2, "T": 64, "mode": "spectral-only", "noise_std": 0.2, "seed": 4}},
        "output_dir": "out",
        "seed": 7,
        "train": {"batch_size": 4, "epochs": 2, "steps_per_epoch": 2},
        "encoder": {"d": 4, "m": 4, "n": 4},
        "fusion": {"l": 2, "loops": 2},
        "eval": {"input_len": 16, "stride": 16, "decoder": {"steps": 20}}
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_reports_shapes_and_rejects_missing_files() {
    let dir = TempDir::new().unwrap();
    let ds = synth_freq_classes(3, 5, 2, 32, FreqClassMode::SpectralOnly, 0.1, 0).unwrap();
    let manifest = write_csv(&ds, &dir.path().join("raw")).unwrap();
    let out = dir.path().join("ingested");
    let r = btsf(&["ingest", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let v = stdout_json(&r);
    assert_eq!((v["N"].as_u64(), v["D"].as_u64(), v["T"].as_u64()), (Some(15), Some(2), Some(32)));
    assert_eq!(v["class_histogram"]["0"], 5);
    assert!(out.join("stats.json").exists());

    let missing = dir.path().join("nope.json");
    let r = btsf(&["ingest", "--manifest", s(&missing)]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.json"));

    let anom = synth_anomaly_series(1, 100, 4, 0.05, 5.0, 1).unwrap();
    let manifest = write_csv(&anom, &dir.path().join("anom")).unwrap();
    let r = btsf(&["ingest", "--manifest", s(&manifest), "--out", s(&dir.path().join("anom_out"))]);
    assert_eq!(code(&r), 0);
    let v = stdout_json(&r);
    assert!((v["anomaly_rate"].as_f64().unwrap() - 0.05).abs() < 1e-12);
}

#[test]
fn train_is_deterministic_and_resumable() {
    let dir = TempDir::new().unwrap();
    let cfg = class_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let r = btsf(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(out)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
    assert_eq!(fs::read(a.join("ckpt-2.bin")).unwrap(), fs::read(b.join("ckpt-2.bin")).unwrap());
    assert_eq!(fs::read_to_string(a.join("loss.csv")).unwrap().lines().count(), 5);

    let c = dir.path().join("c");
    let r = btsf(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&c)]);
    assert_eq!(code(&r), 0);
    let r = btsf(&[
        "train",
        "--config",
        s(&cfg),
        "--resume",
        s(&c.join("ckpt-1.bin")),
        "--out",
        s(&c),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read(a.join("ckpt-2.bin")).unwrap(), fs::read(c.join("ckpt-2.bin")).unwrap());
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(c.join("loss.csv")).unwrap());
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = TempDir::new().unwrap();
    let cfg = class_config(dir.path());
    let out = dir.path().join("z");
    let r = btsf(&["train", "--config", s(&cfg), "--epochs", "0", "--out", s(&out)]);
    assert_eq!(code(&r), 0);
    let ckpt = Checkpoint::load(out.join("ckpt-0.bin")).unwrap();
    let init = Model::init(ckpt.model_config(), 7).unwrap();
    assert_eq!(ckpt.params, init.params);
    assert!(!out.join("ckpt-1.bin").exists());
}

#[test]
fn set_overrides_are_echoed_in_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = class_config(dir.path());
    let out = dir.path().join("o");
    let r = btsf(&["train", "--config", s(&cfg), "--epochs", "1", "--set", "fusion.loops=1", "--out", s(&out)]);
    assert_eq!(code(&r), 0);
    let ckpt = Checkpoint::load(out.join("ckpt-1.bin")).unwrap();
    let blob: Value = serde_json::from_str(&ckpt.config_json()).unwrap();
    assert_eq!(blob["fusion"]["loops"], 1);

    let r = btsf(&["train", "--config", s(&cfg), "--set", "fusion.lops=1", "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("fusion"));
}

#[test]
fn non_finite_loss_exits_3_and_keeps_last_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = class_config(dir.path());
    let out = dir.path().join("nan");
    let r = btsf(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "train.learning_rate=1e300",
        "--set",
        "train.steps_per_epoch=1",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("ckpt-1.bin").exists());
    assert!(!out.join("ckpt-2.bin").exists());
    assert!(Checkpoint::load(out.join("ckpt-1.bin")).is_ok());
}

#[test]
fn eval_tasks_and_compatibility() {
    let dir = TempDir::new().unwrap();
    let cfg = class_config(dir.path());
    let out = dir.path().join("e");
    assert_eq!(code(&btsf(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    let ckpt = out.join("ckpt-2.bin");

    let r = btsf(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--task", "classify", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let v = stdout_json(&r);
    assert_eq!(v["task"], "classify");
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.join("report-classify.json").exists());

    let r = btsf(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--task", "forecast", "--horizons", "24,48", "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let v = stdout_json(&r);
    assert_eq!(v["horizons"].as_array().unwrap().len(), 2);

    let r = btsf(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--task", "forecast", "--horizons", "60", "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 2);

    // Same architecture on three variables: incompatible checkpoint.
    let r = btsf(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--task", "classify", "--set",
        "dataset.synthetic.D=3", "--out", s(&out),
    ]);
    assert_eq!(code(&r), 4, "{}", String::from_utf8_lossy(&r.stderr));

    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let r = btsf(&["eval", "--config", s(&cfg), "--checkpoint", s(&garbage), "--task", "classify", "--out", s(&out)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn anomaly_eval_echoes_fixed_threshold() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("anom.json");
    let cfg = json!({
        "dataset": {"synthetic": {"generator": "anomaly-series", "D": 2, "T": 64, "n_instances": 10,
                     "spike_rate": 0.05, "spike_magnitude": 10.0, "seed": 2}},
        "train": {"batch_size": 4, "epochs": 1, "steps_per_epoch": 2},
        "encoder": {"d": 4, "m": 4, "n": 4},
        "fusion": {"l": 2},
        "eval": {"decoder": {"steps": 20}}
    });
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&btsf(&["train", "--config", s(&cfg_path), "--out", s(&out)])), 0);
    let r = btsf(&[
        "eval",
        "--config",
        s(&cfg_path),
        "--checkpoint",
        s(&out.join("ckpt-1.bin")),
        "--task",
        "anomaly",
        "--threshold-policy",
        "fixed",
        "--tau",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let v = stdout_json(&r);
    assert_eq!(v["threshold"], 0.5);
    assert_eq!(v["threshold_policy"]["policy"], "fixed");
    assert_eq!(v["threshold_policy"]["tau"], 0.5);
}

#[test]
fn diagnose_writes_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = class_config(dir.path());
    let out = dir.path().join("d");
    assert_eq!(code(&btsf(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&out)])), 0);
    let r = btsf(&["diagnose", "--config", s(&cfg), "--checkpoint", s(&out.join("ckpt-1.bin")), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let v = stdout_json(&r);
    assert!(v["alignment"]["mean"].as_f64().unwrap() >= 0.0);
    assert!(v["uniformity"].as_f64().unwrap() <= 0.0);
    assert!(v["overlap"]["n_test"].as_u64().unwrap() > 0);
    let hist = fs::read_to_string(out.join("alignment_hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 41);
    assert!(out.join("diagnose.json").exists());
}

#[test]
fn sweep_and_bench_tables_have_one_row_per_setting() {
    let dir = TempDir::new().unwrap();
    let cfg = class_config(dir.path());
    let out = dir.path().join("s");
    let r = btsf(&[
        "sweep", "--config", s(&cfg), "--param", "dropout_rate", "--values", "0.01,0.05,0.1,0.15,0.2,0.3",
        "--set", "train.epochs=1", "--out", s(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let table = fs::read_to_string(out.join("sweep-dropout_rate.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);

    let r = btsf(&[
        "sweep", "--config", s(&cfg), "--param", "loops", "--values", "1,1.5", "--set", "train.epochs=1", "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 0);
    let v = stdout_json(&r);
    assert!(v["rows"][0]["error"].is_null());
    assert!(v["rows"][1]["error"].as_str().unwrap().contains("integer"));

    let mut tables = Vec::new();
    for name in ["b1", "b2"] {
        let o = dir.path().join(name);
        let r = btsf(&[
            "bench-aug", "--config", s(&cfg), "--repeats", "3", "--set", "train.epochs=1", "--set",
            "train.steps_per_epoch=1", "--out", s(&o),
        ]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        tables.push(fs::read_to_string(o.join("bench-aug.csv")).unwrap());
    }
    assert_eq!(tables[0].lines().count(), 10);
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn gradcheck_passes_on_the_builtin_model() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("gc.json");
    let r = btsf(&["gradcheck", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let v = stdout_json(&r);
    assert_eq!(v["passed"], true);
    assert!(out.exists());
    let r = btsf(&["gradcheck", "--tolerance", "1e-300"]);
    assert_eq!(code(&r), 3);
}

#[test]
fn help_lists_flags() {
    for (cmd, flags) in [
        ("train", &["--config", "--set", "--seed", "--epochs", "--resume", "--out"][..]),
        ("eval", &["--checkpoint", "--task", "--threshold-policy", "--tau", "--horizons"][..]),
        ("sweep", &["--param", "--values"][..]),
        ("bench-aug", &["--repeats"][..]),
        ("gradcheck", &["--epsilon", "--tolerance"][..]),
        ("ingest", &["--manifest", "--no-normalize"][..]),
        ("diagnose", &["--checkpoint"][..]),
    ] {
        let r = btsf(&[cmd, "--help"]);
        assert_eq!(code(&r), 0);
        let text = String::from_utf8_lossy(&r.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}
