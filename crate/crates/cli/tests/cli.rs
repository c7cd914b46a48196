use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn yieldmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_yieldmap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("YIELDMAP_DATA")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&yieldmap(&[
        "gen", "--out", s(&data), "--chips", "3", "--size", "32", "--years", "2021,2022", "--seed", seed,
    ]));
    data
}

fn tiny_config(dir: &Path, tokenization: &str) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "encoder": {
                "patch_size": 16, "embed_dim": 8, "depth": 2, "heads": 2, "mlp_ratio": 2,
                "tap_layers": [1, 1, 2, 2], "tokenization": tokenization
            },
            "decoder": { "fpn_channels": 8, "psp_pool_sizes": [1] }
        },
        "train": { "epochs": 1, "batch_size": 2, "eval_batch_size": 2 }
    });
    let path = dir.join(format!("tiny_{tokenization}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn train_tiny(dir: &Path, data: &Path, tokenization: &str) -> PathBuf {
    let out = dir.join(format!("run_{tokenization}"));
    let cfg = tiny_config(dir, tokenization);
    ok(&yieldmap(&["train", "--config", s(&cfg), "--data", s(data), "--out", s(&out)]));
    out
}

fn read_log(run: &Path) -> Vec<Value> {
    fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_counts_determinism_and_size_check() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&yieldmap(&[
            "gen", "--out", s(out), "--chips", "10", "--size", "32", "--years", "2022,2023", "--seed", "5",
        ]));
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["chips"].as_array().unwrap().len(), 20);
    assert_eq!(manifest["val_years"], serde_json::json!([2023]));
    let mut files = 0;
    for entry in manifest["chips"].as_array().unwrap() {
        let rel = entry["path"].as_str().unwrap();
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap());
        files += 1;
    }
    assert_eq!(files, 20);
    assert_eq!(fs::read(a.join("stats.json")).unwrap(), fs::read(b.join("stats.json")).unwrap());

    let bad = yieldmap(&["gen", "--out", s(&dir.path().join("c")), "--size", "100"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_eval_predict_explain() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "1");
    let run = train_tiny(dir.path(), &data, "PER_TIMESTEP");
    for f in ["config.json", "best.json", "best.bin", "last.json", "last.bin"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = read_log(&run);
    assert_eq!(log.len(), 1);
    assert!(log[0]["train_main_loss"].is_number());
    assert!(log[0]["train_aux_loss"].is_number());
    assert!(log[0]["val_r2"].is_number());

    // resume continues numbering
    let cfg = tiny_config(dir.path(), "PER_TIMESTEP");
    ok(&yieldmap(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run),
        "--resume", s(&run.join("last.json")), "--epochs", "2",
    ]));
    let epochs: Vec<u64> = read_log(&run).iter().map(|r| r["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, vec![1, 2]);

    // eval
    let ckpt = run.join("last.json");
    let e1 = yieldmap(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "val"]);
    ok(&e1);
    let e2 = yieldmap(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "val"]);
    assert_eq!(e1.stdout, e2.stdout);
    let report: Value = serde_json::from_slice(&e1.stdout).unwrap();
    for unit in ["standardized", "kg_ha", "kg_ac", "bu_ac"] {
        assert!(report["rmse"][unit].is_number(), "rmse.{unit}");
        assert!(report["mae"][unit].is_number(), "mae.{unit}");
    }
    assert_eq!(report["pixels"], 3 * 32 * 32);
    let missing = yieldmap(&["eval", "--ckpt", s(&run.join("nope.json")), "--data", s(&data)]);
    assert_eq!(missing.status.code(), Some(4));

    // predict
    let chip = data.join("chips/2022/0000.cyp");
    let prefix = dir.path().join("pred/chip0");
    ok(&yieldmap(&["predict", "--ckpt", s(&ckpt), "--chip", s(&chip), "--out", s(&prefix)]));
    for kind in ["prediction", "truth", "residual"] {
        let bytes = fs::read(dir.path().join(format!("pred/chip0_{kind}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n32 32\n65535\n"));
        assert_eq!(bytes.len(), 15 + 2 * 32 * 32);
    }
    let side: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("pred/chip0.json")).unwrap()).unwrap();
    assert!(side["prediction"]["min_kg_ha"].as_f64().unwrap() >= 0.0);
    let junk = dir.path().join("junk.cyp");
    fs::write(&junk, b"not a chip").unwrap();
    let bad = yieldmap(&["predict", "--ckpt", s(&ckpt), "--chip", s(&junk), "--out", s(&prefix)]);
    assert_eq!(bad.status.code(), Some(2));

    // explain with default layers
    let report_path = dir.path().join("explain/report.json");
    ok(&yieldmap(&["explain", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report_path)]));
    let rep: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let layers = rep["layers"].as_array().unwrap();
    assert_eq!(layers.iter().map(|l| l["layer"].as_u64().unwrap()).collect::<Vec<_>>(), vec![1, 2]);
    for l in layers {
        for row in l["temporal_attention"]["matrix"].as_array().unwrap() {
            let sum: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let recv: f64 = l["receiving_score"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((recv - 5.0).abs() < 1e-6);
    }
    let spectral: f64 = rep["spectral_importance"]["scores"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((spectral - 1.0).abs() < 1e-9);
    assert!(dir.path().join("explain/report_example_residual.pgm").exists());
}

#[test]
fn flattened_checkpoint_cannot_be_explained() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "2");
    let run = train_tiny(dir.path(), &data, "FLATTENED_CHANNELS");
    let out = yieldmap(&[
        "explain", "--ckpt", s(&run.join("last.json")), "--data", s(&data), "--out", s(&dir.path().join("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("per-time-step"));
}

#[test]
fn diverging_run_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "3");
    let cfg = tiny_config(dir.path(), "PER_TIMESTEP");
    let out = yieldmap(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("boom")),
        "--lr-max", "1e30", "--lr-min", "1e29", "--epochs", "3", "--weight-decay", "0",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "4");
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 1, "mystery": true}}"#).unwrap();
    let out = yieldmap(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}
