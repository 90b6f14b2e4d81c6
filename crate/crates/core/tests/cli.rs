use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sgs_core::cli::read_scaling_history;
use tempfile::TempDir;

fn sgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgs")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write_config(dir: &Path, name: &str, sgs_section: &str) -> PathBuf {
    let body = format!(
        r#"[model]
input = [1, 12, 12]
layers = ["conv 4 3x3 relu", "maxpool", "conv 4 3x3 relu", "flatten", "dense 3"]

[data]
kind = "synthetic"
synthetic_train = 96
synthetic_test = 32
synthetic_classes = 3
synthetic_correlation_length = 2

[train]
epochs = 3
batch_size = 16
lr = 0.05
seed = 4

[sgs]
warmup_epochs = 0
refresh_every = 1
{sgs_section}
"#
    );
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

/// metrics.csv with the wall-clock column dropped.
fn metrics_without_time(dir: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let drop = headers.iter().position(|h| h == "wall_seconds").unwrap();
    rdr.records()
        .map(|r| {
            r.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != drop)
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn all_ones_scaling_matches_disabled_run() {
    let tmp = TempDir::new().unwrap();
    let off = write_config(tmp.path(), "off.toml", "enabled = false");
    let ones = write_config(tmp.path(), "ones.toml", "measure = \"alpha_beta\"\nalpha = 1.0\nbeta = 1.0");
    let (out_off, out_ones) = (tmp.path().join("off"), tmp.path().join("ones"));
    for (cfg, out) in [(&off, &out_off), (&ones, &out_ones)] {
        let o = sgs(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o.stderr));
    }
    assert_eq!(
        fs::read(out_off.join("weights.json")).unwrap(),
        fs::read(out_ones.join("weights.json")).unwrap()
    );
    assert_eq!(metrics_without_time(&out_off), metrics_without_time(&out_ones));
    let history = read_scaling_history(&out_ones.join("scalings.jsonl")).unwrap();
    assert_eq!(history.len(), 2 * 3);
    assert!(history.iter().all(|r| r.values.iter().all(|&v| v == 1.0)));
    assert!(read_scaling_history(&out_off.join("scalings.jsonl")).unwrap().is_empty());
    assert!(out_ones.join("resolved_config.toml").is_file());
}

#[test]
fn mi_training_writes_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "mi.toml", "");
    let out = tmp.path().join("run");
    let o = sgs(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--precision", "32"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(metrics_without_time(&out).len(), 3);
    for rec in read_scaling_history(&out.join("scalings.jsonl")).unwrap() {
        let mean = rec.values.iter().sum::<f64>() / rec.values.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(rec.values.iter().all(|&v| v > 0.0));
    }
    let deps = fs::read_to_string(out.join("dependence.jsonl")).unwrap();
    assert_eq!(deps.lines().count(), 6);
    let weights: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("weights.json")).unwrap()).unwrap();
    assert_eq!(weights["precision"], 32);

    let mag = sgs(&["magnitude", "--weights", out.join("weights.json").to_str().unwrap()]);
    assert!(mag.status.success(), "{}", text(&mag.stderr));
    assert!(!text(&mag.stdout).trim().is_empty());
}

#[test]
fn seed_override_changes_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "enabled = false");
    let run = |seed: &str, name: &str| {
        let out = tmp.path().join(name);
        let o = sgs(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success());
        fs::read(out.join("weights.json")).unwrap()
    };
    assert_eq!(run("9", "a"), run("9", "b"));
    assert_ne!(run("9", "c"), run("10", "d"));
}

#[test]
fn missing_dataset_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(
        &cfg,
        "[data]\nkind = \"mnist\"\ntrain_images = \"nowhere/train-images.gz\"\ntrain_labels = \"nowhere/l.gz\"\ntest_images = \"nowhere/t.gz\"\ntest_labels = \"nowhere/tl.gz\"\n",
    )
    .unwrap();
    let o = sgs(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("data.train_images"), "{}", text(&o.stderr));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let o = sgs(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("epochz"), "{}", text(&o.stderr));
}

#[test]
fn verify_equivalence_acb_passes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("eq");
    let o = sgs(&["verify-equivalence", "--kernel", "3x3", "--mask-family", "acb", "--steps", "100", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("PASS"), "{}", text(&o.stdout));
    let csv = fs::read_to_string(out.join("divergence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,max_rel_divergence,mean_rel_divergence"));
    let rows: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|&d| d < 1e-8));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("equivalence.json")).unwrap()).unwrap();
    assert_eq!(summary["verdict"], "PASS");
}

#[test]
fn verify_equivalence_full_mask_is_exact() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("eq");
    let o = sgs(&["verify-equivalence", "--mask-family", "full", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("divergence.csv")).unwrap();
    let worst = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn verify_equivalence_adam_has_no_guarantee() {
    let o = sgs(&["verify-equivalence", "--optimizer", "adam", "--steps", "20"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o.stdout).contains("NO GUARANTEE"), "{}", text(&o.stdout));
}

#[test]
fn verify_equivalence_failure_exit_code() {
    // an impossible tolerance forces the failure path
    let o = sgs(&["verify-equivalence", "--steps", "5", "--tolerance", "0", "--mask-family", "all_rectangles"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o.stdout));
    assert!(text(&o.stderr).contains("FAIL"));
}

#[test]
fn verify_equivalence_rejects_bad_arguments() {
    assert_eq!(sgs(&["verify-equivalence", "--kernel", "3by3"]).status.code(), Some(1));
    assert_eq!(sgs(&["verify-equivalence", "--mask-family", "hexagon"]).status.code(), Some(1));
    assert_eq!(sgs(&["verify-equivalence", "--kernel", "4x4"]).status.code(), Some(1));
    assert_eq!(sgs(&["frobnicate"]).status.code(), Some(1));
}

fn inspect(cfg: &Path, out: &Path) -> serde_json::Value {
    let o = sgs(&["inspect-scaling", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    serde_json::from_str(&fs::read_to_string(out.join("inspect.json")).unwrap()).unwrap()
}

#[test]
fn inspect_scaling_alpha_beta_identity() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ab.toml", "measure = \"alpha_beta\"\nalpha = 1.0\nbeta = 1.0");
    let v = inspect(&cfg, &tmp.path().join("o"));
    for layer in v.as_array().unwrap() {
        assert!(layer["scaling"].as_array().unwrap().iter().all(|x| x.as_f64() == Some(1.0)));
        assert!(layer["dependence"].is_null());
    }
}

#[test]
fn inspect_scaling_on_white_noise_peaks_at_center() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic_inspect.toml");
    let tmp = TempDir::new().unwrap();
    let v = inspect(&cfg, &tmp.path().join("o"));
    let first = &v.as_array().unwrap()[0];
    let g: Vec<f64> = first["scaling"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let s: Vec<f64> = first["dependence"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((s[4] - 1.0).abs() < 1e-12);
    for (i, &x) in s.iter().enumerate() {
        if i != 4 {
            assert!(x < 0.05, "off-center dependence {x} at {i}");
            assert!(g[i] < g[4]);
        }
    }
}

#[test]
fn magnitude_needs_a_weights_file() {
    let o = sgs(&["magnitude", "--weights", "/nonexistent/weights.json"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn grid_search_over_k() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", "");
    let out = tmp.path().join("grid");
    let o = sgs(&["grid-search", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--ks", "2,5"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("grid.csv")).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["cell", "k", "alpha", "beta", "validation_acc", "final_train_loss"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 2.0);
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 5.0);
    for r in &rows {
        let acc: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
