use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use voxelfm_core::encoder::{save_checkpoint, EncoderConfig, EncoderState};

fn voxelfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxelfm")).args(args).output().expect("binary runs")
}

fn json_out(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

const SMALL: &str = r#"{
  "phantom": {
    "count": 6,
    "base": {
      "shape": [16, 16, 16], "spacing_mm": [3.0, 1.5, 1.5], "background_hu": -1000.0, "noise_sigma": 10.0,
      "organs": [
        {"label": 1, "geometry": "ellipsoid", "center": [0.5, 0.5, 0.5], "radii": [0.45, 0.4, 0.4], "mean_hu": -90.0, "hu_jitter": 10.0},
        {"label": 2, "geometry": "ellipsoid", "center": [0.5, 0.5, 0.3], "radii": [0.2, 0.2, 0.12], "mean_hu": -800.0, "hu_jitter": 10.0},
        {"label": 3, "geometry": "ellipsoid", "center": [0.5, 0.5, 0.7], "radii": [0.2, 0.2, 0.12], "mean_hu": 250.0, "hu_jitter": 10.0}
      ]
    },
    "center_jitter": 0.02, "radius_jitter": 0.05, "hu_offset_range": 20.0
  },
  "encoder": {"patch_shape": [8, 8, 8], "stages": 2, "base_channels": 2, "embed_dim": 8, "proj_dim": 4},
  "training": {
    "epochs": 2, "steps_per_epoch": 2, "warmup_epochs": 0, "base_lr": 0.001, "checkpoint_every": 1,
    "batch": {"scans_per_batch": 2, "patches_per_scan": 3, "patch_size": [8, 8, 8]}
  },
  "ablation": {
    "strategies": ["intra", "inter"], "variants": ["ntxent"], "crop_counts": [3], "seeds": [0],
    "probe_shots": 1, "probe_holdout": 2,
    "probe": {"iterations": 20, "lr": 0.05, "voxels_per_volume": 256, "seed": 0}
  },
  "search": {"patch": [8, 8, 8], "stride": [4, 4, 4], "occluder": [8, 8, 8], "top_k": 2}
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("config.json");
        std::fs::write(&config, SMALL).unwrap();
        let data = root.join("data");
        let out = voxelfm(&["phantom-gen", "--config", s(&config), "--out", s(&data), "--seed", "3"]);
        json_out(&out);
        let enc = EncoderConfig { patch_shape: [8, 8, 8], stages: 2, base_channels: 2, embed_dim: 8, proj_dim: 4 };
        let checkpoint = root.join("enc.ckpt");
        save_checkpoint(&EncoderState::<f32>::init(&enc, 1).unwrap(), 0, &checkpoint).unwrap();
        Fixture { _dir: dir, root, config, data, checkpoint }
    }

    fn run(&self, sub: &str, extra: &[&str]) -> Value {
        let out_dir = self.root.join(format!("out_{sub}"));
        let mut args = vec![sub, "--config", s(&self.config), "--out", s(&out_dir)];
        args.extend_from_slice(extra);
        json_out(&voxelfm(&args))
    }

    fn model(&self) -> [&str; 4] {
        ["--checkpoint", s(&self.checkpoint), "--data", s(&self.data)]
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(voxelfm(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    assert_eq!(voxelfm(&["--help"]).status.code(), Some(0));
}

#[test]
fn ablate_without_config_names_the_flag() {
    let out = voxelfm(&["ablate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"training": {"epochs": 0}}"#).unwrap();
    assert_eq!(voxelfm(&["phantom-gen", "--config", s(&bad)]).status.code(), Some(2));
    std::fs::write(&bad, r#"{"trainig": {}}"#).unwrap();
    assert_eq!(voxelfm(&["phantom-gen", "--config", s(&bad)]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let f = Fixture::new();
    let out = voxelfm(&["stability", "--checkpoint", "/nonexistent.ckpt", "--data", s(&f.data), "--a", "x", "--b", "y"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn phantom_gen_writes_requested_count() {
    let f = Fixture::new();
    let out = f.root.join("gen");
    let v = json_out(&voxelfm(&["phantom-gen", "--config", s(&f.config), "--out", s(&out), "--count", "8"]));
    assert_eq!(v["count"], 8);
    for i in 0..8 {
        for suffix in ["", "_mask"] {
            for ext in ["json", "raw"] {
                assert!(out.join(format!("phantom_{i:03}{suffix}.{ext}")).exists());
            }
        }
    }
}

#[test]
fn pretrain_then_probe_selects_a_checkpoint() {
    let f = Fixture::new();
    let v = f.run("pretrain", &["--data", s(&f.data), "--seed", "4"]);
    assert_eq!(v["steps"], 4);
    let ckpts: Vec<String> =
        v["checkpoints"].as_array().unwrap().iter().map(|c| c["path"].as_str().unwrap().to_string()).collect();
    assert_eq!(ckpts.len(), 2);
    assert!(Path::new(v["loss_curve"].as_str().unwrap()).exists());
    let mut args = vec!["--data", s(&f.data)];
    for c in &ckpts {
        args.extend(["--checkpoint", c.as_str()]);
    }
    let p = f.run("probe", &args);
    assert_eq!(p["reports"].as_array().unwrap().len(), 2);
    let sel = p["selected_epoch"].as_u64().unwrap();
    assert!(sel == 1 || sel == 2);
}

#[test]
fn search_self_match_and_heatmap_file() {
    let f = Fixture::new();
    let mut args = f.model().to_vec();
    args.extend(["--source", "phantom_000", "--center", "8,8,8", "--targets", "phantom_000,phantom_001", "--stride", "4"]);
    let v = f.run("search", &args);
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0]["best_similarity"].as_f64(), Some(1.0));
    assert_eq!(results[0]["best_position"], serde_json::json!([4, 4, 4]));
    let sidecar: Value =
        serde_json::from_str(&std::fs::read_to_string(results[1]["heatmap"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(sidecar["kind"], "heatmap");
}

#[test]
fn embed_then_retrieve_eval() {
    let f = Fixture::new();
    let v = f.run("embed", &f.model());
    // 6 volumes, window starts 0, 4, 8 per axis
    assert_eq!(v["records"], 162);
    let r = f.run("retrieve-eval", &["--store", v["store"].as_str().unwrap()]);
    assert_eq!(r["k"], 2);
    for key in ["precision_at_k", "average_precision_at_k", "hit_rate", "recall_at_k", "f1"] {
        let x = r[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{key} = {x}");
    }
}

#[test]
fn aggregated_embeddings_use_label_file() {
    let f = Fixture::new();
    let labels = f.root.join("labels.csv");
    std::fs::write(&labels, "id,label\nphantom_000,1\nphantom_001,1\nphantom_002,2\nphantom_003,2\n").unwrap();
    let mut args = f.model().to_vec();
    args.extend(["--aggregate", "--labels", s(&labels)]);
    let v = f.run("embed", &args);
    assert_eq!(v["records"], 6);
    let r = f.run("retrieve-eval", &["--store", v["store"].as_str().unwrap(), "--k", "1"]);
    assert_eq!(r["queries"], 4);
}

#[test]
fn saliency_stability_pca_and_ocd_write_outputs() {
    let f = Fixture::new();
    let mut args = f.model().to_vec();
    args.extend(["--volume", "phantom_002"]);
    let v = f.run("saliency", &args);
    assert_eq!(v["positions"], 8);
    assert!(Path::new(v["saliency"].as_str().unwrap()).exists());

    let mut args = f.model().to_vec();
    args.extend(["--a", "phantom_001", "--b", "phantom_001"]);
    let v = f.run("stability", &args);
    assert_eq!(v["median_cosine"].as_f64(), Some(1.0));
    let csv = std::fs::read_to_string(v["csv"].as_str().unwrap()).unwrap();
    assert!(csv.starts_with("zi,yi,xi,cosine,mse,outlier"));

    let mut args = f.model().to_vec();
    args.extend(["--volumes", "phantom_000,phantom_001"]);
    let v = f.run("pca-map", &args);
    let maps = v["maps"].as_array().unwrap();
    assert_eq!(maps.len(), 2);
    assert!(Path::new(maps[0]["png"].as_str().unwrap()).exists());

    let mut args = f.model().to_vec();
    args.extend(["--label", "3"]);
    let v = f.run("ocd", &args);
    assert_eq!(v["pairs"], 30);
    assert!(v["mean_cm"].as_f64().unwrap() >= 0.0);
}

#[test]
fn ablate_runs_a_small_table() {
    let f = Fixture::new();
    let v = f.run("ablate", &["--data", s(&f.data)]);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(Path::new(v["table"].as_str().unwrap()).exists());
}
