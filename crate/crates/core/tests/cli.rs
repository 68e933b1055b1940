use std::path::Path;
use std::process::{Command, Output};

use iceg_core::image::Image;
use serde_json::Value;

fn iceg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iceg")).args(args).env_remove("ICEG_PROJECT_ROOT").output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn init(dir: &Path) -> String {
    let p = dir.join("proj").to_string_lossy().into_owned();
    json(&iceg(&["init", "--project", &p, "--synthetic", "--views", "10", "--size", "32", "--seed", "1"]));
    p
}

#[test]
fn segment_writes_mask_set_and_label_map() {
    let dir = tempfile::tempdir().unwrap();
    let p = init(dir.path());
    let v = json(&iceg(&["segment", "--project", &p, "--view", "r_0", "--max-masks", "5"]));
    assert!(v["masks"].as_array().unwrap().len() <= 5);
    let set = iceg_core::segmentation::read_mask_set(Path::new(v["mask_set"].as_str().unwrap())).unwrap();
    set.validate_partition().unwrap();
    let labels = Image::<f32>::load(Path::new(v["label_map"].as_str().unwrap()));
    assert!(labels.is_ok());
}

#[test]
fn render_matches_dataset_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let p = init(dir.path());
    let out = dir.path().join("r3.png");
    json(&iceg(&["render", "--project", &p, "--checkpoint", "base", "--view", "r_3", "--out", out.to_str().unwrap()]));
    let img = Image::<f32>::load(&out).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    let missing = iceg(&["render", "--project", &p, "--checkpoint", "nope.ckpt", "--view", "r_3"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn edit_with_style_image_runs_to_done() {
    let dir = tempfile::tempdir().unwrap();
    let p = init(dir.path());
    let style = dir.path().join("style.png");
    Image::filled(32, 32, [0.2f32, 0.3, 0.9]).save_png(&style).unwrap();
    let args = [
        "edit", "--project", &p, "--style-image", style.to_str().unwrap(), "--sample-rate", "0.2", "--color-iters", "20",
        "--checkpoint-every", "10",
    ];
    let v = json(&iceg(&args));
    assert_eq!(v["state"], "DONE");
    assert_eq!(v["sampled_views"].as_array().unwrap().len(), 2);
    let renders = Path::new(v["renders"].as_str().unwrap());
    assert_eq!(std::fs::read_dir(renders).unwrap().count(), 10);

    let again = iceg(&["edit", "--project", &p, "--resume", v["job_id"].as_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already completed"));
}

#[test]
fn preview_and_match() {
    let dir = tempfile::tempdir().unwrap();
    let p = init(dir.path());
    let out = dir.path().join("prev.png");
    let args = ["preview", "--project", &p, "--view", "r_2", "--edit-view", "r_0", "--hue", "280", "--out", out.to_str().unwrap()];
    json(&iceg(&args));
    assert!(Image::<f32>::load(&out).is_ok());
    let m = json(&iceg(&["match", "--project", &p, "--view", "r_2", "--edit-view", "r_2"]));
    for (k, e) in m["entries"].as_object().unwrap() {
        assert_eq!(e["edit_mask_id"].to_string(), *k);
    }
}

#[test]
fn usage_errors() {
    let out = iceg(&["segment", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let help = iceg(&["edit", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("project.json"));
    let dir = tempfile::tempdir().unwrap();
    let p = init(dir.path());
    let dup = iceg(&["init", "--project", &p, "--synthetic"]);
    assert_eq!(dup.status.code(), Some(1));
    let bad_rate = iceg(&["edit", "--project", &p, "--edit-view", "r_0", "--sample-rate", "1.5"]);
    assert_eq!(bad_rate.status.code(), Some(1));
}
