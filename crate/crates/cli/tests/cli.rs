use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualpath::nn::{load_checkpoint, save_checkpoint};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualpath"))
}

fn tiny_config(dir: &Path, mode: &str) -> PathBuf {
    let bottom = if mode == "end_pose_control" { "aux" } else { "part1" };
    let cfg = json!({
        "seed": 3,
        "output_dir": dir.join("run"),
        "model": {
            "past_frames": 4, "future_frames": 6, "latent_dim": 3, "hidden_dim": 8,
            "mode": mode, "bottom_input": bottom
        },
        "dataset": { "count": 20 },
        "optimizer": { "epochs": 3, "batch_size": 8, "lr": 1e-3 },
        "flow": { "optimizer": { "epochs": 2, "batch_size": 32 } },
        "sampler": { "k": 4, "hidden_dim": 8, "optimizer": { "epochs": 2, "batch_size": 8 } },
        "eval": { "k_random": 5, "k_diversity": 4 }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    let out = bin().arg("--config").arg(config).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn status(config: &Path, args: &[&str]) -> i32 {
    bin().arg("--config").arg(config).args(args).output().unwrap().status.code().unwrap()
}

fn first_motion(run_dir: &Path) -> PathBuf {
    let split: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("data/split.json")).unwrap()).unwrap();
    run_dir.join("data").join(split["files"][0].as_str().unwrap())
}

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

fn full_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = tiny_config(dir, "partial_body_control");
    let run_dir = dir.join("run");
    let mut stdout = Vec::new();
    for args in [
        &["make-data"][..],
        &["train"],
        &["train-pose-prior"],
        &["train-sampler"],
    ] {
        stdout.extend(run(&cfg, args).stdout);
    }
    let past = first_motion(&run_dir);
    let past = past.to_str().unwrap();
    for args in [
        &["generate", "--past", past, "--plot"][..],
        &["generate", "--past", past, "--fix-zb", "--diverse"],
        &["evaluate"],
        &["evaluate", "--protocol", "diversity", "--control", "fix_zb"],
        &["evaluate", "--control", "fix_zt", "-k", "3"],
        &["export"],
    ] {
        stdout.extend(run(&cfg, args).stdout);
    }
    let mut files = snapshot(&run_dir);
    files.push(("stdout".into(), stdout));
    files
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let fa = full_pipeline(dir.path());
    fs::remove_dir_all(dir.path().join("run")).unwrap();
    let fb = full_pipeline(dir.path());
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "data/split.json",
        "model/manifest.json",
        "model/params.bin",
        "model/training_log.csv",
        "pose_prior/params.bin",
        "sampler/training_log.csv",
        "generated/sample_000.json",
        "generated/sample_000.svg",
        "eval/random_sampling_none.json",
        "eval/diversity_sampling_fix_zb.txt",
        "export/config.json",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
    let log = String::from_utf8(fa.iter().find(|(n, _)| n == "model/training_log.csv").unwrap().1.clone()).unwrap();
    assert!(log.starts_with("epoch,rec_top,rec_bottom,kl_top,kl_bottom,total\n"));
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn resume_reproduces_uninterrupted_training() {
    let full = tempfile::tempdir().unwrap();
    let cfg = tiny_config(full.path(), "partial_body_control");
    run(&cfg, &["make-data"]);
    run(&cfg, &["train"]);

    let part = tempfile::tempdir().unwrap();
    let cfg2 = tiny_config(part.path(), "partial_body_control");
    let mut short: Value = serde_json::from_str(&fs::read_to_string(&cfg2).unwrap()).unwrap();
    short["optimizer"]["epochs"] = json!(1);
    let short_path = part.path().join("short.json");
    fs::write(&short_path, short.to_string()).unwrap();
    run(&short_path, &["make-data"]);
    run(&short_path, &["train"]);
    run(&cfg2, &["train", "--resume"]);

    for f in ["model/params.bin", "model/manifest.json", "model/training_log.csv"] {
        let a = fs::read(full.path().join("run").join(f)).unwrap();
        let b = fs::read(part.path().join("run").join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "partial_body_control");
    assert_eq!(bin().arg("fly").output().unwrap().status.code(), Some(2));
    assert_eq!(
        bin().args(["evaluate", "--protocol", "best"]).output().unwrap().status.code(),
        Some(2)
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"sedd": 1}"#).unwrap();
    assert_eq!(status(&bad, &["make-data"]), 2);

    run(&cfg, &["make-data"]);
    let past = first_motion(&dir.path().join("run"));
    let past = past.to_str().unwrap();
    assert_ne!(status(&cfg, &["generate", "--past", past]), 0);
    run(&cfg, &["train"]);
    assert_eq!(status(&cfg, &["generate", "--past", past, "--diverse"]), 2);
    assert_eq!(status(&cfg, &["generate", "--past", past, "--fix-zt", "--diverse"]), 2);
    assert_eq!(status(&cfg, &["generate", "--past", past, "--end-pose"]), 2);
    assert_eq!(status(&cfg, &["evaluate", "--protocol", "diversity"]), 2);
    assert_eq!(status(&cfg, &["train-sampler"]), 2);
}

#[test]
fn fixing_both_latents_repeats_one_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "partial_body_control");
    run(&cfg, &["make-data"]);
    run(&cfg, &["train"]);
    let run_dir = dir.path().join("run");
    let past = first_motion(&run_dir);
    run(&cfg, &["generate", "--past", past.to_str().unwrap(), "--fix-zb", "--fix-zt", "-k", "5"]);
    let files: Vec<Vec<u8>> = (0..5)
        .map(|i| fs::read(run_dir.join(format!("generated/sample_{i:03}.json"))).unwrap())
        .collect();
    assert!(files.windows(2).all(|w| w[0] == w[1]));
    assert!(!run_dir.join("generated/sample_005.json").exists());
}

fn final_frame(path: &Path) -> Vec<f64> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let frames = v["frames"].as_array().unwrap();
    frames.last().unwrap().as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn end_pose_samples_share_final_frame() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "end_pose_control");
    run(&cfg, &["make-data"]);
    run(&cfg, &["train"]);

    // Make the full-body decoder ignore z_t so fixing z_b pins every output.
    let model_dir = dir.path().join("run/model");
    let mut ck = load_checkpoint(&model_dir).unwrap();
    let (hidden, dz) = (8, 3);
    let id = ck.store.id("top.decoder_init.weight").unwrap();
    let w = ck.store.get_mut(id);
    let cols = hidden + 2 * dz;
    for r in 0..hidden {
        for c in hidden..hidden + dz {
            w[r * cols + c] = 0.0;
        }
    }
    save_checkpoint(&model_dir, &ck.artifact, &ck.store, ck.optimizer.as_ref(), ck.extra.clone()).unwrap();

    let run_dir = dir.path().join("run");
    let past = first_motion(&run_dir);
    run(&cfg, &["generate", "--past", past.to_str().unwrap(), "--end-pose", "-k", "4"]);
    let last: Vec<Vec<f64>> = (0..4)
        .map(|i| final_frame(&run_dir.join(format!("generated/sample_{i:03}.json"))))
        .collect();
    for f in &last[1..] {
        for (a, b) in f.iter().zip(&last[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
