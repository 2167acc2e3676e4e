use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fmch::training::{PretrainConfig, Trainer};
use fmch::volume_store::DatasetManifest;
use sha2::{Digest, Sha256};

fn fmch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmch"))
        .args(args)
        .env("FMCH_RUN_ROOT", std::env::temp_dir().join("fmch-cli-tests-unused"))
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn phantom(dir: &Path, subjects: usize, shape: usize) {
    let out = fmch(&[
        "phantom",
        "--subjects",
        &subjects.to_string(),
        "--contrasts",
        "c1,c2",
        "--timepoints",
        "1",
        "--shape",
        &shape.to_string(),
        "--seed",
        "0",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn tree_hash(root: &Path) -> String {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, files);
            } else {
                files.push(p);
            }
        }
    }
    let mut files = Vec::new();
    walk(root, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

fn tiny_config(dir: &Path, manifest: &Path, seed: u64) -> PathBuf {
    let mut cfg = PretrainConfig::tiny();
    cfg.manifest = manifest.to_string_lossy().into_owned();
    cfg.epochs = 1;
    cfg.seed = seed;
    let p = dir.join(format!("config_{seed}.json"));
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn phantom_writes_images_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    phantom(&data, 4, 24);
    let m = DatasetManifest::load(&data.join("manifest.json")).unwrap();
    assert_eq!(m.entries.len(), 8);
    assert!(m.entries.iter().all(|e| m.resolve(&e.path).is_file()));
}

#[test]
fn phantom_zero_subjects_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fmch(&["phantom", "--subjects", "0", "--out", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["flag"], "--subjects");
    assert!(err["message"].as_str().unwrap().contains("--subjects"));
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn phantom_is_reproducible_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    phantom(&tmp.path().join("a"), 3, 16);
    phantom(&tmp.path().join("b"), 3, 16);
    assert_eq!(tree_hash(&tmp.path().join("a")), tree_hash(&tmp.path().join("b")));
}

#[test]
fn check_flag_has_no_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fmch(&["phantom", "--subjects", "2", "--out", tmp.path().join("d").to_str().unwrap(), "--check"]);
    assert!(out.status.success());
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn malformed_arguments_exit_2_with_json() {
    let out = fmch(&["phantom", "--subjects", "many"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["exit_code"], 2);
    let out = fmch(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_run_directory_and_resume_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    phantom(&data, 6, 8);
    let manifest = data.join("manifest.json");
    let cfg = tiny_config(tmp.path(), &manifest, 0);
    let run = tmp.path().join("run");
    let out = fmch(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "train_log.ndjson", "provenance.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ckpt = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "fmck"))
        .expect("checkpoint written");
    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seeds"], serde_json::json!([0]));
    assert!(prov["config_hash"].as_str().unwrap().len() == 64);

    let other = tiny_config(tmp.path(), &manifest, 1);
    let out = fmch(&[
        "pretrain",
        "--config",
        other.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
        "--out",
        tmp.path().join("run2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "ConfigHashMismatch");

    let out = fmch(&["pretrain", "--config", cfg.to_str().unwrap(), "--variant", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn finetune_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.fmck");
    let out = fmch(&["finetune", "--checkpoint", missing.to_str().unwrap(), "--task", "seg"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["flag"], "--checkpoint");
    let out = fmch(&["finetune", "--checkpoint", missing.to_str().unwrap(), "--task", "dance"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["flag"], "--task");
}

fn untrained_checkpoint(tmp: &Path, subjects: usize) -> PathBuf {
    let data = tmp.join("d");
    phantom(&data, subjects, 8);
    let manifest = DatasetManifest::load(&data.join("manifest.json")).unwrap();
    let mut cfg = PretrainConfig::tiny();
    cfg.manifest = data.join("manifest.json").to_string_lossy().into_owned();
    let trainer = Trainer::with_manifest(cfg, &manifest).unwrap();
    let p = tmp.join("init.fmck");
    trainer.checkpoint().save(&p).unwrap();
    p
}

#[test]
fn finetune_then_evaluate_table() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = untrained_checkpoint(tmp.path(), 14);
    let run = tmp.path().join("ft");
    let out = fmch(&[
        "finetune",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--task",
        "cls",
        "--k-shot",
        "1",
        "--seeds",
        "0,1,2,3,4",
        "--epochs",
        "1",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("report_cls.json").is_file());
    let out = fmch(&["evaluate", "--run", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let seed_rows = text.lines().filter(|l| l.split_whitespace().next().is_some_and(|w| w.parse::<u64>().is_ok())).count();
    assert_eq!(seed_rows, 5);
    assert_eq!(text.lines().filter(|l| l.contains("mean±sd")).count(), 1);

    let out = fmch(&["evaluate", "--run", tmp.path().join("absent").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn probe_reports_both_partitions() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = untrained_checkpoint(tmp.path(), 8);
    let out = fmch(&["probe", "--checkpoint", ckpt.to_str().unwrap(), "--factor", "contrast", "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("z_anat") && text.contains("z_contrast"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("probe_contrast.json")).unwrap()).unwrap();
    for k in ["acc_anat", "acc_contrast", "chance_anat", "chance_contrast"] {
        let v = r[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    let out = fmch(&["probe", "--checkpoint", ckpt.to_str().unwrap(), "--factor", "mood"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_tissue_map_image_and_truncated_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    phantom(&data, 6, 16);
    let m = DatasetManifest::load(&data.join("manifest.json")).unwrap();
    let lesioned = m
        .subjects
        .iter()
        .find(|s| m.entries.iter().any(|e| e.subject_id == s.subject_id && e.health_status == Some(false)))
        .expect("a lesioned subject");
    let tissue = m.resolve(lesioned.tissue_map.as_ref().unwrap());
    let out = fmch(&["inspect", "--file", tissue.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    let labels: Vec<u32> = text
        .lines()
        .skip_while(|l| !l.starts_with("labels:"))
        .skip(1)
        .map(|l| l.trim().split(':').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(labels, vec![0, 1, 2, 3, 4]);

    let image = m.resolve(&m.entries[0].path);
    let before = fs::read(&image).unwrap();
    let out = fmch(&["inspect", "--file", image.to_str().unwrap()]);
    assert!(stdout(&out).contains(&format!("dims: {:?}", m.shape)));
    assert_eq!(fs::read(&image).unwrap(), before);

    let cut = tmp.path().join("cut.nii");
    fs::write(&cut, &before[..before.len() / 2]).unwrap();
    let out = fmch(&["inspect", "--file", cut.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "TruncatedPayload");
}
