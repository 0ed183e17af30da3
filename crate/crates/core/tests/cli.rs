use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

fn rdelab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rdelab"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn lists_all_experiment_families() {
    let out = rdelab().arg("list-experiments").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["slab_ladder", "regeneration", "ballistic_report", "kalikow", "exit_identity", "criterion"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from\n{text}");
    }
}

#[test]
fn shipped_configs_validate() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            let out = rdelab().args(["validate", "--config"]).arg(&path).output().unwrap();
            assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stdout));
            seen += 1;
        }
    }
    assert!(seen >= 6);
}

#[test]
fn invalid_config_lists_every_field() {
    let text = std::fs::read_to_string(configs().join("driftfree.cfg"))
        .unwrap()
        .replace("step = 0.01", "step = 0.03")
        .replace("n = 10000", "n = 0");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, text).unwrap();
    let out = rdelab().args(["validate", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("integrator.step"), "{report}");
    assert!(report.contains("parameters.n"), "{report}");

    let out_dir = dir.path().join("out");
    let run = rdelab().args(["run", "--config"]).arg(&path).arg("--output").arg(&out_dir).output().unwrap();
    assert!(!run.status.success());
    assert!(!out_dir.join("manifest.json").exists());
}

#[test]
fn run_writes_a_verifiable_manifest() {
    let text = std::fs::read_to_string(configs().join("driftfree.cfg"))
        .unwrap()
        .replace("n = 10000", "n = 500");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.cfg");
    std::fs::write(&path, &text).unwrap();
    let out_dir = dir.path().join("out");
    let run = rdelab()
        .args(["run", "--workers", "2", "--seed-override", "99", "--config"])
        .arg(&path)
        .arg("--output")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "slab_ladder");
    assert_eq!(manifest["master_seed"], 99);
    assert_eq!(manifest["workers"], 2);
    assert_eq!(manifest["config_hash"], hex::encode(Sha256::digest(text.as_bytes())));
    assert_eq!(std::fs::read_to_string(out_dir.join("config.cfg")).unwrap(), text);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        let bytes = std::fs::read(out_dir.join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"], hex::encode(Sha256::digest(&bytes)));
    }
    let table = std::fs::read_to_string(out_dir.join("slab_ladder.csv")).unwrap();
    assert!(table.lines().next().unwrap().contains("censored"));
}
