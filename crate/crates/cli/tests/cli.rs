use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vito(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vito"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn vito")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_tiny_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "seed": 9,
        "data": {
            "gen": { "size": 16 },
            "train_clips": 6,
            "probe_clips": 4,
            "eval_clips": 3
        },
        "curation": { "k_frames": 3 }
    });
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_flag_exits_nonzero_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = vito(&["gen-data", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\"data\":{\"gen\":{\"sizee\":32}}}").unwrap();
    let out = vito(
        &["gen-data", "--config", "bad.json", "--out", "corp"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("data.gen.sizee"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "one-line error: {err}");
}

#[test]
fn gen_data_same_seed_reproduces_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for (out, seed) in [("a", "9"), ("b", "9"), ("c", "10")] {
        let run = vito(
            &["gen-data", "--config", &cfg, "--out", out, "--seed", seed],
            dir.path(),
        );
        assert!(run.status.success(), "{}", stderr(&run));
    }
    let manifest = |name: &str| fs::read(dir.path().join(name).join("manifest.json")).unwrap();
    assert_eq!(manifest("a"), manifest("b"));
    assert_ne!(manifest("a"), manifest("c"));
}

#[test]
fn split_roles_differ_only_in_tags_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for (out, role) in [("train", "train"), ("probe", "probe")] {
        let run = vito(
            &[
                "gen-data", "--config", &cfg, "--out", out, "--role", role, "--clips", "5",
            ],
            dir.path(),
        );
        assert!(run.status.success(), "{}", stderr(&run));
    }
    let resolved = dir.path().join("train/config.resolved.json");
    assert!(resolved.is_file(), "resolved config sits next to outputs");
    let probe: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("probe/manifest.json")).unwrap())
            .unwrap();
    let mismatches = probe["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["tag"] != e["label"])
        .count();
    assert_eq!(mismatches, 0, "probe split tags are exact");
}

#[test]
fn curate_with_the_oracle_writes_decisions_and_a_filtered_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let gen = vito(
        &["gen-data", "--config", &cfg, "--out", "corp"],
        dir.path(),
    );
    assert!(gen.status.success(), "{}", stderr(&gen));
    let run = vito(
        &[
            "curate",
            "--config",
            &cfg,
            "--corpus",
            "corp",
            "--out",
            "curation.json",
            "--apply",
            "curated.json",
        ],
        dir.path(),
    );
    assert!(run.status.success(), "{}", stderr(&run));
    let decisions: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("curation.json")).unwrap())
            .unwrap();
    let curated: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("curated.json")).unwrap())
            .unwrap();
    assert_eq!(
        decisions["kept"].as_u64().unwrap(),
        curated["entries"].as_array().unwrap().len() as u64
    );
    assert!(dir.path().join("curation.config.resolved.json").is_file());
}

#[test]
fn gradcheck_passes_and_reports_the_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let out = vito(&["gradcheck"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("full graph"), "{stdout}");
    assert!(stdout.contains("gradcheck: max rel err"), "{stdout}");
}

#[test]
fn workers_flag_rejects_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = vito(&["gradcheck", "--workers", "0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("workers"), "{}", stderr(&out));
}
