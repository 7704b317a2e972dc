use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use styleprobe_core::config::Config;

fn styleprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styleprobe"))
        .args(args)
        .env_remove("STYLEPROBE_SESSION_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = styleprobe(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn detect_writes_k_entries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ranking.json");
    ok(&["detect", "--objective", "region:mouth", "--k", "10", "--seed", "42", "--out", p(&out)]);
    let ranking = read_json(&out);
    assert_eq!(ranking["entries"].as_array().unwrap().len(), 10);
    assert_eq!(ranking["k"], 10);
    // same seed, same ranking
    let again = dir.path().join("again.json");
    ok(&["detect", "--objective", "region:mouth", "--k", "10", "--seed", "42", "--out", p(&again)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn zero_strength_edit_reproduces_the_original() {
    let dir = tempfile::tempdir().unwrap();
    let original = dir.path().join("original.png");
    ok(&["sample", "--seed", "3", "--index", "2", "--out", p(&original)]);
    let single = dir.path().join("single.png");
    ok(&["edit", "--seed", "3", "--index", "2", "--channel", "2:5", "--alpha", "0", "--out", p(&single)]);
    assert_eq!(fs::read(&original).unwrap(), fs::read(&single).unwrap());
    let multi = dir.path().join("multi.png");
    ok(&[
        "edit", "--seed", "3", "--index", "2", "--objective", "region:mouth", "--detect-samples", "4", "--mode",
        "multi", "--alpha", "0", "--out", p(&multi),
    ]);
    assert_eq!(fs::read(&original).unwrap(), fs::read(&multi).unwrap());
    let moved = dir.path().join("moved.png");
    ok(&["edit", "--seed", "3", "--index", "2", "--channel", "2:5", "--alpha", "3", "--out", p(&moved)]);
    assert_ne!(fs::read(&original).unwrap(), fs::read(&moved).unwrap());
}

#[test]
fn alpha_sweep_writes_one_image_per_strength() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    ok(&["edit", "--channel", "0:1", "--alpha-sweep", "-3,0,1.5", "--out", p(&out)]);
    let mut names: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["alpha+0.png", "alpha+1.5.png", "alpha-3.png"]);
}

#[test]
fn planted_ad_is_disentangled() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ad.json");
    let run = ok(&[
        "--preset", "planted-demo", "ad", "--objective", "attr:mouth-redness", "--k", "3", "--detect-samples", "20",
        "--seed", "5", "--alpha", "2", "--samples", "20", "--out", p(&out),
    ]);
    let report = &read_json(&out)["report"];
    let (t, o) = (report["ad_t"].as_f64().unwrap(), report["ad_o"].as_f64().unwrap());
    assert!(t > 0.0);
    assert!(o < 0.05 * t, "AD_t {t} AD_o {o}");
    assert!(String::from_utf8_lossy(&run.stdout).contains("mouth-redness"));
}

#[test]
fn exit_codes() {
    assert_eq!(styleprobe(&["--help"]).status.code(), Some(0));
    assert_eq!(styleprobe(&["detect", "--objective", "region:mouth", "--bogus"]).status.code(), Some(1));
    assert_eq!(styleprobe(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(styleprobe(&["--preset", "nope", "stats"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[generator]\nlayers = 7\n").unwrap();
    assert_eq!(styleprobe(&["--config", p(&bad), "stats"]).status.code(), Some(1));

    // too few positives is a numeric failure
    let mut cfg = Config::default();
    cfg.detection.max_attempts = 3;
    let strict = dir.path().join("strict.toml");
    fs::write(&strict, cfg.to_toml_string().unwrap()).unwrap();
    let out = dir.path().join("r.json");
    let run = styleprobe(&[
        "--config", p(&strict), "detect", "--objective", "attr:mouth-redness", "--detect-samples", "30", "--out",
        p(&out),
    ]);
    assert_eq!(run.status.code(), Some(2), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(!out.exists());
}

#[test]
fn truncation_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.png");
    ok(&["sample", "--seed", "8", "--out", p(&full)]);
    let out = dir.path().join("trunc");
    ok(&["truncate", "--seed", "8", "--ks", "0,5,11", "--avg-samples", "200", "--out", p(&out)]);
    assert_eq!(fs::read(out.join("k11.png")).unwrap(), fs::read(&full).unwrap());
    assert_ne!(fs::read(out.join("k0.png")).unwrap(), fs::read(&full).unwrap());
    // k = 0 does not depend on the sample
    let other = dir.path().join("other");
    ok(&["truncate", "--seed", "9", "--ks", "0", "--avg-samples", "200", "--out", p(&other)]);
    assert_eq!(fs::read(out.join("k0.png")).unwrap(), fs::read(other.join("k0.png")).unwrap());
}

#[test]
fn session_dir_from_environment_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("session");
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_styleprobe"))
            .args(args)
            .env("STYLEPROBE_SESSION_DIR", &session)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let ranking = dir.path().join("ranking.json");
    run(&["--preset", "tiny8", "detect", "--objective", "region:mouth", "--detect-samples", "3", "--out", p(&ranking)]);
    run(&["edit", "--seed", "1", "--channel", "1:0", "--alpha", "2", "--out", p(&dir.path().join("e.png"))]);
    run(&["oracle", "--objective", "region:full", "--k", "10", "--seed", "1"]);
    assert!(session.join("session.json").exists());
    assert_eq!(fs::read_to_string(session.join("log.jsonl")).unwrap().lines().count(), 5);
    let into = dir.path().join("replayed");
    run(&["replay", "--into", p(&into)]);
    assert_eq!(
        fs::read(session.join("session.json")).unwrap(),
        fs::read(into.join("session.json")).unwrap()
    );
    // a session refuses a different explicit config
    let clash = Command::new(env!("CARGO_BIN_EXE_styleprobe"))
        .args(["--preset", "toy", "stats"])
        .env("STYLEPROBE_SESSION_DIR", &session)
        .output()
        .unwrap();
    assert_eq!(clash.status.code(), Some(1));
}
