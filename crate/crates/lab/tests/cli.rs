use std::path::Path;
use std::process::{Command, Output};

fn vdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdm")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = vdm(&["gen-data", "--seed", "5", "--set", "n=300", "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["data.csv", "data.svg", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 301);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["n"], 300);
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 3, "n": 40}"#).unwrap();
    let out = dir.path().join("d");
    let o = vdm(&["gen-data", "-c", s(&cfg), "--set", "n=20", "-o", s(&out)]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(out.join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&vdm(&["bogus"])), 2);
    assert_eq!(code(&vdm(&["sample", "sideways", "--seed", "1"])), 2);
    assert_eq!(code(&vdm(&["gen-data", "-o", s(&out)])), 2);
    assert_eq!(code(&vdm(&["gen-data", "--seed", "1", "--set", "wat=1", "-o", s(&out)])), 2);
    assert_eq!(code(&vdm(&["gen-data", "--seed", "1", "--set", "n=-4", "-o", s(&out)])), 2);
    assert_eq!(code(&vdm(&["gen-data", "--seed", "1", "--set", "novalue", "-o", s(&out)])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = vdm(&[
        "sample", "langevin", "--seed", "1", "--set", "step_size=100", "--set", "n=5", "--set", "steps=200", "-o",
        s(&out),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn io_and_format_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let missing = dir.path().join("missing.json");
    let set = format!("checkpoint={}", serde_json::Value::String(s(&missing).into()));
    assert_eq!(code(&vdm(&["sample", "ancestral", "--seed", "1", "--set", &set, "-o", s(&out)])), 4);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format_version\": 1, \"seed\"").unwrap();
    let set = format!("checkpoint={}", serde_json::Value::String(s(&bad).into()));
    assert_eq!(code(&vdm(&["elbo", "--seed", "1", "--set", &set, "-o", s(&out)])), 4);

    assert_eq!(code(&vdm(&["rerun", s(&missing)])), 4);
    assert_eq!(code(&vdm(&["gen-data", "-c", s(&missing), "--seed", "1", "-o", s(&out)])), 4);
}

#[test]
fn rerun_reproduces_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f");
    assert_eq!(code(&vdm(&["fig4", "--seed", "9", "-o", s(&out)])), 0);
    let manifest = out.join("manifest.json");
    let again = dir.path().join("g");
    let o = vdm(&["rerun", s(&manifest), "-o", s(&again)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["fig4.svg", "fig4.jsonl", "fig4.json"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }

    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m["outputs"]["fig4.svg"] = "00".repeat(32).into();
    std::fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(code(&vdm(&["rerun", s(&manifest), "-o", s(&dir.path().join("h"))])), 4);
}

#[test]
fn rerun_rejects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&vdm(&["gen-data", "--seed", "2", "--set", "n=200", "-o", s(&data)])), 0);
    let csv = data.join("data.csv");
    let train = dir.path().join("t");
    let set = format!("data.dataset={}", serde_json::json!({"kind": "file", "path": s(&csv)}));
    let o = vdm(&["train", "vae", "--seed", "1", "--set", &set, "--set", "vae.steps=20", "-o", s(&train)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&vdm(&["rerun", s(&train.join("manifest.json")), "-o", s(&dir.path().join("u"))])), 0);
    std::fs::write(&csv, "x1,x2\n0.0,0.0\n").unwrap();
    assert_eq!(code(&vdm(&["rerun", s(&train.join("manifest.json")), "-o", s(&dir.path().join("v"))])), 4);
}
