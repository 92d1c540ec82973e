//! The harness binary driven end to end on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
n = 1
n_a = 1
n_train = 8
T = 2
L = 1
cost_function = "wasserstein"
forward_schedule = "cosine"
ancilla_type = "zero"
seed = 4

[task]
kind = "clustered"

[optimizer]
iterations = 3
"#;

fn qdiffuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdiffuse")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is one JSON document");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_writes_schema_tagged_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("run");
    let r = qdiffuse(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for name in ["loss.csv", "curves.csv", "generated_t0.csv", "generated_t2.csv", "data_test.csv"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert!(text.starts_with("# schema_version=1\n"), "{name}");
    }
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["steps"].as_array().unwrap().len(), 2);
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(files.contains(&"checkpoint.json") && files.contains(&"report.json"));
    assert!(!out.join("manifest.json.tmp").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        assert!(qdiffuse(&["train", "--config", s(&cfg), "--out", s(o)]).status.success());
    }
    for name in ["checkpoint.json", "generated.json", "report.json", "loss.csv", "curves.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = dir.path().join("c");
    assert!(qdiffuse(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(&c)]).status.success());
    assert_ne!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(c.join("checkpoint.json")).unwrap());
}

#[test]
fn generate_and_eval_from_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let run = dir.path().join("run");
    assert!(qdiffuse(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let ckpt = run.join("checkpoint.json");

    // same seed as training: the generated ensemble is reproduced exactly
    let gen = dir.path().join("gen");
    let r = qdiffuse(&["generate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&gen)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read(gen.join("generated.json")).unwrap(), fs::read(run.join("generated.json")).unwrap());

    let other = dir.path().join("gen2");
    let r = qdiffuse(&[
        "generate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--seed",
        "9",
        "--n-test",
        "5",
        "--out",
        s(&other),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(json(&other.join("generated.json"))["members"].as_array().unwrap().len(), 5);

    let data = run.join("data_test.json");
    let ev = dir.path().join("eval");
    let r = qdiffuse(&["eval", "--generated", s(&data), "--data", s(&data), "--out", s(&ev)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let w = json(&ev.join("report.json"))["wasserstein_to_data"].as_f64().unwrap();
    assert!(w.abs() <= 1e-9, "W(data, data) = {w}");
}

#[test]
fn checkpoint_hash_mismatch_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let run = dir.path().join("run");
    assert!(qdiffuse(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let changed = write_config(dir.path(), "changed.toml", &TINY.replace("L = 1", "L = 2"));
    let r = qdiffuse(&[
        "generate",
        "--config",
        s(&changed),
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--out",
        s(&dir.path().join("g")),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_kind(&r), "config");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(dir.path(), "bad.toml", &format!("{TINY}\nlearning_rate = 0.1\n"));
    let r = qdiffuse(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_kind(&r), "config");
    assert!(String::from_utf8_lossy(&r.stderr).contains("learning_rate"));

    let wide = write_config(dir.path(), "wide.toml", &TINY.replace("n_a = 1", "n_a = 12"));
    let r = qdiffuse(&["train", "--config", s(&wide), "--out", s(&dir.path().join("y"))]);
    assert_eq!(r.status.code(), Some(2));

    let r = qdiffuse(&["no-such-command"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_kind(&r), "config");

    let r = qdiffuse(&["forward"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn output_directory_is_never_reused() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("f");
    assert!(qdiffuse(&["forward", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let before = fs::read(out.join("purity.csv")).unwrap();
    let r = qdiffuse(&["forward", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(fs::read(out.join("purity.csv")).unwrap(), before);
}

#[test]
fn schedule_dump_lists_every_schedule() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("s");
    assert!(qdiffuse(&["schedule-dump", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let text = fs::read_to_string(out.join("schedule.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# schema_version=1"));
    assert_eq!(lines.next(), Some("schedule,t,q_t,a_t,mean_purity"));
    // three schedules, t = 0..=T each
    assert_eq!(lines.count(), 3 * 3);
}
