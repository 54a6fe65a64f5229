use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn adastar(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adastar"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("ADASTAR_REMOTE_URL")
        .output()
        .unwrap()
}

fn synth(dir: &Path, n: &str) {
    let out = adastar(&["make-synth", "--n", n, "--out", "c.jsonl"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_corpus_exits_two_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = adastar(&["run", "--corpus", "absent.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
}

#[test]
fn bad_preset_and_bad_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "20");
    let out = adastar(&["run", "--corpus", "c.jsonl", "--preset", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = adastar(&["run", "--corpus", "c.jsonl", "--k", "5"], dir.path());
    assert_eq!(out.status.code(), Some(2), "rationalize with K > 2 is rejected");
    let out = adastar(&["run", "--corpus", "c.jsonl", "--backend", "remote"], dir.path());
    assert_eq!(out.status.code(), Some(2), "remote without a URL");
}

#[test]
fn two_iteration_run_and_byte_identical_rerun() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "200");
    for out_dir in ["a", "b"] {
        let out = adastar(
            &["run", "--corpus", "c.jsonl", "--max-iters", "2", "--initial-steps", "8", "--output-dir", out_dir],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let curve = fs::read_to_string(dir.path().join("a/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    for entry in fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "config.toml" {
            continue;
        }
        assert_eq!(
            fs::read(dir.path().join("a").join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "60");
    fs::write(dir.path().join("run.toml"), "seed = 7\npreset = \"adad\"\nmax_iters = 1\n").unwrap();
    let out = adastar(
        &["run", "--corpus", "c.jsonl", "--seed", "3", "--max-iters", "4", "--preset", "star-acc", "--config", "run.toml"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("out/summary.jsonl")).unwrap();
    assert!(summary.contains("\"seed\":7"), "{summary}");
    assert!(summary.contains("\"label\":\"adad\""), "{summary}");
    assert!(summary.contains("\"iterations\":1"), "{summary}");
    let snapshot = fs::read_to_string(dir.path().join("out/config.toml")).unwrap();
    assert!(snapshot.contains("seed = 7"));
}

#[test]
fn make_synth_single_line() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    let text = fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1);
    let out = adastar(&["make-synth", "--n", "3", "--difficulty", "triangle", "--out", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn matrix_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "80");
    let out = adastar(
        &["matrix", "--corpus", "c.jsonl", "--max-iters", "2", "--initial-steps", "2", "--presets", "star-acc,adastar", "--seeds", "1,2", "--out", "m"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("m/matrix.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 + 2);
}
