use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use adastar::app::{cmd_make_synth, cmd_matrix, cmd_run, execute, AppError, DifficultySpec};
use adastar::config::{read_table, Backend, RunConfig};
use adastar::corpus::load_corpus;
use adastar::learner::stub::{StubConfig, StubServer};
use toml::Table;

fn table(text: &str) -> Table {
    text.parse().unwrap()
}

fn small_config(corpus: &Path, out: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "corpus = {:?}\noutput_dir = {:?}\nmax_iters = 3\n[schedule]\ninitial_steps = 4\n{extra}",
        corpus.display().to_string(),
        out.display().to_string()
    );
    RunConfig::resolve(&[table(&text)]).unwrap()
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn make_synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    cmd_make_synth(500, DifficultySpec::default(), 10, &a).unwrap();
    cmd_make_synth(500, DifficultySpec::default(), 10, &b).unwrap();
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 500);
    assert_eq!(load_corpus(&a, None).unwrap().len(), 500);
}

#[test]
fn bimodal_corpus_has_two_modes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bi.jsonl");
    cmd_make_synth(4000, "bimodal:-2,2,0.5".parse().unwrap(), 10, &path).unwrap();
    let corpus = load_corpus(&path, None).unwrap();
    // Half-unit bins over [-5, 5).
    let mut bins = [0usize; 20];
    for obs in corpus.iter() {
        let d = obs.difficulty().unwrap();
        let b = ((d + 5.0) / 0.5).floor();
        if (0.0..20.0).contains(&b) {
            bins[b as usize] += 1;
        }
    }
    let floor = corpus.len() / 20;
    let modes: Vec<usize> = (1..19)
        .filter(|&i| bins[i] > floor && bins[i] >= bins[i - 1] && bins[i] > bins[i + 1])
        .collect();
    assert_eq!(modes.len(), 2, "bins {bins:?}");
    let centre = |i: usize| -5.0 + 0.5 * i as f64 + 0.25;
    assert!((centre(modes[0]) + 2.0).abs() <= 0.5);
    assert!((centre(modes[1]) - 2.0).abs() <= 0.5);
}

#[test]
fn run_writes_artifacts_and_snapshot_replays() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    cmd_make_synth(120, DifficultySpec::default(), 10, &corpus).unwrap();
    let out = dir.path().join("run");
    let config = small_config(&corpus, &out, "");
    let (ledger, summary) = cmd_run(&config).unwrap();
    assert_eq!(ledger.records.len(), 3);
    assert_eq!(summary.seed, 10);
    for name in ["curve.csv", "flops.csv", "sd_summary.csv", "quartiles.csv", "freq_1-2.csv", "freq_1-3.csv", "summary.jsonl", "config.toml"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    // Re-running from the snapshot (into another directory) reproduces everything.
    let replay_out = dir.path().join("replay");
    let mut over = Table::new();
    over.insert("output_dir".into(), replay_out.display().to_string().into());
    let replay = RunConfig::resolve(&[read_table(&out.join("config.toml")).unwrap(), over]).unwrap();
    cmd_run(&replay).unwrap();
    let mut a = read_dir_bytes(&out);
    let mut b = read_dir_bytes(&replay_out);
    a.remove("config.toml");
    b.remove("config.toml");
    assert_eq!(a, b);
}

#[test]
fn missing_corpus_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let err = execute(&small_config(&missing, dir.path(), "")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("nope.jsonl"));
}

fn parse_matrix(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.deserialize().map(|row| row.unwrap()).collect()
}

#[test]
fn matrix_rows_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    cmd_make_synth(100, DifficultySpec::default(), 10, &corpus).unwrap();
    let base = table(&format!(
        "corpus = {:?}\nmax_iters = 2\n[schedule]\ninitial_steps = 2\n",
        corpus.display().to_string()
    ));
    let presets: Vec<String> = ["star-acc", "adastar", "adad", "adastar-wo-win", "adastar-pf"].map(String::from).to_vec();
    let out = dir.path().join("m");
    let rows = cmd_matrix(std::slice::from_ref(&base), &presets, &[10, 11], &out).unwrap();
    assert_eq!(rows.iter().filter(|r| r.seed.is_some()).count(), 10);
    assert_eq!(rows.iter().filter(|r| r.seed.is_none()).count(), 5);

    let table = parse_matrix(&out.join("matrix.csv"));
    assert_eq!(table.len(), 15);
    for p in &presets {
        let runs: Vec<f64> = table
            .iter()
            .filter(|r| &r["preset"] == p && r["kind"] == "run")
            .map(|r| r["sd"].parse().unwrap())
            .collect();
        let mean: f64 = table.iter().find(|r| &r["preset"] == p && r["kind"] == "mean").unwrap()["sd"]
            .parse()
            .unwrap();
        let hand = runs.iter().sum::<f64>() / runs.len() as f64;
        assert!((mean - hand).abs() <= 1e-12 * hand.abs().max(1.0));
    }
    assert!(out.join("adastar/seed-11/curve.csv").is_file());

    // A single cell aggregates to itself.
    let one = dir.path().join("one");
    let rows = cmd_matrix(&[base], &presets[1..2], &[10], &one).unwrap();
    assert_eq!(rows[0].sd, rows[1].sd);
    assert_eq!(rows[0].best_accuracy, rows[1].best_accuracy);
}

#[test]
fn matrix_fails_only_when_every_cell_fails() {
    let dir = tempfile::tempdir().unwrap();
    let base = table("corpus = \"/definitely/not/here.jsonl\"\n");
    let err = cmd_matrix(&[base], &["adastar".into()], &[1, 2], dir.path()).unwrap_err();
    assert!(matches!(err, AppError::MatrixFailed(2)));
    let text = fs::read_to_string(dir.path().join("matrix.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn remote_backend_against_stub() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("c.jsonl");
    cmd_make_synth(60, DifficultySpec::Normal { mean: -1.0, sd: 0.5 }, 10, &corpus_path).unwrap();
    let corpus = load_corpus(&corpus_path, None).unwrap();
    let stub = StubServer::start("127.0.0.1:0", &corpus, StubConfig { seed: 3, ..StubConfig::default() }).unwrap();
    let out = dir.path().join("remote");
    let mut config = small_config(&corpus_path, &out, "");
    config.max_iters = 2;
    config.learner.backend = Backend::Remote;
    config.learner.remote.base_url = stub.base_url().to_string();
    let (ledger, _) = cmd_run(&config).unwrap();
    assert_eq!(ledger.records.len(), 2);
    assert!(ledger.records.iter().all(|r| r.eval_accuracy.is_some()));
    assert!(ledger.records.iter().all(|r| r.training_tokens > 0));
    let stats = stub.stats();
    assert_eq!(stats.reset, 1);
    assert!(stats.train >= 1);
}

#[test]
fn echo_mismatch_aborts_with_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("c.jsonl");
    cmd_make_synth(60, DifficultySpec::Normal { mean: -1.0, sd: 0.5 }, 10, &corpus_path).unwrap();
    let corpus = load_corpus(&corpus_path, None).unwrap();
    let stub = StubServer::start(
        "127.0.0.1:0",
        &corpus,
        StubConfig { seed: 3, mismatch_requests: [400].into(), ..StubConfig::default() },
    )
    .unwrap();
    let out = dir.path().join("remote");
    let mut config = small_config(&corpus_path, &out, "");
    config.max_iters = 50;
    config.learner.backend = Backend::Remote;
    config.learner.remote.base_url = stub.base_url().to_string();
    let err = cmd_run(&config).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("does not match"), "{err}");
    match err {
        AppError::Run(aborted) => {
            let done = aborted.partial.records.len();
            assert!((1..50).contains(&done));
            let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
            assert_eq!(curve.lines().count(), done + 1);
        }
        other => panic!("unexpected {other:?}"),
    }
}
