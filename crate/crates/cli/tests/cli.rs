use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_exemplar-dialog"));
    c.env_remove("EXEMPLAR_DIALOG_WORKDIR").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"
seed = 11

[paths]
dialogues = "data/dialogues.json"
ontology = "data/ontology.json"
database = "data/db.json"
embeddings = "data/embeddings.txt"

[corpus]
dev_size = 10
test_size = 10
min_count = 1

[model]
embed_dim = 8
hidden_dim = 16

[train]
max_epochs = 2
patience = 1

[retrieval]
reranker = "heuristic"
"#;

/// Synthetic corpus plus config in a fresh directory.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", "data", "--dialogues", "60", "--seed", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    dir
}

fn stage(dir: &Path, args: &[&str]) -> Output {
    let mut full = args.to_vec();
    full.extend(["--config", "cfg.toml", "--deterministic"]);
    let o = run(&full, dir);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn full_pipeline(dir: &Path, work: &str) -> PathBuf {
    let w = ["--work-dir", work];
    let p = stage(dir, &[&["prepare"][..], &w].concat());
    assert!(stdout(&p).contains("vocabulary"));
    stage(dir, &[&["index"][..], &w].concat());
    for arch in ["hred", "exemplar"] {
        stage(dir, &[&["train", "--arch", arch][..], &w].concat());
        stage(dir, &[&["generate", "--arch", arch, "--split", "test"][..], &w].concat());
        stage(dir, &[&["evaluate", "--arch", arch, "--split", "test"][..], &w].concat());
    }
    let r = stage(dir, &[&["report", "--split", "test"][..], &w].concat());
    let table = stdout(&r);
    assert!(table.contains("HRED") && table.contains("Exemplar-HRED"), "{table}");
    dir.join(work)
}

#[test]
fn pipeline_is_reproducible_end_to_end() {
    let dir = fixture();
    let a = full_pipeline(dir.path(), "a");
    let b = full_pipeline(dir.path(), "b");
    let triples: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(a.join("prepared/triples_test.json")).unwrap()).unwrap();
    for arch in ["hred", "exemplar"] {
        let gen = format!("runs/{arch}/generations_test.jsonl");
        let lines = fs::read_to_string(a.join(&gen)).unwrap();
        assert_eq!(lines.lines().count(), triples.len());
        assert_eq!(lines, fs::read_to_string(b.join(&gen)).unwrap());
        let report = format!("runs/{arch}/report_test.json");
        assert_eq!(fs::read(a.join(&report)).unwrap(), fs::read(b.join(&report)).unwrap());
    }
    assert!(fs::read_to_string(a.join("runs/exemplar/generations_test.jsonl")).unwrap().contains("\"exemplar\""));
    assert!(a.join("config.resolved.toml").exists());
    assert_eq!(fs::read(a.join("index/index.json")).unwrap(), fs::read(b.join("index/index.json")).unwrap());
}

#[test]
fn stage_order_is_enforced() {
    let dir = fixture();
    let o = run(&["index", "--config", "cfg.toml", "--work-dir", "w"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("prepare"), "{}", stderr(&o));
    stage(dir.path(), &["prepare", "--work-dir", "w"]);
    let o = run(&["train", "--arch", "exemplar", "--config", "cfg.toml", "--work-dir", "w"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("index"), "{}", stderr(&o));
    let o = run(&["report", "--config", "cfg.toml", "--work-dir", "w"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = fixture();
    let o = run(&["prepare", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["generate", "--config", "cfg.toml", "--split", "val"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    fs::write(dir.path().join("bad.toml"), "[model]\nembed_size = 4\n").unwrap();
    let o = run(&["prepare", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let no_ont = CONFIG.replace("data/ontology.json", "data/nowhere.json");
    fs::write(dir.path().join("no_ont.toml"), no_ont).unwrap();
    let o = run(&["prepare", "--config", "no_ont.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.json"), "{}", stderr(&o));

    fs::write(dir.path().join("data/dialogues.json"), "[{\"dialogue_id\": 3}]").unwrap();
    let o = run(&["prepare", "--config", "cfg.toml", "--work-dir", "w"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!dir.path().join("w/prepared/vocab.json").exists());
}

#[test]
fn work_dir_falls_back_to_environment() {
    let dir = fixture();
    let o = bin()
        .args(["prepare", "--config", "cfg.toml"])
        .env("EXEMPLAR_DIALOG_WORKDIR", dir.path().join("from-env"))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("from-env/prepared/vocab.json").exists());
    let o = run(&["prepare", "--config", "cfg.toml"], dir.path());
    assert!(o.status.success());
    assert!(dir.path().join("work/prepared/vocab.json").exists());
}

#[test]
fn prepare_is_idempotent() {
    let dir = fixture();
    stage(dir.path(), &["prepare", "--work-dir", "w"]);
    let first = fs::read(dir.path().join("w/prepared/triples_train.json")).unwrap();
    let vocab = fs::read(dir.path().join("w/prepared/vocab.json")).unwrap();
    stage(dir.path(), &["prepare", "--work-dir", "w"]);
    assert_eq!(first, fs::read(dir.path().join("w/prepared/triples_train.json")).unwrap());
    assert_eq!(vocab, fs::read(dir.path().join("w/prepared/vocab.json")).unwrap());
}
