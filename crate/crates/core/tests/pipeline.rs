use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use exemplar_dialog::model::Architecture;
use exemplar_dialog::pipeline::{read_generations, Pipeline, PipelineConfig, Split};
use exemplar_dialog::synth::{generate, SynthConfig};

fn setup(dir: &Path) -> Pipeline {
    let corpus = generate(&SynthConfig {
        dialogues: 40,
        seed: 5,
        ..SynthConfig::default()
    });
    corpus.write(&dir.join("data")).unwrap();
    let cfg = r#"
seed = 9
[paths]
dialogues = "data/dialogues.json"
ontology = "data/ontology.json"
database = "data/db.json"
embeddings = "data/embeddings.txt"
[corpus]
dev_size = 5
test_size = 5
min_count = 1
[model]
embed_dim = 8
hidden_dim = 12
[train]
max_epochs = 3
patience = 1
[retrieval]
reranker = "heuristic"
"#;
    fs::write(dir.join("cfg.toml"), cfg).unwrap();
    let config = PipelineConfig::load(&dir.join("cfg.toml")).unwrap();
    Pipeline::new(config, dir.join("work"))
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn stages_produce_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let p = setup(tmp.path());

    let summary = p.cmd_prepare().unwrap();
    // recount system turns straight from the raw JSON
    let raw: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("data/dialogues.json")).unwrap()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.work_dir.join("prepared/split.json")).unwrap()).unwrap();
    let ids = |k: &str| -> BTreeSet<String> {
        manifest[k].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect()
    };
    let system_turns = |set: &BTreeSet<String>| -> usize {
        raw.as_array()
            .unwrap()
            .iter()
            .filter(|d| set.contains(d["dialogue_id"].as_str().unwrap()))
            .map(|d| d["turns"].as_array().unwrap().iter().filter(|t| t["speaker"] == "system").count())
            .sum()
    };
    assert_eq!(summary.dialogues, 40);
    assert_eq!((summary.dev_dialogues, summary.test_dialogues, summary.train_dialogues), (5, 5, 30));
    assert_eq!(summary.train_triples, system_turns(&ids("train")));
    assert_eq!(summary.dev_triples, system_turns(&ids("dev")));
    assert_eq!(summary.test_triples, system_turns(&ids("test")));

    let prepared = read_dir_bytes(&p.work_dir.join("prepared"));
    p.cmd_prepare().unwrap();
    assert_eq!(prepared, read_dir_bytes(&p.work_dir.join("prepared")));

    let index = p.cmd_index().unwrap();
    assert_eq!(index.records, summary.train_triples);
    let first = fs::read(p.work_dir.join("index/index.json")).unwrap();
    p.cmd_index().unwrap();
    assert_eq!(first, fs::read(p.work_dir.join("index/index.json")).unwrap());

    for arch in [Architecture::Hred, Architecture::ExemplarHred] {
        let history = p.cmd_train(arch).unwrap();
        assert!(!history.epochs.is_empty() && history.epochs.len() <= 3);
        let n = p.cmd_generate(arch, Split::Dev).unwrap();
        assert_eq!(n, summary.dev_triples);
        let lines = read_generations(&p.generations_path(arch, Split::Dev)).unwrap();
        assert_eq!(lines.len(), summary.dev_triples);
        assert_eq!(lines.iter().all(|l| l.exemplar.is_some()), arch.uses_exemplar());
        let report = p.cmd_evaluate(arch, Split::Dev).unwrap();
        assert!(report.in_range());
        assert_eq!(report.pair_count, summary.dev_triples);
    }

    let table = p.cmd_report(Split::Dev).unwrap();
    let header = table.lines().next().unwrap();
    assert!(header.contains("HRED") && header.contains("Exemplar-HRED"));
    for arch in [Architecture::Hred, Architecture::ExemplarHred] {
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(p.report_path(arch, Split::Dev)).unwrap()).unwrap();
        let bleu = format!("{:.1}", json["bleu"].as_f64().unwrap() * 100.0);
        let row = table.lines().find(|l| l.starts_with("BLEU ")).unwrap();
        assert!(row.contains(&bleu), "{row} lacks {bleu}");
    }

    // retraining with unchanged config continues from the finished run
    let again = p.cmd_train(Architecture::Hred).unwrap();
    let stored: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.run_dir(Architecture::Hred).join("history.json")).unwrap()).unwrap();
    assert_eq!(serde_json::to_value(&again).unwrap(), stored);
}

#[test]
fn gold_hypotheses_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let p = setup(tmp.path());
    p.cmd_prepare().unwrap();
    p.cmd_index().unwrap();
    p.cmd_train(Architecture::Hred).unwrap();
    p.cmd_generate(Architecture::Hred, Split::Test).unwrap();
    let mut lines = read_generations(&p.generations_path(Architecture::Hred, Split::Test)).unwrap();
    for l in &mut lines {
        l.hypothesis = l.gold.clone();
    }
    let r = p.evaluate_lines(&lines, "gold", "test").unwrap();
    assert_eq!(r.bleu, 1.0);
    for v in [r.avg_embedding, r.vector_extrema, r.greedy_matching] {
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
    assert_eq!(r.inform, 100.0);
    assert_eq!(r.request, 100.0);
}

#[test]
fn generation_needs_a_checkpoint_and_a_real_split() {
    let tmp = tempfile::tempdir().unwrap();
    let p = setup(tmp.path());
    p.cmd_prepare().unwrap();
    let err = p.cmd_generate(Architecture::Hred, Split::Test).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("train"));
    assert_eq!(p.cmd_generate(Architecture::Hred, Split::Train).unwrap_err().exit_code(), 2);
    assert_eq!(p.cmd_train(Architecture::ExemplarHred).unwrap_err().exit_code(), 2);
}
