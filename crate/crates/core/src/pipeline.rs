//! Stage driver behind the command-line tool: prepare, index, train,
//! generate, evaluate and report, all reading one TOML configuration and
//! writing into a work directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    load_dialogues, make_triples, prepare_dialogue, split_corpus, ContextTriple, CorpusError, Database,
    Delexicalizer, GoalSpec, Ontology, SplitManifest, SplitSizes,
};
use crate::io::write_atomic;
use crate::metrics::{
    corpus_bleu, display_rows, embedding_scores, inform_request, target_rows, EvalReport, GeneratedDialogue,
    MetricsError, EVALUATOR_CONVENTIONS, EXEMPLAR_TARGETS, HRED_TARGETS,
};
use crate::model::{Architecture, DialogueModel, Example, ModelConfig, ModelError};
use crate::retrieval::{
    AnnIndex, ExemplarAudit, FeatureResources, LshConfig, RerankerModel, RerankerTrainConfig, RetrievalError,
    SearchMode, DEFAULT_K,
};
use crate::text::{detokenize, EmbeddingTable, TextError, Vocabulary, DEFAULT_MAX_SIZE, DEFAULT_MIN_COUNT};
use crate::training::{Checkpoint, CheckpointPolicy, TrainConfig, TrainHistory, Trainer, TrainingError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const WORKDIR_ENV: &str = "EXEMPLAR_DIALOG_WORKDIR";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numerical(_) => 4,
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<TextError> for PipelineError {
    fn from(e: TextError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<RetrievalError> for PipelineError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Config(_) => PipelineError::Usage(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Dimension(_) => PipelineError::Usage(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<TrainingError> for PipelineError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::NonFinite { .. } => PipelineError::Numerical(e.to_string()),
            TrainingError::Config(_) => PipelineError::Usage(e.to_string()),
            TrainingError::Model(m) => m.into(),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dialogues: PathBuf,
    pub ontology: PathBuf,
    pub database: PathBuf,
    pub embeddings: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_count: usize,
    pub max_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Keep only the first N training dialogues; 0 keeps all.
    pub train_dialogues: usize,
    /// Keep only the first N dev and test dialogues; 0 keeps all.
    pub eval_dialogues: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            min_count: DEFAULT_MIN_COUNT,
            max_size: DEFAULT_MAX_SIZE,
            dev_size: 1000,
            test_size: 1000,
            train_dialogues: 0,
            eval_dialogues: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub max_decode_len: usize,
    pub share_encoder: bool,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 256,
            hidden_dim: 512,
            dropout: 0.3,
            max_decode_len: 50,
            share_encoder: true,
            init_scale: 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankerKind {
    Heuristic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub mode: SearchMode,
    pub k: usize,
    pub lsh: LshConfig,
    pub reranker: RerankerKind,
    pub reranker_train: RerankerTrainConfig,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            mode: SearchMode::Approximate,
            k: DEFAULT_K,
            lsh: LshConfig::default(),
            reranker: RerankerKind::Mlp,
            reranker_train: RerankerTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub bleu_max_n: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { bleu_max_n: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub retrieval: RetrievalSection,
    pub metrics: MetricsSection,
}

impl PipelineConfig {
    /// Parses a config file; relative paths are taken from the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.dialogues);
        fix(&mut self.paths.ontology);
        fix(&mut self.paths.database);
        fix(&mut self.paths.embeddings);
        if let Some(p) = self.paths.split_manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.work_dir.as_mut() {
            fix(p);
        }
    }

    /// Pushes the global seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.retrieval.lsh.seed = self.seed;
        self.retrieval.reranker_train.seed = self.seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration without the work directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.paths.work_dir = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn model_config(&self, vocab_size: usize, arch: Architecture) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            dropout: self.model.dropout,
            max_decode_len: self.model.max_decode_len,
            arch,
            share_encoder: self.model.share_encoder,
            init_scale: self.model.init_scale,
            seed: self.seed,
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.as_os_str().is_empty() {
        return Err(PipelineError::Usage(format!("no {what} path configured")));
    }
    if !path.is_file() {
        return Err(PipelineError::Usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn require_stage(path: &Path, stage: &str) -> Result<(), PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Usage(format!(
            "{} is missing; run `{stage}` first",
            path.display()
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected dev or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub dialogues: usize,
    pub train_dialogues: usize,
    pub dev_dialogues: usize,
    pub test_dialogues: usize,
    pub train_triples: usize,
    pub dev_triples: usize,
    pub test_triples: usize,
    pub vocab_size: usize,
    pub delexicalized_values: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLine {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context: [String; 2],
    pub gold: String,
    pub hypothesis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplar: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerEvaluation {
    pub queries: usize,
    /// Mean BLEU-2 of the chosen exemplar response against the gold
    /// response, by selection rule.
    pub nearest_bleu2: f64,
    pub reranked_bleu2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub records: usize,
    pub terms: usize,
    pub reranker: RerankerKind,
    pub dev_evaluation: Option<RerankerEvaluation>,
}

/// Resolved configuration plus work directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub work_dir: PathBuf,
}

impl Pipeline {
    pub fn new(mut config: PipelineConfig, work_dir: PathBuf) -> Self {
        config.propagate_seed();
        config.paths.work_dir = Some(work_dir.clone());
        Pipeline { config, work_dir }
    }

    fn prepared(&self, name: &str) -> PathBuf {
        self.work_dir.join("prepared").join(name)
    }

    fn index_path(&self, name: &str) -> PathBuf {
        self.work_dir.join("index").join(name)
    }

    pub fn run_dir(&self, arch: Architecture) -> PathBuf {
        self.work_dir.join("runs").join(arch.name())
    }

    pub fn generations_path(&self, arch: Architecture, split: Split) -> PathBuf {
        self.run_dir(arch).join(format!("generations_{}.jsonl", split.name()))
    }

    pub fn report_path(&self, arch: Architecture, split: Split) -> PathBuf {
        self.run_dir(arch).join(format!("report_{}.json", split.name()))
    }

    fn write_resolved_config(&self) -> Result<(), PipelineError> {
        let path = self.work_dir.join("config.resolved.toml");
        let mut c = self.config.clone();
        c.paths.work_dir = None;
        write_atomic(&path, c.to_toml().as_bytes()).map_err(|e| io_err(&path, e))
    }

    fn load_vocab(&self) -> Result<Vocabulary, PipelineError> {
        let path = self.prepared("vocab.json");
        require_stage(&path, "prepare")?;
        Vocabulary::load(&path).map_err(|e| io_err(&path, e))
    }

    fn load_triples(&self, split: Split) -> Result<Vec<ContextTriple>, PipelineError> {
        let path = self.prepared(&format!("triples_{}.json", split.name()));
        require_stage(&path, "prepare")?;
        read_json(&path)
    }

    pub fn cmd_prepare(&self) -> Result<PrepareSummary, PipelineError> {
        let p = &self.config.paths;
        require_file(&p.dialogues, "dialogue file")?;
        require_file(&p.ontology, "ontology")?;
        require_file(&p.database, "database")?;
        let ontology = Ontology::load(&p.ontology)?;
        Database::load(&p.database)?;
        let dialogues = load_dialogues(&p.dialogues)?;
        for d in &dialogues {
            if let Some(goal) = &d.goal {
                goal.validate(&ontology)
                    .map_err(|m| PipelineError::Data(format!("{}: {m}", d.dialogue_id)))?;
            }
        }
        let manifest = match &p.split_manifest {
            Some(m) => {
                require_file(m, "split manifest")?;
                Some(SplitManifest::load(m)?)
            }
            None => None,
        };
        let total = dialogues.len();
        let c = &self.config.corpus;
        let sizes = SplitSizes {
            dev: c.dev_size,
            test: c.test_size,
        };
        let mut split = split_corpus(dialogues, manifest.as_ref(), sizes, self.config.seed)?;
        let manifest = split.manifest();
        if c.train_dialogues > 0 {
            split.train.truncate(c.train_dialogues);
        }
        if c.eval_dialogues > 0 {
            split.dev.truncate(c.eval_dialogues);
            split.test.truncate(c.eval_dialogues);
        }
        let delex = Delexicalizer::new(&ontology)?;
        let prep = |ds: &[crate::corpus::Dialogue]| -> Vec<crate::corpus::Dialogue> {
            ds.par_iter().map(|d| prepare_dialogue(d, &delex)).collect()
        };
        let (train, dev, test) = (prep(&split.train), prep(&split.dev), prep(&split.test));
        let (tt, dt, st) = (make_triples(&train), make_triples(&dev), make_triples(&test));
        let vocab = Vocabulary::build(
            tt.iter().flat_map(|t| [t.s1.tokens.as_slice(), t.u.tokens.as_slice(), t.s2.tokens.as_slice()]),
            c.min_count,
            c.max_size,
        )?;
        let goals: BTreeMap<&str, &Option<GoalSpec>> = dev
            .iter()
            .chain(&test)
            .map(|d| (d.dialogue_id.as_str(), &d.goal))
            .collect();

        let dir = self.work_dir.join("prepared");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let vpath = self.prepared("vocab.json");
        vocab.save(&vpath).map_err(|e| io_err(&vpath, e))?;
        write_json(&self.prepared("split.json"), &manifest)?;
        write_json(&self.prepared("triples_train.json"), &tt)?;
        write_json(&self.prepared("triples_dev.json"), &dt)?;
        write_json(&self.prepared("triples_test.json"), &st)?;
        write_json(&self.prepared("goals.json"), &goals)?;
        let summary = PrepareSummary {
            dialogues: total,
            train_dialogues: train.len(),
            dev_dialogues: dev.len(),
            test_dialogues: test.len(),
            train_triples: tt.len(),
            dev_triples: dt.len(),
            test_triples: st.len(),
            vocab_size: vocab.len(),
            delexicalized_values: delex.value_count(),
        };
        write_json(&self.prepared("summary.json"), &summary)?;
        self.write_resolved_config()?;
        Ok(summary)
    }

    fn feature_embeddings(&self, index: &AnnIndex) -> Result<Option<EmbeddingTable>, PipelineError> {
        let path = &self.config.paths.embeddings;
        if path.as_os_str().is_empty() {
            return Ok(None);
        }
        require_file(path, "embedding file")?;
        let vocab = Vocabulary::from_tokens(index.idf.terms.iter().cloned());
        Ok(Some(EmbeddingTable::load(path, &vocab)?.0))
    }

    pub fn cmd_index(&self) -> Result<IndexSummary, PipelineError> {
        let train = self.load_triples(Split::Train)?;
        let r = &self.config.retrieval;
        let index = AnnIndex::build(&train, r.mode, r.lsh)?;
        let emb = self.feature_embeddings(&index)?;
        let res = FeatureResources {
            idf: &index.idf,
            embeddings: emb.as_ref(),
        };
        let model = match r.reranker {
            RerankerKind::Heuristic => RerankerModel::default(),
            RerankerKind::Mlp => {
                let (model, report) = index.train_reranker(&train, &res, &r.reranker_train)?;
                write_json(&self.index_path("reranker_training.json"), &report)?;
                model
            }
        };
        let dev = self.load_triples(Split::Dev)?;
        let dev_evaluation = (!dev.is_empty()).then(|| {
            let sample: Vec<&ContextTriple> = dev.iter().take(500).collect();
            let bleu = |pick_top: bool| -> f64 {
                let scores: Vec<f64> = sample
                    .par_iter()
                    .map(|t| {
                        let set = index.query_knn(&t.u.tokens, r.k, Some(&t.dialogue_id));
                        let chosen = if pick_top {
                            index.rerank(&set, &model, &res).first().map(|c| c.0.record)
                        } else {
                            set.candidates.first().map(|c| c.record)
                        };
                        chosen.map_or(0.0, |c| {
                            crate::metrics::sentence_bleu(&t.s2.tokens, &index.records[c].response_tokens, 2)
                        })
                    })
                    .collect();
                scores.iter().sum::<f64>() / scores.len() as f64
            };
            RerankerEvaluation {
                queries: sample.len(),
                nearest_bleu2: bleu(false),
                reranked_bleu2: bleu(true),
            }
        });
        if let Some(e) = &dev_evaluation {
            log::info!(
                "exemplar BLEU-2 on {} dev queries: nearest {:.4}, reranked {:.4}",
                e.queries,
                e.nearest_bleu2,
                e.reranked_bleu2
            );
        }
        index.save(&self.index_path("index.json"))?;
        write_json(&self.index_path("reranker.json"), &model)?;
        let summary = IndexSummary {
            records: index.len(),
            terms: index.idf.dim(),
            reranker: r.reranker,
            dev_evaluation,
        };
        write_json(&self.index_path("summary.json"), &summary)?;
        self.write_resolved_config()?;
        Ok(summary)
    }

    fn load_retrieval(&self) -> Result<(AnnIndex, RerankerModel, Option<EmbeddingTable>), PipelineError> {
        let path = self.index_path("index.json");
        require_stage(&path, "index")?;
        let index = AnnIndex::load(&path)?;
        let model: RerankerModel = read_json(&self.index_path("reranker.json"))?;
        model.validate()?;
        let emb = self.feature_embeddings(&index)?;
        Ok((index, model, emb))
    }

    /// Exemplar responses for every triple (never from the triple's own
    /// dialogue), with audit lines.
    fn exemplars(
        &self,
        triples: &[ContextTriple],
        retrieval: &(AnnIndex, RerankerModel, Option<EmbeddingTable>),
    ) -> Vec<(Vec<String>, ExemplarAudit)> {
        let (index, model, emb) = retrieval;
        let res = FeatureResources {
            idf: &index.idf,
            embeddings: emb.as_ref(),
        };
        let k = self.config.retrieval.k;
        triples
            .par_iter()
            .map(|t| match index.exemplar_for(&t.u.tokens, Some(&t.dialogue_id), k, model, &res) {
                Some(ex) => (index.records[ex.record].response_tokens.clone(), index.audit(&t.u.tokens, &ex)),
                None => (
                    Vec::new(),
                    ExemplarAudit {
                        query: detokenize(&t.u.tokens),
                        exemplar_user: String::new(),
                        exemplar_response: String::new(),
                        distance: 1.0,
                        rerank_score: 0.0,
                    },
                ),
            })
            .collect()
    }

    fn examples(
        &self,
        vocab: &Vocabulary,
        triples: &[ContextTriple],
        exemplars: Option<&[(Vec<String>, ExemplarAudit)]>,
    ) -> Vec<Example> {
        triples
            .iter()
            .enumerate()
            .map(|(i, t)| Example {
                s1: vocab.encode(&t.s1.tokens),
                u: vocab.encode(&t.u.tokens),
                exemplar: exemplars.map(|e| vocab.encode(&e[i].0)),
                target: vocab.encode(&t.s2.tokens),
            })
            .collect()
    }

    pub fn cmd_train(&self, arch: Architecture) -> Result<TrainHistory, PipelineError> {
        let vocab = self.load_vocab()?;
        let train = self.load_triples(Split::Train)?;
        let dev = self.load_triples(Split::Dev)?;
        let retrieval = if arch.uses_exemplar() {
            let path = self.index_path("index.json");
            if !path.exists() {
                return Err(PipelineError::Usage(format!(
                    "the exemplar model needs a retrieval index ({} is missing); run `index` first",
                    path.display()
                )));
            }
            Some(self.load_retrieval()?)
        } else {
            None
        };
        let (train_ex, dev_ex) = match &retrieval {
            Some(r) => {
                let te = self.exemplars(&train, r);
                let de = self.exemplars(&dev, r);
                (self.examples(&vocab, &train, Some(&te)), self.examples(&vocab, &dev, Some(&de)))
            }
            None => (self.examples(&vocab, &train, None), self.examples(&vocab, &dev, None)),
        };
        let model = DialogueModel::new(self.config.model_config(vocab.len(), arch))?;
        let dir = self.run_dir(arch);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mut trainer = Trainer::new(self.config.train.clone(), vocab.fingerprint());
        trainer.checkpoints = CheckpointPolicy { dir: Some(dir.clone()) };
        // a finished or interrupted run with the same vocabulary is continued
        let resume = match Checkpoint::load(&dir.join("last.ckpt")) {
            Ok(ck) if ck.header.model == model.config && ck.header.train == self.config.train => Some(ck),
            _ => None,
        };
        let outcome = trainer.train(model, &train_ex, &dev_ex, resume)?;
        write_json(&dir.join("history.json"), &outcome.history)?;
        self.write_resolved_config()?;
        Ok(outcome.history)
    }

    pub fn cmd_generate(&self, arch: Architecture, split: Split) -> Result<usize, PipelineError> {
        if split == Split::Train {
            return Err(PipelineError::Usage("generation runs on dev or test".into()));
        }
        let vocab = self.load_vocab()?;
        let ck_path = self.run_dir(arch).join("best.ckpt");
        require_stage(&ck_path, &format!("train --arch {}", arch.name()))?;
        let ck = Checkpoint::load(&ck_path)?;
        ck.check_vocab(&vocab.fingerprint())?;
        let model = ck.into_model()?;
        if model.config.arch != arch {
            return Err(PipelineError::Data(format!("{} holds a {} model", ck_path.display(), model.config.arch.name())));
        }
        let triples = self.load_triples(split)?;
        let exemplars = if arch.uses_exemplar() {
            Some(self.exemplars(&triples, &self.load_retrieval()?))
        } else {
            None
        };
        let examples = self.examples(&vocab, &triples, exemplars.as_deref());
        let hyps: Vec<Vec<u32>> = examples
            .par_iter()
            .map(|ex| model.decode_greedy(ex))
            .collect::<Result<_, _>>()?;
        let mut out = String::new();
        for (i, (t, h)) in triples.iter().zip(&hyps).enumerate() {
            let hyp = vocab.decode(h)?;
            let line = GenerationLine {
                dialogue_id: t.dialogue_id.clone(),
                turn_index: t.turn_index,
                context: [detokenize(&t.s1.tokens), detokenize(&t.u.tokens)],
                gold: detokenize(&t.s2.tokens),
                hypothesis: detokenize(&hyp),
                exemplar: exemplars.as_ref().map(|e| detokenize(&e[i].0)),
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        let path = self.generations_path(arch, split);
        write_atomic(&path, out.as_bytes()).map_err(|e| io_err(&path, e))?;
        if let Some(e) = &exemplars {
            let mut audit = String::new();
            for (_, a) in e {
                audit.push_str(&serde_json::to_string(a).expect("serializable"));
                audit.push('\n');
            }
            let apath = self.run_dir(arch).join(format!("exemplars_{}.jsonl", split.name()));
            write_atomic(&apath, audit.as_bytes()).map_err(|e| io_err(&apath, e))?;
        }
        self.write_resolved_config()?;
        Ok(triples.len())
    }

    pub fn cmd_evaluate(&self, arch: Architecture, split: Split) -> Result<EvalReport, PipelineError> {
        let path = self.generations_path(arch, split);
        require_stage(&path, &format!("generate --arch {} --split {}", arch.name(), split.name()))?;
        let lines = read_generations(&path)?;
        let report = self.evaluate_lines(&lines, arch.name(), split.name())?;
        write_json(&self.report_path(arch, split), &report)?;
        let txt = self.run_dir(arch).join(format!("report_{}.txt", split.name()));
        write_atomic(&txt, report.render().as_bytes()).map_err(|e| io_err(&txt, e))?;
        self.write_resolved_config()?;
        Ok(report)
    }

    /// All six metrics for generation lines; public so gold responses can be
    /// scored as hypotheses.
    pub fn evaluate_lines(&self, lines: &[GenerationLine], arch: &str, split: &str) -> Result<EvalReport, PipelineError> {
        if lines.is_empty() {
            return Err(MetricsError::NoPairs.into());
        }
        let p = &self.config.paths;
        require_file(&p.embeddings, "embedding file")?;
        require_file(&p.ontology, "ontology")?;
        require_file(&p.database, "database")?;
        let goals_path = self.prepared("goals.json");
        require_stage(&goals_path, "prepare")?;
        let goals: BTreeMap<String, Option<GoalSpec>> = read_json(&goals_path)?;

        let pairs: Vec<(Vec<String>, Vec<String>)> = lines
            .iter()
            .map(|l| (split_tokens(&l.gold), split_tokens(&l.hypothesis)))
            .collect();
        if let Some(l) = lines.iter().find(|l| l.gold.trim().is_empty()) {
            return Err(MetricsError::EmptyReference {
                dialogue_id: l.dialogue_id.clone(),
                turn_index: l.turn_index,
            }
            .into());
        }
        let bleu = corpus_bleu(&pairs, self.config.metrics.bleu_max_n)?;
        let mut tokens: Vec<String> = pairs.iter().flat_map(|(r, h)| r.iter().chain(h)).cloned().collect();
        tokens.sort();
        tokens.dedup();
        let (table, load) = EmbeddingTable::load(&p.embeddings, &Vocabulary::from_tokens(tokens))?;
        log::info!("embedding coverage {:.3} of evaluation tokens", load.coverage);
        let emb = embedding_scores(&table, &pairs)?;

        let ontology = Ontology::load(&p.ontology)?;
        let db = Database::load(&p.database)?;
        let mut by_dialogue: BTreeMap<&str, Vec<(usize, Vec<String>)>> = BTreeMap::new();
        for (l, (_, h)) in lines.iter().zip(&pairs) {
            by_dialogue.entry(&l.dialogue_id).or_default().push((l.turn_index, h.clone()));
        }
        let generated: Vec<GeneratedDialogue> = by_dialogue
            .into_iter()
            .map(|(id, mut turns)| {
                turns.sort_by_key(|t| t.0);
                GeneratedDialogue {
                    dialogue_id: id.to_string(),
                    responses: turns.into_iter().map(|t| t.1).collect(),
                }
            })
            .collect();
        let success = inform_request(&generated, &goals, &db, &ontology);
        let report = EvalReport {
            tool_version: TOOL_VERSION.to_string(),
            config_fingerprint: self.config.fingerprint(),
            arch: arch.to_string(),
            split: split.to_string(),
            pair_count: pairs.len(),
            bleu,
            avg_embedding: emb.avg_embedding,
            vector_extrema: emb.vector_extrema,
            greedy_matching: emb.greedy_matching,
            inform: success.inform,
            request: success.request,
            skipped_pairs: emb.skipped,
            inform_dialogues: success.inform_dialogues,
            requested_slots: success.requested_slots,
            excluded_dialogues: success.excluded,
            embedding_file: file_name(&p.embeddings),
            evaluator_conventions: EVALUATOR_CONVENTIONS.to_string(),
        };
        debug_assert!(report.in_range());
        Ok(report)
    }

    /// Side-by-side table of every evaluated run on `split`, with the
    /// published full-corpus numbers as reference columns.
    pub fn cmd_report(&self, split: Split) -> Result<String, PipelineError> {
        let mut runs: Vec<(Architecture, EvalReport, Option<TrainHistory>)> = Vec::new();
        for arch in [Architecture::Hred, Architecture::ExemplarHred] {
            let path = self.report_path(arch, split);
            if path.exists() {
                let history = read_json(&self.run_dir(arch).join("history.json")).ok();
                runs.push((arch, read_json(&path)?, history));
            }
        }
        if runs.is_empty() {
            return Err(PipelineError::Usage(format!(
                "no evaluated runs under {}; run `evaluate` first",
                self.work_dir.join("runs").display()
            )));
        }
        let text = render_comparison(&runs);
        let ppl = |a: Architecture| {
            runs.iter()
                .find(|r| r.0 == a)
                .and_then(|r| r.2.as_ref())
                .and_then(|h| h.best_dev_loss)
                .map(f64::exp)
        };
        let soft_check = match (ppl(Architecture::ExemplarHred), ppl(Architecture::Hred)) {
            (Some(e), Some(h)) => {
                let ok = e <= h;
                log::info!("soft check: Exemplar-HRED dev perplexity {e:.3} vs HRED {h:.3} ({})", if ok { "better or equal" } else { "worse" });
                Some(ok)
            }
            _ => None,
        };
        let summary = serde_json::json!({
            "split": split.name(),
            "runs": runs.iter().map(|r| &r.1).collect::<Vec<_>>(),
            "exemplar_dev_perplexity_not_worse": soft_check,
        });
        write_json(&self.work_dir.join(format!("report_{}.json", split.name())), &summary)?;
        let path = self.work_dir.join(format!("report_{}.txt", split.name()));
        write_atomic(&path, text.as_bytes()).map_err(|e| io_err(&path, e))?;
        Ok(text)
    }
}

fn split_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationLine>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn render_comparison(runs: &[(Architecture, EvalReport, Option<TrainHistory>)]) -> String {
    let mut header = vec!["Metric".to_string()];
    let mut columns: Vec<Vec<String>> = Vec::new();
    for (arch, report, history) in runs {
        header.push(arch.display_name().to_string());
        let mut col: Vec<String> = display_rows(report).into_iter().map(|r| r.1).collect();
        col.push(
            history
                .as_ref()
                .and_then(|h| h.best_dev_loss)
                .map_or("-".into(), |l| format!("{:.2}", l.exp())),
        );
        columns.push(col);
    }
    for (name, t) in [("HRED (ref)", HRED_TARGETS), ("Exemplar-HRED (ref)", EXEMPLAR_TARGETS)] {
        header.push(name.to_string());
        let mut col = target_rows(&t).to_vec();
        col.push("-".into());
        columns.push(col);
    }
    let names = ["BLEU", "Average", "Extrema", "Greedy", "Inform", "Request", "Dev PPL"];
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    widths[0] = widths[0].max(names.iter().map(|n| n.len()).max().unwrap_or(0));
    for (c, col) in columns.iter().enumerate() {
        for v in col {
            widths[c + 1] = widths[c + 1].max(v.len());
        }
    }
    let row = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = String::new();
    out.push_str(&row(header.iter().map(String::as_str).collect()));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for (r, name) in names.iter().enumerate() {
        let mut cells = vec![*name];
        cells.extend(columns.iter().map(|c| c[r].as_str()));
        out.push_str(&row(cells));
        out.push('\n');
    }
    out.push_str("BLEU and Greedy x100; (ref) columns are published full-corpus numbers, not desk-scale targets.\n");
    out
}
