//! Mini-batch Adam training with gradient clipping, dev-loss early stopping
//! and versioned binary checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, ParamStore, Tape};
use crate::io::write_atomic;
use crate::model::{DialogueModel, Example, ModelConfig, ModelError, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EXDLGCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training examples")]
    NoExamples,
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad checkpoint: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint was trained with vocabulary {found}, current vocabulary is {expected}")]
    VocabMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            max_epochs: 50,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: String| Err(TrainingError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience >= self.max_epochs {
            return bad(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return bad("learning_rate and clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in store.iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.value[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Improved,
    Stale,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Records a dev loss; `Stop` once `patience` epochs in a row fail to
    /// improve on the best value.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Observation {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            Observation::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                Observation::Stop
            } else {
                Observation::Stale
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_perplexity: f64,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_loss: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    /// Mean cross-entropy per target token.
    pub token_loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Token-weighted mean loss over `examples` in inference mode.
pub fn evaluate_loss(model: &DialogueModel, examples: &[Example]) -> Result<LossSummary, ModelError> {
    let losses: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(model.store());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let l = model.forward_loss(&mut tape, ex, &mut rng, false)?;
            Ok((tape.scalar(l) * ex.target.len() as f64, ex.target.len()))
        })
        .collect::<Result<_, ModelError>>()?;
    let (total, tokens) = losses.iter().fold((0.0, 0), |(s, n), &(l, t)| (s + l, n + t));
    let token_loss = if tokens == 0 { 0.0 } else { total / tokens as f64 };
    Ok(LossSummary {
        token_loss,
        perplexity: token_loss.exp(),
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_fingerprint: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: Vec<ParamShape>,
    pub adam_step: u64,
    pub early_stopping: EarlyStopping,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub adam: AdamState,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.params.iter() {
            put_f64s(&mut out, &p.value);
        }
        for m in &self.adam.m {
            put_f64s(&mut out, m);
        }
        for v in &self.adam.v {
            put_f64s(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, TrainingError> {
        let err = |message: String| TrainingError::Checkpoint {
            path: origin.to_string(),
            message,
        };
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8], TrainingError> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| err("truncated".into()))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(header_len)?).map_err(|e| err(format!("header: {e}")))?;
        let mut read_block = |n: usize| -> Result<Vec<f64>, TrainingError> {
            Ok(take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut params = ParamStore::new();
        for s in &header.params {
            let value = read_block(s.rows * s.cols)?;
            params.add(&s.name, s.rows, s.cols, value);
        }
        let mut m = Vec::new();
        for s in &header.params {
            m.push(read_block(s.rows * s.cols)?);
        }
        let mut v = Vec::new();
        for s in &header.params {
            v.push(read_block(s.rows * s.cols)?);
        }
        if pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let adam = AdamState {
            step: header.adam_step,
            m,
            v,
        };
        Ok(Checkpoint { header, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| TrainingError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        let bytes = std::fs::read(path).map_err(|source| TrainingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn check_vocab(&self, fingerprint: &str) -> Result<(), TrainingError> {
        if self.header.vocab_fingerprint != fingerprint {
            return Err(TrainingError::VocabMismatch {
                expected: fingerprint.to_string(),
                found: self.header.vocab_fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Rebuilds the model, checking parameter names and shapes against a
    /// freshly initialized one.
    pub fn into_model(self) -> Result<DialogueModel, TrainingError> {
        let mut model = DialogueModel::new(self.header.model.clone())?;
        install_params(&mut model.params, self.params).map_err(|message| TrainingError::Checkpoint {
            path: "<checkpoint>".into(),
            message,
        })?;
        Ok(model)
    }
}

fn install_params(set: &mut ParamSet, loaded: ParamStore) -> Result<(), String> {
    if set.store.len() != loaded.len() {
        return Err(format!("expected {} parameters, found {}", set.store.len(), loaded.len()));
    }
    for (dst, src) in set.store.iter_mut().zip(loaded.iter()) {
        if dst.name != src.name || dst.rows != src.rows || dst.cols != src.cols {
            return Err(format!(
                "parameter {} {}x{} does not match {} {}x{}",
                src.name, src.rows, src.cols, dst.name, dst.rows, dst.cols
            ));
        }
        dst.value.clone_from(&src.value);
    }
    Ok(())
}

fn shapes(store: &ParamStore) -> Vec<ParamShape> {
    store
        .iter()
        .map(|p| ParamShape {
            name: p.name.clone(),
            rows: p.rows,
            cols: p.cols,
        })
        .collect()
}

/// Where checkpoints go: `last.ckpt` after every epoch and `best.ckpt`
/// whenever the dev loss improves.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
}

impl CheckpointPolicy {
    pub fn last(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last.ckpt"))
    }

    pub fn best(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("best.ckpt"))
    }
}

pub struct TrainOutcome {
    /// Model holding the parameters of the best dev epoch.
    pub model: DialogueModel,
    pub history: TrainHistory,
}

/// Batches are split into this many chunks whatever the thread count, and
/// chunk gradients are summed in order, so results never depend on it.
const GRAD_CHUNKS: usize = 8;

fn example_rng(seed: u64, epoch: usize, example: usize) -> ChaCha8Rng {
    let mut rng = epoch_rng(seed, epoch, 2);
    rng.set_stream(2 + example as u64);
    rng
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

pub type EpochCallback<'a> = Box<dyn FnMut(&EpochRecord) + 'a>;

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub vocab_fingerprint: String,
    pub checkpoints: CheckpointPolicy,
    /// Called after every epoch.
    pub on_epoch: Option<EpochCallback<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, vocab_fingerprint: impl Into<String>) -> Self {
        Trainer {
            config,
            vocab_fingerprint: vocab_fingerprint.into(),
            checkpoints: CheckpointPolicy::default(),
            on_epoch: None,
        }
    }

    fn checkpoint(&self, model: &DialogueModel, adam: &AdamState, epoch: usize, es: &EarlyStopping, history: &TrainHistory) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                model: model.config.clone(),
                train: self.config.clone(),
                vocab_fingerprint: self.vocab_fingerprint.clone(),
                epoch,
                params: shapes(model.store()),
                adam_step: adam.step,
                early_stopping: es.clone(),
                history: history.clone(),
            },
            params: model.store().clone(),
            adam: adam.clone(),
        }
    }

    /// Trains from scratch, or continues from `resume` (typically the
    /// `last.ckpt` of an interrupted run).
    pub fn train(
        &mut self,
        mut model: DialogueModel,
        train: &[Example],
        dev: &[Example],
        resume: Option<Checkpoint>,
    ) -> Result<TrainOutcome, TrainingError> {
        self.config.validate()?;
        if train.is_empty() {
            return Err(TrainingError::NoExamples);
        }
        let cfg = self.config.clone();
        let mut adam = AdamState::new(model.store());
        let mut es = EarlyStopping::new(cfg.patience);
        let mut history = TrainHistory::default();
        let mut start = 0;
        let mut best_params = model.store().clone();
        if let Some(ck) = resume {
            ck.check_vocab(&self.vocab_fingerprint)?;
            start = ck.header.epoch;
            es = ck.header.early_stopping.clone();
            history = ck.header.history.clone();
            adam = ck.adam.clone();
            let path = "<resume>".to_string();
            install_params(&mut model.params, ck.params).map_err(|message| TrainingError::Checkpoint { path, message })?;
            best_params = match self.checkpoints.best().filter(|p| p.exists()) {
                Some(p) => Checkpoint::load(&p)?.params,
                None => model.store().clone(),
            };
            log::info!("resuming after epoch {start}");
            if history.stopped_early {
                start = cfg.max_epochs;
            }
        }
        let mut grads = Gradients::zeros_like(model.store());
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in start..cfg.max_epochs {
            let clock = Instant::now();
            order.sort_unstable();
            order.shuffle(&mut epoch_rng(cfg.seed, epoch, 1));
            let mut loss_sum = 0.0;
            let mut max_norm: f64 = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let chunk = batch.len().div_ceil(GRAD_CHUNKS);
                let parts: Vec<(Gradients, f64)> = batch
                    .par_chunks(chunk)
                    .map(|part| {
                        let mut g = Gradients::zeros_like(model.store());
                        let mut sum = 0.0;
                        for &i in part {
                            let mut rng = example_rng(cfg.seed, epoch, i);
                            let mut tape = Tape::new(model.store());
                            let loss = model.forward_loss(&mut tape, &train[i], &mut rng, true)?;
                            let value = tape.scalar(loss);
                            if !value.is_finite() {
                                return Err(TrainingError::NonFinite {
                                    what: "loss",
                                    epoch,
                                    batch: b,
                                });
                            }
                            sum += value;
                            tape.backward(loss, &mut g).map_err(ModelError::from)?;
                        }
                        Ok((g, sum))
                    })
                    .collect::<Result<_, TrainingError>>()?;
                grads.zero();
                for (g, sum) in &parts {
                    grads.add_assign(g);
                    loss_sum += sum;
                }
                grads.scale(1.0 / batch.len() as f64);
                if !grads.all_finite() {
                    return Err(TrainingError::NonFinite {
                        what: "gradient",
                        epoch,
                        batch: b,
                    });
                }
                let norm = grads.clip_global_norm(cfg.clip_norm);
                debug_assert!(grads.global_norm() <= cfg.clip_norm * (1.0 + 1e-9));
                max_norm = max_norm.max(norm);
                adam_step(&mut model.params.store, &grads, &mut adam, &cfg);
                if !model.store().all_finite() {
                    return Err(TrainingError::NonFinite {
                        what: "parameter",
                        epoch,
                        batch: b,
                    });
                }
            }
            let dev_summary = if dev.is_empty() {
                evaluate_loss(&model, train)?
            } else {
                evaluate_loss(&model, dev)?
            };
            let record = EpochRecord {
                epoch: epoch + 1,
                train_loss: loss_sum / train.len() as f64,
                dev_loss: dev_summary.token_loss,
                dev_perplexity: dev_summary.perplexity,
                max_grad_norm: max_norm,
            };
            log::info!(
                "epoch {} train {:.4} dev {:.4} ppl {:.2} ({:.1}s)",
                record.epoch,
                record.train_loss,
                record.dev_loss,
                record.dev_perplexity,
                clock.elapsed().as_secs_f64()
            );
            let obs = es.observe(epoch + 1, record.dev_loss);
            history.epochs.push(record.clone());
            history.best_epoch = es.best_epoch;
            history.best_dev_loss = es.best;
            if obs == Observation::Improved {
                best_params = model.store().clone();
            }
            if obs == Observation::Stop {
                history.stopped_early = true;
            }
            let ck = self.checkpoint(&model, &adam, epoch + 1, &es, &history);
            if obs == Observation::Improved {
                if let Some(p) = self.checkpoints.best() {
                    ck.save(&p)?;
                }
            }
            if let Some(p) = self.checkpoints.last() {
                ck.save(&p)?;
            }
            if let Some(cb) = self.on_epoch.as_mut() {
                cb(&record);
            }
            if obs == Observation::Stop {
                log::info!("early stopping after epoch {}", epoch + 1);
                break;
            }
        }
        model.params.store = best_params;
        Ok(TrainOutcome { model, history })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn tiny_model(seed: u64) -> DialogueModel {
        let mut c = ModelConfig::new(12, Architecture::Hred);
        c.embed_dim = 4;
        c.hidden_dim = 5;
        c.dropout = 0.0;
        c.seed = seed;
        DialogueModel::new(c).unwrap()
    }

    fn examples() -> Vec<Example> {
        (0..6u32)
            .map(|i| Example {
                s1: vec![4 + i % 3, 2],
                u: vec![5 + i % 4, 6, 2],
                exemplar: None,
                target: vec![7 + i % 5, 2],
            })
            .collect()
    }

    #[test]
    fn patience_must_be_below_max_epochs() {
        let cfg = TrainConfig {
            max_epochs: 5,
            patience: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainingError::Config(_))));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn early_stopping_counts_bad_epochs() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(1, 3.0), Observation::Improved);
        assert_eq!(es.observe(2, 2.0), Observation::Improved);
        assert_eq!(es.observe(3, 2.5), Observation::Stale);
        assert_eq!(es.observe(4, 1.5), Observation::Improved);
        assert_eq!(es.observe(5, 1.5), Observation::Stale);
        assert_eq!(es.observe(6, 1.6), Observation::Stop);
        assert_eq!(es.best_epoch, Some(4));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", 1, 3, vec![1.0, -1.0, 0.5]);
        let mut grads = Gradients::zeros_like(&store);
        let g: Vec<f64> = vec![0.3, -2.0, 0.0];
        {
            let mut tape = Tape::new(&store);
            let w = tape.param(id);
            let c = tape.constant(1, 3, g.clone());
            let p = tape.mul(w, c);
            let s = tape.sum(p);
            tape.backward(s, &mut grads).unwrap();
        }
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &grads, &mut state, &cfg);
        let v = &store.get(id).value;
        // bias-corrected first step is lr * sign(g) for |g| >> eps
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(v[2], 0.5);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_matches_hand_iteration() {
        // f(w) = 0.5 w^2, gradient w
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        let id = store.add("w", 1, 1, vec![2.0]);
        let mut state = AdamState::new(&store);
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let mut grads = Gradients::zeros_like(&store);
            {
                let mut tape = Tape::new(&store);
                let p = tape.param(id);
                let sq = tape.mul(p, p);
                let half = tape.scale(sq, 0.5);
                let s = tape.sum(half);
                tape.backward(s, &mut grads).unwrap();
            }
            adam_step(&mut store, &grads, &mut state, &cfg);
            let g = w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((store.get(id).value[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let model = tiny_model(3);
        let trainer = Trainer::new(TrainConfig::default(), "abc");
        let mut adam = AdamState::new(model.store());
        adam.step = 7;
        adam.m[0][0] = 0.25;
        let ck = trainer.checkpoint(&model, &adam, 2, &EarlyStopping::new(3), &TrainHistory::default());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong, "mem").is_err());
        assert!(matches!(back.check_vocab("xyz"), Err(TrainingError::VocabMismatch { .. })));
        let restored = back.into_model().unwrap();
        assert_eq!(restored.store(), model.store());
    }

    #[test]
    fn training_reduces_loss_and_keeps_best() {
        let data = examples();
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 0.02,
            max_epochs: 15,
            patience: 14,
            ..TrainConfig::default()
        };
        let before = evaluate_loss(&tiny_model(1), &data).unwrap().token_loss;
        let mut trainer = Trainer::new(cfg, "v");
        let out = trainer.train(tiny_model(1), &data, &data, None).unwrap();
        let after = evaluate_loss(&out.model, &data).unwrap().token_loss;
        assert!(after < before * 0.7, "{before} -> {after}");
        assert_eq!(Some(after), out.history.best_dev_loss);
        assert!(out.history.epochs.iter().all(|e| e.max_grad_norm.is_finite()));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = examples();
        let dir = tempfile::tempdir().unwrap();
        let cfg = |max_epochs| TrainConfig {
            batch_size: 4,
            learning_rate: 0.01,
            max_epochs,
            patience: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut full = Trainer::new(cfg(6), "v");
        let full_out = full.train(tiny_model(2), &data, &data, None).unwrap();

        let mut first = Trainer::new(cfg(3), "v");
        first.checkpoints.dir = Some(dir.path().to_path_buf());
        first.train(tiny_model(2), &data, &data, None).unwrap();
        let ck = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(ck.header.epoch, 3);
        let mut second = Trainer::new(cfg(6), "v");
        second.checkpoints.dir = Some(dir.path().to_path_buf());
        let resumed = second.train(tiny_model(99), &data, &data, Some(ck)).unwrap();
        assert_eq!(resumed.history, full_out.history);
        assert_eq!(resumed.model.store(), full_out.model.store());
    }

    #[test]
    fn thread_count_does_not_change_training() {
        let data = examples();
        let cfg = TrainConfig {
            batch_size: 5,
            learning_rate: 0.01,
            max_epochs: 3,
            patience: 2,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| Trainer::new(cfg.clone(), "v").train(tiny_model(6), &data, &data, None).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.store(), b.model.store());
    }

    #[test]
    fn vocab_mismatch_blocks_resume() {
        let model = tiny_model(3);
        let t = Trainer::new(TrainConfig::default(), "old");
        let ck = t.checkpoint(&model, &AdamState::new(model.store()), 1, &EarlyStopping::new(2), &TrainHistory::default());
        let mut t2 = Trainer::new(TrainConfig::default(), "new");
        assert!(matches!(
            t2.train(tiny_model(3), &examples(), &[], Some(ck)),
            Err(TrainingError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let mut model = tiny_model(4);
        for p in model.params.store.iter_mut() {
            p.value.iter_mut().for_each(|v| *v = f64::NAN);
        }
        let mut t = Trainer::new(
            TrainConfig {
                max_epochs: 2,
                patience: 1,
                ..TrainConfig::default()
            },
            "v",
        );
        assert!(matches!(
            t.train(model, &examples(), &[], None),
            Err(TrainingError::NonFinite { .. })
        ));
    }
}
