use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sparse::{vectorize, IdfTable};
use super::RetrievalError;
use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::metrics::avg_embedding_similarity;
use crate::text::EmbeddingTable;
use crate::training::{adam_step, AdamState, TrainConfig};

pub const FEATURE_NAMES: [&str; 5] = ["tfidf_cosine", "token_jaccard", "bm25", "length_ratio", "avg_embedding_cosine"];
pub const FEATURE_COUNT: usize = FEATURE_NAMES.len();
pub const HEURISTIC_WEIGHTS: [f64; FEATURE_COUNT] = [0.4, 0.2, 0.2, 0.1, 0.1];
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

pub type Features = [f64; FEATURE_COUNT];

/// Shared statistics for the similarity features.
#[derive(Debug, Clone, Copy)]
pub struct FeatureResources<'a> {
    pub idf: &'a IdfTable,
    pub embeddings: Option<&'a EmbeddingTable>,
}

pub fn token_jaccard<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> f64 {
    let sa: HashSet<&str> = a.iter().map(|t| t.as_ref()).collect();
    let sb: HashSet<&str> = b.iter().map(|t| t.as_ref()).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Okapi BM25 of the candidate for the distinct query terms.
pub fn bm25<S: AsRef<str>, T: AsRef<str>>(query: &[S], candidate: &[T], idf: &IdfTable) -> f64 {
    let mut terms: Vec<&str> = query.iter().map(|t| t.as_ref()).collect();
    terms.sort_unstable();
    terms.dedup();
    let len = candidate.len() as f64;
    let avg = if idf.avg_doc_len > 0.0 { idf.avg_doc_len } else { 1.0 };
    terms
        .into_iter()
        .map(|term| {
            let tf = candidate.iter().filter(|t| t.as_ref() == term).count() as f64;
            if tf == 0.0 {
                return 0.0;
            }
            idf.bm25_idf(term) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * len / avg))
        })
        .sum()
}

pub fn length_ratio(a: usize, b: usize) -> f64 {
    let hi = a.max(b);
    if hi == 0 {
        return 0.0;
    }
    a.min(b) as f64 / hi as f64
}

/// Features in [`FEATURE_NAMES`] order. BM25 is non-negative and unbounded,
/// the others lie in [0, 1] (the embedding cosine in [-1, 1]).
pub fn feature_vector<S: AsRef<str>, T: AsRef<str>>(query: &[S], candidate: &[T], res: &FeatureResources) -> Features {
    let tfidf = vectorize(query, res.idf).cosine(&vectorize(candidate, res.idf));
    let emb = res
        .embeddings
        .and_then(|e| avg_embedding_similarity(e, query, candidate))
        .unwrap_or(0.0);
    [
        tfidf,
        token_jaccard(query, candidate),
        bm25(query, candidate, res.idf),
        length_ratio(query.len(), candidate.len()),
        emb,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpReranker {
    pub hidden: usize,
    /// `FEATURE_COUNT x hidden`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    /// Standardization applied to the raw features.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RerankerModel {
    Heuristic { weights: Vec<f64> },
    Mlp(MlpReranker),
}

impl Default for RerankerModel {
    fn default() -> Self {
        RerankerModel::Heuristic {
            weights: HEURISTIC_WEIGHTS.to_vec(),
        }
    }
}

impl RerankerModel {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let ok = match self {
            RerankerModel::Heuristic { weights } => weights.len() == FEATURE_COUNT,
            RerankerModel::Mlp(m) => {
                m.w1.len() == FEATURE_COUNT * m.hidden
                    && m.b1.len() == m.hidden
                    && m.w2.len() == m.hidden
                    && m.feature_mean.len() == FEATURE_COUNT
                    && m.feature_std.len() == FEATURE_COUNT
            }
        };
        if ok {
            Ok(())
        } else {
            Err(RetrievalError::Config("reranker dimensions do not match the feature count".into()))
        }
    }

    pub fn score(&self, f: &Features) -> f64 {
        match self {
            RerankerModel::Heuristic { weights } => weights.iter().zip(f).map(|(w, x)| w * x).sum(),
            RerankerModel::Mlp(m) => {
                let x: Vec<f64> = (0..FEATURE_COUNT).map(|i| (f[i] - m.feature_mean[i]) / m.feature_std[i]).collect();
                let mut out = m.b2;
                for j in 0..m.hidden {
                    let mut h = m.b1[j];
                    for (i, xi) in x.iter().enumerate() {
                        h += xi * m.w1[i * m.hidden + j];
                    }
                    out += m.w2[j] * h.tanh();
                }
                out
            }
        }
    }
}

/// Reorders `items` by descending score; equal scores keep ascending
/// distance order. Returns the permutation applied and the scores.
pub fn rerank_order(scores: &[f64], distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(distances[a].total_cmp(&distances[b]))
    });
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankerTrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub heldout_fraction: f64,
    pub min_pairs: usize,
    /// Training queries used for weak labelling; 0 means all.
    pub max_queries: usize,
    pub seed: u64,
}

impl Default for RerankerTrainConfig {
    fn default() -> Self {
        RerankerTrainConfig {
            hidden: 16,
            learning_rate: 0.01,
            max_epochs: 100,
            patience: 10,
            batch_size: 64,
            margin: 1.0,
            heldout_fraction: 0.1,
            min_pairs: 20,
            max_queries: 3000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerTrainReport {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub epochs: usize,
    pub heldout_loss: Vec<f64>,
    pub heldout_accuracy: f64,
}

/// A preference: the first feature vector should outscore the second.
pub type FeaturePair = (Features, Features);

struct MlpParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn standardize(x: &Features, mean: &[f64], std: &[f64]) -> Vec<f64> {
    (0..FEATURE_COUNT).map(|i| (x[i] - mean[i]) / std[i]).collect()
}

fn hinge_loss(tape: &mut Tape, p: &MlpParams, pos: Vec<f64>, neg: Vec<f64>, rows: usize, margin: f64) -> Var {
    let score = |tape: &mut Tape, x: Vec<f64>| {
        let xv = tape.constant(rows, FEATURE_COUNT, x);
        let (w1, b1, w2, b2) = (tape.param(p.w1), tape.param(p.b1), tape.param(p.w2), tape.param(p.b2));
        let h = tape.matmul(xv, w1);
        let h = tape.add(h, b1);
        let h = tape.tanh(h);
        let s = tape.matmul(h, w2);
        tape.add(s, b2)
    };
    let sp = score(tape, pos);
    let sn = score(tape, neg);
    let diff = tape.sub(sn, sp);
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    tape.mean(hinge)
}

/// Fits the MLP with pairwise hinge loss, stopping on the held-out loss.
pub fn train_from_pairs(pairs: &[FeaturePair], cfg: &RerankerTrainConfig) -> Result<(RerankerModel, RerankerTrainReport), RetrievalError> {
    if pairs.len() < cfg.min_pairs.max(2) {
        return Err(RetrievalError::InsufficientPairs {
            found: pairs.len(),
            required: cfg.min_pairs.max(2),
        });
    }
    if cfg.hidden == 0 || cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(RetrievalError::Config("hidden, batch_size and max_epochs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_held = ((pairs.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, pairs.len() - 1);
    let (held_idx, train_idx) = order.split_at(n_held);

    let mut mean = vec![0.0; FEATURE_COUNT];
    let mut std = vec![0.0; FEATURE_COUNT];
    let rows: Vec<&Features> = train_idx.iter().flat_map(|&i| [&pairs[i].0, &pairs[i].1]).collect();
    for r in &rows {
        for i in 0..FEATURE_COUNT {
            mean[i] += r[i] / rows.len() as f64;
        }
    }
    for r in &rows {
        for i in 0..FEATURE_COUNT {
            std[i] += (r[i] - mean[i]).powi(2) / rows.len() as f64;
        }
    }
    for s in std.iter_mut() {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }

    let mut store = ParamStore::new();
    let h = cfg.hidden;
    let p = MlpParams {
        w1: store.add_uniform("w1", FEATURE_COUNT, h, 0.5, &mut rng),
        b1: store.add("b1", 1, h, vec![0.0; h]),
        w2: store.add_uniform("w2", h, 1, 0.5, &mut rng),
        b2: store.add("b2", 1, 1, vec![0.0]),
    };
    let opt = TrainConfig {
        learning_rate: cfg.learning_rate,
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new(&store);
    let mut grads = Gradients::zeros_like(&store);
    let gather = |idx: &[usize]| {
        let pos: Vec<f64> = idx.iter().flat_map(|&i| standardize(&pairs[i].0, &mean, &std)).collect();
        let neg: Vec<f64> = idx.iter().flat_map(|&i| standardize(&pairs[i].1, &mean, &std)).collect();
        (pos, neg)
    };
    let held_loss = |store: &ParamStore| {
        let (pos, neg) = gather(held_idx);
        let mut tape = Tape::new(store);
        let l = hinge_loss(&mut tape, &p, pos, neg, held_idx.len(), cfg.margin);
        tape.scalar(l)
    };

    let mut best = (held_loss(&store), store.clone());
    let mut history = Vec::new();
    let mut bad = 0;
    let mut train_order = train_idx.to_vec();
    let mut epochs = 0;
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        train_order.shuffle(&mut rng);
        for batch in train_order.chunks(cfg.batch_size) {
            let (pos, neg) = gather(batch);
            grads.zero();
            let mut tape = Tape::new(&store);
            let l = hinge_loss(&mut tape, &p, pos, neg, batch.len(), cfg.margin);
            tape.backward(l, &mut grads).expect("scalar loss");
            drop(tape);
            grads.clip_global_norm(5.0);
            adam_step(&mut store, &grads, &mut adam, &opt);
        }
        let loss = held_loss(&store);
        history.push(loss);
        if loss < best.0 {
            best = (loss, store.clone());
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    let store = best.1;
    let model = MlpReranker {
        hidden: h,
        w1: store.get(p.w1).value.clone(),
        b1: store.get(p.b1).value.clone(),
        w2: store.get(p.w2).value.clone(),
        b2: store.get(p.b2).value[0],
        feature_mean: mean,
        feature_std: std,
    };
    let model = RerankerModel::Mlp(model);
    let correct = held_idx
        .iter()
        .filter(|&&i| model.score(&pairs[i].0) > model.score(&pairs[i].1))
        .count();
    let report = RerankerTrainReport {
        train_pairs: train_idx.len(),
        heldout_pairs: held_idx.len(),
        epochs,
        heldout_loss: history,
        heldout_accuracy: correct as f64 / held_idx.len() as f64,
    };
    log::info!(
        "reranker: {} train / {} held-out pairs, {} epochs, held-out accuracy {:.3}",
        report.train_pairs,
        report.heldout_pairs,
        report.epochs,
        report.heldout_accuracy
    );
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn idf() -> IdfTable {
        IdfTable::fit(&[
            vec!["i", "want", "a", "cheap", "hotel"],
            vec!["i", "want", "a", "train"],
            vec!["what", "is", "the", "phone"],
        ])
    }

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_utterances() {
        let idf = idf();
        let emb = EmbeddingTable::from_vectors(2, vec![("cheap".into(), vec![1.0, 2.0]), ("hotel".into(), vec![0.5, -1.0])]);
        let res = FeatureResources {
            idf: &idf,
            embeddings: Some(&emb),
        };
        let q = t("i want a cheap hotel");
        let f = feature_vector(&q, &q, &res);
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert_eq!(f[1], 1.0);
        assert!((f[2] - bm25(&q, &q, &idf)).abs() < 1e-15);
        assert_eq!(f[3], 1.0);
        assert_eq!(f[4], 1.0);
    }

    #[test]
    fn disjoint_utterances() {
        let idf = idf();
        let res = FeatureResources { idf: &idf, embeddings: None };
        let f = feature_vector(&t("cheap hotel"), &t("what phone"), &res);
        assert_eq!((f[0], f[1], f[2]), (0.0, 0.0, 0.0));
        assert_eq!(f[3], 1.0);
    }

    #[test]
    fn bm25_hand_value() {
        // query "train", candidate "i want a train" (len 4), avgdl 13/3, df 1, N 3
        let idf = idf();
        let got = bm25(&t("train"), &t("i want a train"), &idf);
        let idf_t = (1.0f64 + 2.5 / 1.5).ln();
        let want = idf_t * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 4.0 / (13.0 / 3.0)));
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn jaccard_and_length_ratio() {
        assert_eq!(token_jaccard(&t("a b c"), &t("b c d")), 0.5);
        assert_eq!(length_ratio(3, 6), 0.5);
        assert_eq!(length_ratio(0, 0), 0.0);
    }

    #[test]
    fn single_feature_weights_order_by_that_feature() {
        let m = RerankerModel::Heuristic {
            weights: vec![1.0, 0.0, 0.0, 0.0, 0.0],
        };
        let feats = [[0.2, 9.0, 0.0, 0.0, 0.0], [0.9, 0.0, 0.0, 0.0, 0.0], [0.5, 1.0, 0.0, 0.0, 0.0]];
        let scores: Vec<f64> = feats.iter().map(|f| m.score(f)).collect();
        assert_eq!(rerank_order(&scores, &[0.1, 0.2, 0.3]), vec![1, 2, 0]);
    }

    #[test]
    fn ties_keep_distance_order() {
        assert_eq!(rerank_order(&[1.0, 1.0, 2.0], &[0.5, 0.1, 0.9]), vec![2, 1, 0]);
        assert_eq!(rerank_order(&[0.3], &[0.0]), vec![0]);
    }

    #[test]
    fn too_few_pairs() {
        assert!(matches!(
            train_from_pairs(&[], &RerankerTrainConfig::default()),
            Err(RetrievalError::InsufficientPairs { found: 0, .. })
        ));
    }

    #[test]
    fn learns_a_separable_preference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut feat = |label_high: bool| {
            let mut f = [0.0; FEATURE_COUNT];
            for x in f.iter_mut() {
                *x = rng.random_range(0.0..1.0);
            }
            f[1] = if label_high { rng.random_range(0.6..1.0) } else { rng.random_range(0.0..0.4) };
            f
        };
        let pairs: Vec<FeaturePair> = (0..400).map(|_| (feat(true), feat(false))).collect();
        let (model, report) = train_from_pairs(&pairs, &RerankerTrainConfig::default()).unwrap();
        assert!(report.heldout_accuracy >= 0.99, "{report:?}");
        model.validate().unwrap();
        let all_ok = pairs.iter().filter(|(a, b)| model.score(a) > model.score(b)).count();
        assert!(all_ok as f64 / pairs.len() as f64 >= 0.99);
    }
}
