//! Exemplar retrieval: TF-IDF vectors over training user utterances, exact
//! or LSH nearest-neighbour search, and a feature-based reranker.

mod index;
mod rerank;
mod sparse;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{LshConfig, Neighbor, SearchMode, VectorIndex};
pub use rerank::{
    bm25, feature_vector, length_ratio, rerank_order, token_jaccard, train_from_pairs, FeaturePair, FeatureResources,
    Features, MlpReranker, RerankerModel, RerankerTrainConfig, RerankerTrainReport, BM25_B, BM25_K1, FEATURE_COUNT,
    FEATURE_NAMES, HEURISTIC_WEIGHTS,
};
pub use sparse::{vectorize, IdfTable, SparseVector};

use crate::corpus::ContextTriple;
use crate::io::write_atomic;
use crate::metrics::sentence_bleu;
use crate::text::detokenize;

pub const INDEX_FORMAT_VERSION: u32 = 1;
/// Neighbours retrieved per query before reranking.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index from an empty training set")]
    EmptyIndex,
    #[error("only {found} weakly labelled pairs, at least {required} needed")]
    InsufficientPairs { found: usize, required: usize },
    #[error("invalid retrieval configuration: {0}")]
    Config(String),
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error("unsupported index version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// A training user utterance and the system response that followed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub record_id: usize,
    pub user_tokens: Vec<String>,
    pub response_tokens: Vec<String>,
    pub dialogue_id: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub record: usize,
    pub distance: f64,
}

/// Neighbours of one query, ascending by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub query: Vec<String>,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exemplar {
    pub record: usize,
    pub distance: f64,
    pub rerank_score: f64,
}

/// One line of the exemplar audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarAudit {
    pub query: String,
    pub exemplar_user: String,
    pub exemplar_response: String,
    pub distance: f64,
    pub rerank_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnIndex {
    pub version: u32,
    pub mode: SearchMode,
    pub idf: IdfTable,
    pub records: Vec<ExemplarRecord>,
    pub vectors: VectorIndex,
    #[serde(skip)]
    groups: HashMap<String, u32>,
}

fn group_ids<'a>(ids: impl Iterator<Item = &'a str>) -> (Vec<u32>, HashMap<String, u32>) {
    let mut map: HashMap<String, u32> = HashMap::new();
    let groups = ids
        .map(|id| {
            let next = map.len() as u32;
            *map.entry(id.to_string()).or_insert(next)
        })
        .collect();
    (groups, map)
}

impl AnnIndex {
    /// One record per training triple, keyed by its user utterance.
    pub fn build(triples: &[ContextTriple], mode: SearchMode, lsh: LshConfig) -> Result<Self, RetrievalError> {
        if triples.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let records: Vec<ExemplarRecord> = triples
            .iter()
            .enumerate()
            .map(|(i, t)| ExemplarRecord {
                record_id: i,
                user_tokens: t.u.tokens.clone(),
                response_tokens: t.s2.tokens.clone(),
                dialogue_id: t.dialogue_id.clone(),
                turn_index: t.turn_index,
            })
            .collect();
        let docs: Vec<Vec<String>> = records.iter().map(|r| r.user_tokens.clone()).collect();
        let idf = IdfTable::fit(&docs);
        let vectors = docs.iter().map(|d| vectorize(d, &idf)).collect();
        let (groups, map) = group_ids(records.iter().map(|r| r.dialogue_id.as_str()));
        let index = VectorIndex::build(idf.dim(), vectors, groups, lsh)?;
        log::info!("index: {} records over {} terms", records.len(), idf.dim());
        Ok(AnnIndex {
            version: INDEX_FORMAT_VERSION,
            mode,
            idf,
            records,
            vectors: index,
            groups: map,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, RetrievalError> {
        let mut index: AnnIndex = serde_json::from_str(text).map_err(|source| RetrievalError::Json {
            path: origin.to_string(),
            source,
        })?;
        if index.version != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::Version {
                found: index.version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        if index.records.len() != index.vectors.len() {
            return Err(RetrievalError::Corrupt(format!(
                "{} records but {} vectors",
                index.records.len(),
                index.vectors.len()
            )));
        }
        index.idf.reindex();
        index.vectors.rebuild()?;
        let (groups, map) = group_ids(index.records.iter().map(|r| r.dialogue_id.as_str()));
        if groups != index.vectors.groups {
            return Err(RetrievalError::Corrupt("record groups do not match dialogue ids".into()));
        }
        index.groups = map;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let text = std::fs::read_to_string(path).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Nearest training records for a user utterance, never from
    /// `exclude_dialogue`.
    pub fn query_knn<S: AsRef<str>>(&self, tokens: &[S], k: usize, exclude_dialogue: Option<&str>) -> CandidateSet {
        let q = vectorize(tokens, &self.idf);
        let exclude = exclude_dialogue.and_then(|d| self.groups.get(d).copied());
        let hits = self.vectors.query(&q, k, self.mode, exclude);
        CandidateSet {
            query: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
            candidates: hits
                .into_iter()
                .map(|n| Candidate {
                    record: n.index,
                    distance: n.distance,
                })
                .collect(),
        }
    }

    /// Candidates reordered by reranker score, with the scores.
    pub fn rerank(&self, set: &CandidateSet, model: &RerankerModel, res: &FeatureResources) -> Vec<(Candidate, f64)> {
        let scores: Vec<f64> = set
            .candidates
            .iter()
            .map(|c| model.score(&feature_vector(&set.query, &self.records[c.record].user_tokens, res)))
            .collect();
        let distances: Vec<f64> = set.candidates.iter().map(|c| c.distance).collect();
        rerank_order(&scores, &distances)
            .into_iter()
            .map(|i| (set.candidates[i], scores[i]))
            .collect()
    }

    /// Top reranked neighbour among the `k` retrieved. Falls back to exact
    /// search when the LSH buckets hold no usable candidate.
    pub fn exemplar_for<S: AsRef<str>>(
        &self,
        tokens: &[S],
        exclude_dialogue: Option<&str>,
        k: usize,
        model: &RerankerModel,
        res: &FeatureResources,
    ) -> Option<Exemplar> {
        let mut set = self.query_knn(tokens, k, exclude_dialogue);
        if set.candidates.is_empty() && self.mode == SearchMode::Approximate {
            let q = vectorize(tokens, &self.idf);
            let exclude = exclude_dialogue.and_then(|d| self.groups.get(d).copied());
            set.candidates = self
                .vectors
                .query_exact(&q, k, exclude)
                .into_iter()
                .map(|n| Candidate {
                    record: n.index,
                    distance: n.distance,
                })
                .collect();
        }
        self.rerank(&set, model, res).first().map(|(c, s)| Exemplar {
            record: c.record,
            distance: c.distance,
            rerank_score: *s,
        })
    }

    pub fn audit<S: AsRef<str>>(&self, query: &[S], ex: &Exemplar) -> ExemplarAudit {
        let r = &self.records[ex.record];
        ExemplarAudit {
            query: detokenize(query),
            exemplar_user: detokenize(&r.user_tokens),
            exemplar_response: detokenize(&r.response_tokens),
            distance: ex.distance,
            rerank_score: ex.rerank_score,
        }
    }

    /// Weakly labelled preference pairs: among a training query's
    /// candidates, the one whose response has the highest BLEU-2 against the
    /// gold response beats the one with the lowest.
    pub fn weak_pairs(&self, triples: &[ContextTriple], res: &FeatureResources, max_queries: usize) -> Vec<FeaturePair> {
        let take = if max_queries == 0 { triples.len() } else { max_queries.min(triples.len()) };
        // evenly spaced queries so the sample spans the whole training set
        let step = triples.len() as f64 / take.max(1) as f64;
        let mut pairs = Vec::new();
        for q in 0..take {
            let t = &triples[(q as f64 * step) as usize];
            let set = self.query_knn(&t.u.tokens, DEFAULT_K, Some(&t.dialogue_id));
            if set.candidates.len() < 2 {
                continue;
            }
            let labels: Vec<f64> = set
                .candidates
                .iter()
                .map(|c| sentence_bleu(&t.s2.tokens, &self.records[c.record].response_tokens, 2))
                .collect();
            let (mut best, mut worst) = (0, 0);
            for (i, &l) in labels.iter().enumerate() {
                if l > labels[best] {
                    best = i;
                }
                if l < labels[worst] {
                    worst = i;
                }
            }
            if labels[best] <= labels[worst] {
                continue;
            }
            let feats = |i: usize| feature_vector(&t.u.tokens, &self.records[set.candidates[i].record].user_tokens, res);
            let (pos, neg) = (feats(best), feats(worst));
            // identical features cannot be ranked either way
            if pos != neg {
                pairs.push((pos, neg));
            }
        }
        pairs
    }

    pub fn train_reranker(
        &self,
        triples: &[ContextTriple],
        res: &FeatureResources,
        cfg: &RerankerTrainConfig,
    ) -> Result<(RerankerModel, RerankerTrainReport), RetrievalError> {
        let pairs = self.weak_pairs(triples, res, cfg.max_queries);
        train_from_pairs(&pairs, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Utterance};

    fn triple(d: &str, i: usize, u: &str, s2: &str) -> ContextTriple {
        ContextTriple {
            s1: Utterance::new(Speaker::System, "hello").tokenized(),
            u: Utterance::new(Speaker::User, u).tokenized(),
            s2: Utterance::new(Speaker::System, s2).tokenized(),
            dialogue_id: d.into(),
            turn_index: i,
        }
    }

    fn triples() -> Vec<ContextTriple> {
        vec![
            triple("d1", 2, "i need a cheap hotel", "the acorn is cheap ."),
            triple("d1", 4, "what is the phone number", "it is hotel-phone ."),
            triple("d2", 2, "i need a train to ely", "train-trainid leaves at 9 ."),
            triple("d3", 2, "what is the phone number please", "the number is restaurant-phone ."),
            triple("d3", 4, "book a table for two", "booked , ref restaurant-reference ."),
        ]
    }

    fn resources(idx: &AnnIndex) -> FeatureResources<'_> {
        FeatureResources {
            idf: &idx.idf,
            embeddings: None,
        }
    }

    #[test]
    fn record_per_triple() {
        let idx = AnnIndex::build(&triples(), SearchMode::Exact, LshConfig::default()).unwrap();
        assert_eq!(idx.len(), 5);
        assert_eq!(idx.records[2].response_tokens.join(" "), "train-trainid leaves at 9 .");
    }

    #[test]
    fn same_dialogue_is_never_returned() {
        let idx = AnnIndex::build(&triples(), SearchMode::Exact, LshConfig::default()).unwrap();
        let q = crate::text::tokenize("what is the phone number");
        let set = idx.query_knn(&q, 10, Some("d1"));
        assert!(set.candidates.iter().all(|c| idx.records[c.record].dialogue_id != "d1"));
        assert_eq!(idx.records[set.candidates[0].record].dialogue_id, "d3");
        let ex = idx
            .exemplar_for(&q, Some("d1"), 10, &RerankerModel::default(), &resources(&idx))
            .unwrap();
        assert_eq!(idx.records[ex.record].response_tokens.join(" "), "the number is restaurant-phone .");
    }

    #[test]
    fn identical_query_from_other_dialogue_ranks_first() {
        for mode in [SearchMode::Exact, SearchMode::Approximate] {
            let idx = AnnIndex::build(&triples(), mode, LshConfig::default()).unwrap();
            let q = crate::text::tokenize("i need a train to ely");
            let set = idx.query_knn(&q, 3, Some("d9"));
            assert_eq!(set.candidates[0].record, 2);
            assert!(set.candidates[0].distance.abs() < 1e-12);
        }
    }

    #[test]
    fn one_record_index_always_answers() {
        let idx = AnnIndex::build(&triples()[..1], SearchMode::Exact, LshConfig::default()).unwrap();
        for q in ["zebra crossing", "phone"] {
            let set = idx.query_knn(&crate::text::tokenize(q), 10, None);
            assert_eq!(set.candidates.len(), 1);
        }
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let idx = AnnIndex::build(&triples(), SearchMode::Approximate, LshConfig::default()).unwrap();
        let json = idx.to_json();
        let back = AnnIndex::from_json(&json, "mem").unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_json(), json);
        let q = crate::text::tokenize("cheap hotel please");
        assert_eq!(back.query_knn(&q, 5, None), idx.query_knn(&q, 5, None));
        let wrong = json.replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(AnnIndex::from_json(&wrong, "mem"), Err(RetrievalError::Version { .. })));
    }

    #[test]
    fn rerank_is_a_permutation() {
        let idx = AnnIndex::build(&triples(), SearchMode::Exact, LshConfig::default()).unwrap();
        let set = idx.query_knn(&crate::text::tokenize("phone number for the hotel"), 10, None);
        let out = idx.rerank(&set, &RerankerModel::default(), &resources(&idx));
        let mut a: Vec<usize> = out.iter().map(|(c, _)| c.record).collect();
        let mut b: Vec<usize> = set.candidates.iter().map(|c| c.record).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(
            AnnIndex::build(&[], SearchMode::Exact, LshConfig::default()),
            Err(RetrievalError::EmptyIndex)
        ));
    }
}
