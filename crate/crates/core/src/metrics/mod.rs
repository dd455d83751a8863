//! Generation metrics: corpus BLEU, three word-embedding similarities and
//! goal-level inform/request success.

mod bleu;
mod embedding;
mod success;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{corpus_bleu, sentence_bleu, BleuStats};
pub use embedding::{
    avg_embedding_similarity, cosine, embedding_scores, greedy_matching, vector_extrema_similarity,
    EmbeddingScores, MAX_SKIPPED_FRACTION,
};
pub use success::{inform_request, GeneratedDialogue, SuccessScores, EVALUATOR_CONVENTIONS, INFORM_DOMAINS};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    NoPairs,
    #[error("{skipped} of {total} pairs have no in-table tokens on one side")]
    TooManySkipped { skipped: usize, total: usize },
    #[error("empty reference for {dialogue_id} turn {turn_index}")]
    EmptyReference { dialogue_id: String, turn_index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub dialogue_id: String,
    pub turn_index: usize,
}

impl EvalPair {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.reference.is_empty() {
            return Err(MetricsError::EmptyReference {
                dialogue_id: self.dialogue_id.clone(),
                turn_index: self.turn_index,
            });
        }
        Ok(())
    }
}

/// Published reference numbers for the full-size corpus, printed next to
/// measured values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTargets {
    pub bleu: f64,
    pub avg_embedding: f64,
    pub vector_extrema: f64,
    pub greedy_matching: f64,
    pub inform: f64,
    pub request: f64,
}

pub const HRED_TARGETS: ReferenceTargets = ReferenceTargets {
    bleu: 23.6,
    avg_embedding: 0.93,
    vector_extrema: 0.59,
    greedy_matching: 23.1,
    inform: 60.4,
    request: 44.5,
};

pub const EXEMPLAR_TARGETS: ReferenceTargets = ReferenceTargets {
    bleu: 24.1,
    avg_embedding: 0.95,
    vector_extrema: 0.65,
    greedy_matching: 23.9,
    inform: 77.6,
    request: 70.1,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub config_fingerprint: String,
    pub arch: String,
    pub split: String,
    pub pair_count: usize,
    /// Corpus BLEU in [0, 1].
    pub bleu: f64,
    pub avg_embedding: f64,
    pub vector_extrema: f64,
    /// Greedy matching in [-1, 1].
    pub greedy_matching: f64,
    pub inform: f64,
    pub request: f64,
    pub skipped_pairs: usize,
    pub inform_dialogues: usize,
    pub requested_slots: usize,
    pub excluded_dialogues: usize,
    pub embedding_file: String,
    pub evaluator_conventions: String,
}

/// Table rows in display units: BLEU and greedy matching scaled by 100,
/// the cosines as is, inform/request as percentages.
pub fn display_rows(r: &EvalReport) -> [(&'static str, String); 6] {
    [
        ("BLEU", format!("{:.1}", r.bleu * 100.0)),
        ("Average", format!("{:.2}", r.avg_embedding)),
        ("Extrema", format!("{:.2}", r.vector_extrema)),
        ("Greedy", format!("{:.1}", r.greedy_matching * 100.0)),
        ("Inform", format!("{:.1}", r.inform)),
        ("Request", format!("{:.1}", r.request)),
    ]
}

pub fn target_rows(t: &ReferenceTargets) -> [String; 6] {
    [
        format!("{:.1}", t.bleu),
        format!("{:.2}", t.avg_embedding),
        format!("{:.2}", t.vector_extrema),
        format!("{:.1}", t.greedy_matching),
        format!("{:.1}", t.inform),
        format!("{:.1}", t.request),
    ]
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = format!("{} on {} ({} pairs)\n", self.arch, self.split, self.pair_count);
        for (name, value) in display_rows(self) {
            out.push_str(&format!("  {name:<8} {value:>7}\n"));
        }
        out
    }

    pub fn in_range(&self) -> bool {
        (0.0..=1.0).contains(&self.bleu)
            && [self.avg_embedding, self.vector_extrema, self.greedy_matching]
                .iter()
                .all(|v| (-1.0..=1.0).contains(v))
            && (0.0..=100.0).contains(&self.inform)
            && (0.0..=100.0).contains(&self.request)
    }
}
