use std::collections::HashMap;

use regex::{Regex, RegexBuilder};

use super::{CorpusError, Ontology, Utterance};
use crate::text::tokenize;

/// Slot families that are replaced by `<domain>-<slot>` placeholders.
pub const DELEX_SLOTS: [&str; 3] = ["phone", "reference", "trainid"];

/// Replaces phone numbers, booking references and train ids with their
/// `domain-slot` placeholder. Values come from the ontology, are matched
/// case-insensitively, longest first, and only on token boundaries.
#[derive(Debug, Clone)]
pub struct Delexicalizer {
    pattern: Option<Regex>,
    placeholders: HashMap<String, String>,
}

fn is_glue(c: char) -> bool {
    matches!(c, '-' | ':' | '.' | '/' | '_')
}

impl Delexicalizer {
    pub fn new(ontology: &Ontology) -> Result<Self, CorpusError> {
        let mut placeholders: HashMap<String, String> = HashMap::new();
        for (key, values) in &ontology.slots {
            let Some((domain, slot)) = key.split_once('-') else {
                continue;
            };
            if !DELEX_SLOTS.contains(&slot) {
                continue;
            }
            let placeholder = format!("{domain}-{slot}");
            for v in values {
                let v = v.trim().to_lowercase();
                if v.is_empty() {
                    continue;
                }
                // first slot in key order wins for values listed twice
                placeholders.entry(v).or_insert_with(|| placeholder.clone());
            }
        }
        let mut values: Vec<&String> = placeholders.keys().collect();
        values.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then_with(|| a.cmp(b)));
        let pattern = if values.is_empty() {
            None
        } else {
            let alternation = values
                .iter()
                .map(|v| regex::escape(v))
                .collect::<Vec<_>>()
                .join("|");
            Some(
                RegexBuilder::new(&alternation)
                    .case_insensitive(true)
                    .size_limit(1 << 28)
                    .dfa_size_limit(1 << 28)
                    .build()
                    .map_err(|e| CorpusError::Ontology(format!("cannot compile value pattern: {e}")))?,
            )
        };
        Ok(Delexicalizer {
            pattern,
            placeholders,
        })
    }

    /// Number of distinct surface values that will be replaced.
    pub fn value_count(&self) -> usize {
        self.placeholders.len()
    }

    /// A match is accepted only where the tokenizer would not glue it to a
    /// neighbouring alphanumeric run.
    fn on_boundary(text: &str, start: usize, end: usize) -> bool {
        let mut before = text[..start].chars().rev();
        let left_ok = match before.next() {
            None => true,
            Some(c) if c.is_alphanumeric() => false,
            Some(c) if is_glue(c) => !before.next().is_some_and(|p| p.is_alphanumeric()),
            Some(_) => true,
        };
        let mut after = text[end..].chars();
        let right_ok = match after.next() {
            None => true,
            Some(c) if c.is_alphanumeric() => false,
            Some(c) if is_glue(c) => !after.next().is_some_and(|n| n.is_alphanumeric()),
            Some(_) => true,
        };
        left_ok && right_ok
    }

    pub fn delexicalize_text(&self, text: &str) -> String {
        let Some(re) = &self.pattern else {
            return text.to_string();
        };
        let mut out = String::with_capacity(text.len());
        let mut copied = 0;
        let mut pos = 0;
        while pos <= text.len() {
            let Some(m) = re.find_at(text, pos) else { break };
            if Self::on_boundary(text, m.start(), m.end()) {
                let key = m.as_str().to_lowercase();
                if let Some(ph) = self.placeholders.get(&key) {
                    out.push_str(&text[copied..m.start()]);
                    out.push_str(ph);
                    copied = m.end();
                    pos = m.end();
                    continue;
                }
            }
            // retry one character further along
            pos = m.start() + text[m.start()..].chars().next().map_or(1, char::len_utf8);
        }
        out.push_str(&text[copied..]);
        out
    }

    /// Delexicalizes the utterance text and re-tokenizes it.
    pub fn apply(&self, u: &Utterance) -> Utterance {
        let raw_text = self.delexicalize_text(&u.raw_text);
        Utterance {
            speaker: u.speaker,
            tokens: tokenize(&raw_text),
            raw_text,
        }
    }
}
