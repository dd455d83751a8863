//! Tokenization, vocabulary construction, id encoding and word-vector tables.
//!
//! The tokenizer lowercases, isolates punctuation and keeps hyphenated
//! placeholders such as `hotel-reference` (and times such as `15:08`) as
//! single tokens. Vocabularies reserve ids 0..3 for the special symbols.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 4] = [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

pub const DEFAULT_MIN_COUNT: usize = 3;
pub const DEFAULT_MAX_SIZE: usize = 20_000;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("failed to read embedding file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file {path}, line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("embedding file {path} contains no vectors")]
    NoVectors { path: String },
}

/// Characters that glue two alphanumeric runs into a single token
/// (`hotel-reference`, `15:08`, `3.50`, `12/05`).
fn is_connector(c: char) -> bool {
    matches!(c, '-' | ':' | '.' | '/' | '_')
}

/// Splits text into lowercase tokens with punctuation isolated.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.to_lowercase().chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_alphanumeric() {
                let start = i;
                i += 1;
                while i < chars.len() {
                    if chars[i].is_alphanumeric() {
                        i += 1;
                    } else if is_connector(chars[i])
                        && i + 1 < chars.len()
                        && chars[i + 1].is_alphanumeric()
                    {
                        i += 2;
                    } else {
                        break;
                    }
                }
                tokens.push(chars[start..i].iter().collect());
            } else if c == '\'' && i + 1 < chars.len() && chars[i + 1].is_alphabetic() {
                // clitic: `andrew's` -> `andrew`, `'s`
                let start = i;
                i += 1;
                while i < chars.len() && chars[i].is_alphabetic() {
                    i += 1;
                }
                tokens.push(chars[start..i].iter().collect());
            } else {
                tokens.push(c.to_string());
                i += 1;
            }
        }
    }
    tokens
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token to id mapping with the four reserved symbols at ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    pub min_count: usize,
    pub max_size: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from token streams. Tokens with frequency at least
    /// `min_count` are kept, most frequent first, ties broken
    /// lexicographically, up to `max_size` non-reserved entries.
    pub fn build<'a, I, S>(utterances: I, min_count: usize, max_size: usize) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut total = 0usize;
        for utt in utterances {
            for tok in utt {
                *counts.entry(tok.as_ref()).or_default() += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(TextError::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        kept.truncate(max_size);
        Ok(Self::from_tokens_with(
            kept.into_iter().map(|(t, _)| t.to_string()),
            min_count,
            max_size,
        ))
    }

    /// Vocabulary over exactly the given tokens (in order, duplicates dropped).
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        Self::from_tokens_with(tokens, 1, usize::MAX)
    }

    fn from_tokens_with<I: IntoIterator<Item = String>>(tokens: I, min_count: usize, max_size: usize) -> Self {
        let mut list: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = list
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), list.len() as u32);
                list.push(t);
            }
        }
        Vocabulary {
            tokens: list,
            index,
            min_count,
            max_size,
        }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes tokens to ids and appends EOS.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        let mut ids: Vec<u32> = tokens.iter().map(|t| self.id(t.as_ref())).collect();
        ids.push(EOS);
        ids
    }

    /// Decodes ids up to (not including) the first EOS.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>, TextError> {
        let mut out = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            let tok = self.token(id).ok_or(TextError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            out.push(tok.to_string());
        }
        Ok(out)
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        crate::io::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v: Vocabulary = serde_json::from_str(&text).map_err(std::io::Error::other)?;
        v.reindex();
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingSource {
    Learned,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingLoadReport {
    pub path: String,
    pub dim: usize,
    pub file_entries: usize,
    pub matched: usize,
    /// Non-reserved vocabulary tokens absent from the file.
    pub missing: Vec<String>,
    pub coverage: f64,
}

/// Dense word-vector table aligned with a vocabulary. Rows for tokens that
/// were absent from the source file hold the mean of the file's vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub source: EmbeddingSource,
    vocab: Vocabulary,
    rows: Vec<f64>,
    found: Vec<bool>,
    mean: Vec<f64>,
}

impl EmbeddingTable {
    /// Table from explicit vectors; tokens map to rows in iteration order.
    pub fn from_vectors(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Self {
        let vocab = Vocabulary::from_tokens(entries.iter().map(|(t, _)| t.clone()));
        let lookup: HashMap<String, Vec<f64>> = entries.into_iter().collect();
        Self::assemble(dim, vocab, &lookup)
    }

    fn assemble(dim: usize, vocab: Vocabulary, lookup: &HashMap<String, Vec<f64>>) -> Self {
        let mut mean = vec![0.0; dim];
        if !lookup.is_empty() {
            // sorted keys so the mean does not depend on hash order
            let mut keys: Vec<&String> = lookup.keys().collect();
            keys.sort();
            for k in keys {
                for (m, v) in mean.iter_mut().zip(&lookup[k]) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= lookup.len() as f64;
            }
        }
        let mut rows = Vec::with_capacity(vocab.len() * dim);
        let mut found = Vec::with_capacity(vocab.len());
        for tok in vocab.tokens() {
            match lookup.get(tok) {
                Some(v) => {
                    rows.extend_from_slice(v);
                    found.push(true);
                }
                None => {
                    rows.extend_from_slice(&mean);
                    found.push(false);
                }
            }
        }
        EmbeddingTable {
            dim,
            source: EmbeddingSource::Pretrained,
            vocab,
            rows,
            found,
            mean,
        }
    }

    /// Loads `token v1 .. vd` lines (optional `count dim` header) for the
    /// tokens of `vocab`.
    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<(Self, EmbeddingLoadReport), TextError> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: shown.clone(),
            source,
        })?;
        let mut dim: Option<usize> = None;
        let mut lookup: HashMap<String, Vec<f64>> = HashMap::new();
        let mut file_entries = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if lineno == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                continue;
            }
            let values: Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.parse::<f64>()).collect();
            let values = values.map_err(|e| TextError::Format {
                path: shown.clone(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(TextError::Format {
                        path: shown.clone(),
                        line: lineno + 1,
                        message: format!("expected {d} values, found {}", values.len()),
                    })
                }
                _ => {}
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TextError::Format {
                    path: shown.clone(),
                    line: lineno + 1,
                    message: "non-finite value".into(),
                });
            }
            file_entries += 1;
            if vocab.contains(fields[0]) {
                lookup.insert(fields[0].to_string(), values);
            }
        }
        let dim = match dim {
            Some(d) if d > 0 => d,
            _ => return Err(TextError::NoVectors { path: shown }),
        };
        let table = Self::assemble(dim, vocab.clone(), &lookup);
        let missing: Vec<String> = vocab
            .tokens()
            .iter()
            .skip(RESERVED.len())
            .filter(|t| !lookup.contains_key(*t))
            .cloned()
            .collect();
        let non_reserved = vocab.len().saturating_sub(RESERVED.len());
        let matched = non_reserved - missing.len();
        let coverage = if non_reserved == 0 {
            0.0
        } else {
            matched as f64 / non_reserved as f64
        };
        debug_assert!(table.rows.iter().all(|v| v.is_finite()));
        Ok((
            table,
            EmbeddingLoadReport {
                path: shown,
                dim,
                file_entries,
                matched,
                missing,
                coverage,
            },
        ))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let start = id as usize * self.dim;
        &self.rows[start..start + self.dim]
    }

    /// Vector for a token and whether it came from the source file.
    pub fn lookup(&self, token: &str) -> (&[f64], bool) {
        match self.vocab.index.get(token) {
            Some(&id) => (self.row(id), self.found[id as usize]),
            None => (&self.mean, false),
        }
    }

    pub fn mean_vector(&self) -> &[f64] {
        &self.mean
    }
}
