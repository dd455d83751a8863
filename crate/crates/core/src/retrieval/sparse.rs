use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// Document frequencies over the training user utterances, shared by the
/// TF-IDF vectors and the BM25 feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    /// Terms in lexicographic order; a term's position is its dimension.
    pub terms: Vec<String>,
    pub doc_freq: Vec<u32>,
    pub documents: usize,
    pub avg_doc_len: f64,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl IdfTable {
    pub fn fit<S: AsRef<str>>(docs: &[Vec<S>]) -> Self {
        let mut df: BTreeMap<&str, u32> = BTreeMap::new();
        let mut total_len = 0usize;
        for d in docs {
            total_len += d.len();
            let mut seen: Vec<&str> = d.iter().map(|t| t.as_ref()).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let (terms, doc_freq): (Vec<String>, Vec<u32>) = df.into_iter().map(|(t, c)| (t.to_string(), c)).unzip();
        let mut table = IdfTable {
            terms,
            doc_freq,
            documents: docs.len(),
            avg_doc_len: if docs.is_empty() { 0.0 } else { total_len as f64 / docs.len() as f64 },
            index: HashMap::new(),
        };
        table.reindex();
        table
    }

    pub fn reindex(&mut self) {
        self.index = self.terms.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn term_id(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }

    pub fn df(&self, term: &str) -> u32 {
        self.term_id(term).map_or(0, |i| self.doc_freq[i as usize])
    }

    /// `ln((N + 1) / (df + 1)) + 1`
    pub fn idf(&self, id: u32) -> f64 {
        let n = self.documents as f64;
        ((n + 1.0) / (self.doc_freq[id as usize] as f64 + 1.0)).ln() + 1.0
    }

    /// BM25 idf, `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn bm25_idf(&self, term: &str) -> f64 {
        let n = self.documents as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// Sparse vector with strictly increasing dimension indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub entries: Vec<(u32, f64)>,
    pub norm: f64,
}

impl SparseVector {
    /// Builds from unsorted entries, summing duplicates and dropping zeros.
    pub fn from_entries(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (i, w) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += w,
                _ => merged.push((i, w)),
            }
        }
        merged.retain(|e| e.1 != 0.0);
        let norm = merged.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        SparseVector { entries: merged, norm }
    }

    pub fn normalized(mut self) -> Self {
        if self.norm > 0.0 {
            for e in self.entries.iter_mut() {
                e.1 /= self.norm;
            }
            self.norm = self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        }
        self
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (a, b) = (&self.entries, &other.entries);
        let (mut i, mut j, mut s) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    s += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        s
    }

    /// Cosine similarity; zero vectors have similarity 0 with everything.
    pub fn cosine(&self, other: &SparseVector) -> f64 {
        if self.is_zero() || other.is_zero() {
            return 0.0;
        }
        (self.dot(other) / (self.norm * other.norm)).clamp(-1.0, 1.0)
    }

    /// Cosine distance `1 - cosine`.
    pub fn distance(&self, other: &SparseVector) -> f64 {
        1.0 - self.cosine(other)
    }
}

/// L2-normalized TF-IDF vector; terms outside the table are ignored, so an
/// utterance of unseen words maps to the zero vector.
pub fn vectorize<S: AsRef<str>>(tokens: &[S], idf: &IdfTable) -> SparseVector {
    let entries = tokens
        .iter()
        .filter_map(|t| idf.term_id(t.as_ref()))
        .map(|id| (id, idf.idf(id)))
        .collect();
    SparseVector::from_entries(entries).normalized()
}
