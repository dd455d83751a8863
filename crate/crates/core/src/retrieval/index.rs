use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sparse::SparseVector;
use super::RetrievalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Exact,
    Approximate,
}

impl std::str::FromStr for SearchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(SearchMode::Exact),
            "approximate" => Ok(SearchMode::Approximate),
            other => Err(format!("unknown search mode `{other}`")),
        }
    }
}

/// Random-hyperplane LSH parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LshConfig {
    pub tables: usize,
    pub bits: usize,
    /// Buckets within this Hamming distance of the query signature are
    /// also probed.
    pub probe_radius: usize,
    pub seed: u64,
}

impl Default for LshConfig {
    fn default() -> Self {
        LshConfig {
            tables: 16,
            bits: 12,
            probe_radius: 1,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn distance_from_dot(dot: f64, a: &SparseVector, b: &SparseVector) -> f64 {
    if a.is_zero() || b.is_zero() {
        return 1.0;
    }
    1.0 - (dot / (a.norm * b.norm)).clamp(-1.0, 1.0)
}

/// Ascending distance, ties broken by record index.
fn top_k(mut hits: Vec<Neighbor>, k: usize) -> Vec<Neighbor> {
    let cmp = |a: &Neighbor, b: &Neighbor| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index));
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, cmp);
        hits.truncate(k);
    }
    hits.sort_by(cmp);
    hits
}

/// Cosine-distance index over sparse vectors. Every record belongs to a
/// group (a dialogue) so queries can exclude their own group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorIndex {
    pub dim: usize,
    pub lsh: LshConfig,
    pub vectors: Vec<SparseVector>,
    pub groups: Vec<u32>,
    /// `tables` signatures per record.
    pub signatures: Vec<Vec<u32>>,
    #[serde(skip)]
    hyperplanes: Vec<f64>,
    #[serde(skip)]
    buckets: Vec<HashMap<u32, Vec<u32>>>,
    #[serde(skip)]
    postings: Vec<Vec<(u32, f64)>>,
}

impl PartialEq for VectorIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.lsh == other.lsh
            && self.vectors == other.vectors
            && self.groups == other.groups
            && self.signatures == other.signatures
    }
}

impl VectorIndex {
    pub fn build(dim: usize, vectors: Vec<SparseVector>, groups: Vec<u32>, lsh: LshConfig) -> Result<Self, RetrievalError> {
        if vectors.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if groups.len() != vectors.len() {
            return Err(RetrievalError::Corrupt(format!(
                "{} groups for {} vectors",
                groups.len(),
                vectors.len()
            )));
        }
        if lsh.bits == 0 || lsh.bits > 32 || lsh.tables == 0 {
            return Err(RetrievalError::Config(format!(
                "LSH needs 1..=32 bits and at least one table, got {} bits x {} tables",
                lsh.bits, lsh.tables
            )));
        }
        if let Some(bad) = vectors.iter().flat_map(|v| &v.entries).find(|e| e.0 as usize >= dim) {
            return Err(RetrievalError::Corrupt(format!("dimension {} outside {dim}", bad.0)));
        }
        let mut index = VectorIndex {
            dim,
            lsh,
            vectors,
            groups,
            signatures: Vec::new(),
            hyperplanes: Vec::new(),
            buckets: Vec::new(),
            postings: Vec::new(),
        };
        index.hyperplanes = index.generate_hyperplanes();
        index.signatures = index.vectors.iter().map(|v| index.signature(v)).collect();
        index.fill_lookup_tables();
        Ok(index)
    }

    /// Restores the derived tables after deserialization and checks the
    /// stored signatures against the regenerated hyperplanes.
    pub fn rebuild(&mut self) -> Result<(), RetrievalError> {
        let fresh = VectorIndex::build(self.dim, std::mem::take(&mut self.vectors), self.groups.clone(), self.lsh)?;
        if fresh.signatures != self.signatures {
            return Err(RetrievalError::Corrupt(
                "stored signatures do not match the hyperplanes regenerated from the seed".into(),
            ));
        }
        *self = fresh;
        Ok(())
    }

    fn generate_hyperplanes(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.lsh.seed);
        let count = self.lsh.tables * self.lsh.bits * self.dim;
        (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn signature(&self, v: &SparseVector) -> Vec<u32> {
        let (b, dim) = (self.lsh.bits, self.dim);
        (0..self.lsh.tables)
            .map(|t| {
                let mut sig = 0u32;
                for j in 0..b {
                    let plane = &self.hyperplanes[(t * b + j) * dim..(t * b + j + 1) * dim];
                    let dot: f64 = v
                        .entries
                        .iter()
                        .filter(|e| (e.0 as usize) < dim)
                        .map(|&(i, w)| plane[i as usize] * w)
                        .sum();
                    if dot >= 0.0 {
                        sig |= 1 << j;
                    }
                }
                sig
            })
            .collect()
    }

    fn fill_lookup_tables(&mut self) {
        self.buckets = vec![HashMap::new(); self.lsh.tables];
        for (r, sigs) in self.signatures.iter().enumerate() {
            for (t, &s) in sigs.iter().enumerate() {
                self.buckets[t].entry(s).or_default().push(r as u32);
            }
        }
        self.postings = vec![Vec::new(); self.dim];
        for (r, v) in self.vectors.iter().enumerate() {
            for &(i, w) in &v.entries {
                self.postings[i as usize].push((r as u32, w));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn query(&self, q: &SparseVector, k: usize, mode: SearchMode, exclude_group: Option<u32>) -> Vec<Neighbor> {
        match mode {
            SearchMode::Exact => self.query_exact(q, k, exclude_group),
            SearchMode::Approximate => self.query_approximate(q, k, exclude_group),
        }
    }

    /// The true k nearest records, accumulating dot products through the
    /// inverted lists.
    pub fn query_exact(&self, q: &SparseVector, k: usize, exclude_group: Option<u32>) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut acc = vec![0.0f64; self.len()];
        for &(i, w) in &q.entries {
            if let Some(list) = self.postings.get(i as usize) {
                for &(r, v) in list {
                    acc[r as usize] += w * v;
                }
            }
        }
        let hits = acc
            .iter()
            .enumerate()
            .filter(|(r, _)| exclude_group != Some(self.groups[*r]))
            .map(|(r, &dot)| Neighbor {
                index: r,
                distance: distance_from_dot(dot, q, &self.vectors[r]),
            })
            .collect();
        top_k(hits, k)
    }

    /// Multi-probe LSH: records sharing a bucket (within the probe radius)
    /// with the query in any table, re-ranked by true distance.
    pub fn query_approximate(&self, q: &SparseVector, k: usize, exclude_group: Option<u32>) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let masks = probe_masks(self.lsh.bits, self.lsh.probe_radius);
        let mut candidates: Vec<u32> = Vec::new();
        for (t, &sig) in self.signature(q).iter().enumerate() {
            for &m in &masks {
                if let Some(list) = self.buckets[t].get(&(sig ^ m)) {
                    candidates.extend_from_slice(list);
                }
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        let hits = candidates
            .into_iter()
            .map(|r| r as usize)
            .filter(|&r| exclude_group != Some(self.groups[r]))
            .map(|r| Neighbor {
                index: r,
                distance: distance_from_dot(q.dot(&self.vectors[r]), q, &self.vectors[r]),
            })
            .collect();
        top_k(hits, k)
    }
}

/// XOR masks of Hamming weight at most `radius` over `bits` bits.
fn probe_masks(bits: usize, radius: usize) -> Vec<u32> {
    fn extend(bits: usize, start: usize, left: usize, mask: u32, out: &mut Vec<u32>) {
        out.push(mask);
        if left == 0 {
            return;
        }
        for j in start..bits {
            extend(bits, j + 1, left - 1, mask | (1 << j), out);
        }
    }
    let mut out = Vec::new();
    extend(bits, 0, radius, 0, &mut out);
    out
}
