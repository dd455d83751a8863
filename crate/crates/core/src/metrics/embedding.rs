use rayon::prelude::*;

use super::MetricsError;
use crate::text::EmbeddingTable;

/// Largest share of pairs that may be skipped for lack of in-table tokens.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

/// `a.b / sqrt(|a|^2 |b|^2)`, clamped to [-1, 1]; 0 when either side is the
/// zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Word vectors for a sentence, or `None` when no token is in the table.
/// Out-of-table tokens take the table's mean vector.
fn vectors<'t, S: AsRef<str>>(table: &'t EmbeddingTable, tokens: &[S]) -> Option<Vec<&'t [f64]>> {
    let mut any = false;
    let rows = tokens
        .iter()
        .map(|t| {
            let (v, found) = table.lookup(t.as_ref());
            any |= found;
            v
        })
        .collect();
    any.then_some(rows)
}

fn mean(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for r in rows {
        for (o, v) in out.iter_mut().zip(*r) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= rows.len() as f64;
    }
    out
}

fn extrema(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; dim];
    for r in rows {
        for (o, &v) in out.iter_mut().zip(*r) {
            if v.abs() > o.abs() {
                *o = v;
            }
        }
    }
    out
}

fn one_way_greedy(from: &[&[f64]], to: &[&[f64]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| to.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / from.len() as f64
}

pub fn avg_embedding_similarity<S: AsRef<str>, T: AsRef<str>>(table: &EmbeddingTable, reference: &[S], hypothesis: &[T]) -> Option<f64> {
    let (r, h) = (vectors(table, reference)?, vectors(table, hypothesis)?);
    Some(cosine(&mean(&r, table.dim), &mean(&h, table.dim)))
}

pub fn vector_extrema_similarity<S: AsRef<str>, T: AsRef<str>>(table: &EmbeddingTable, reference: &[S], hypothesis: &[T]) -> Option<f64> {
    let (r, h) = (vectors(table, reference)?, vectors(table, hypothesis)?);
    Some(cosine(&extrema(&r, table.dim), &extrema(&h, table.dim)))
}

/// `(g(s, s^) + g(s^, s)) / 2` where `g` averages, over the tokens of its
/// first argument, the best cosine against the tokens of the second.
pub fn greedy_matching<S: AsRef<str>, T: AsRef<str>>(table: &EmbeddingTable, reference: &[S], hypothesis: &[T]) -> Option<f64> {
    let (r, h) = (vectors(table, reference)?, vectors(table, hypothesis)?);
    Some((one_way_greedy(&r, &h) + one_way_greedy(&h, &r)) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingScores {
    pub avg_embedding: f64,
    pub vector_extrema: f64,
    pub greedy_matching: f64,
    pub scored: usize,
    pub skipped: usize,
}

/// Means of the three embedding metrics over all scorable pairs. Fails
/// when more than [`MAX_SKIPPED_FRACTION`] of the pairs were skipped.
pub fn embedding_scores<R, H>(table: &EmbeddingTable, pairs: &[(R, H)]) -> Result<EmbeddingScores, MetricsError>
where
    R: AsRef<[String]> + Sync,
    H: AsRef<[String]> + Sync,
{
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let per_pair: Vec<Option<(f64, f64, f64)>> = pairs
        .par_iter()
        .map(|(r, h)| {
            let (r, h) = (r.as_ref(), h.as_ref());
            Some((
                avg_embedding_similarity(table, r, h)?,
                vector_extrema_similarity(table, r, h)?,
                greedy_matching(table, r, h)?,
            ))
        })
        .collect();
    let mut sums = (0.0, 0.0, 0.0);
    let mut scored = 0;
    for (a, e, g) in per_pair.iter().flatten() {
        sums.0 += a;
        sums.1 += e;
        sums.2 += g;
        scored += 1;
    }
    let skipped = pairs.len() - scored;
    if skipped as f64 > MAX_SKIPPED_FRACTION * pairs.len() as f64 {
        return Err(MetricsError::TooManySkipped {
            skipped,
            total: pairs.len(),
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} of {} pairs skipped: no in-table tokens", pairs.len());
    }
    let n = scored.max(1) as f64;
    Ok(EmbeddingScores {
        avg_embedding: sums.0 / n,
        vector_extrema: sums.1 / n,
        greedy_matching: sums.2 / n,
        scored,
        skipped,
    })
}
