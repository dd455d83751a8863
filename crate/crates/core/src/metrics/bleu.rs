use std::collections::HashMap;

use super::MetricsError;

/// Corpus-level n-gram statistics. `matches[n-1]` holds clipped n-gram
/// matches and `totals[n-1]` the number of hypothesis n-grams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    pub max_n: usize,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub pairs: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        BleuStats {
            max_n,
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
            pairs: 0,
        }
    }

    pub fn add<S: AsRef<str>, T: AsRef<str>>(&mut self, reference: &[S], hypothesis: &[T]) {
        self.pairs += 1;
        self.hyp_len += hypothesis.len();
        self.ref_len += reference.len();
        for n in 1..=self.max_n {
            let hyp = ngram_counts(hypothesis, n);
            let rf = ngram_counts(reference, n);
            for (gram, &c) in &hyp {
                self.matches[n - 1] += c.min(rf.get(gram).copied().unwrap_or(0));
            }
            self.totals[n - 1] += hypothesis.len().saturating_sub(n - 1);
        }
    }

    /// Smoothed modified precision for order `n` (1-based).
    pub fn precision(&self, n: usize) -> f64 {
        let (m, t) = (self.matches[n - 1], self.totals[n - 1]);
        if n >= 2 && m == 0 {
            1.0 / (t as f64 + 1.0)
        } else if t == 0 {
            0.0
        } else {
            m as f64 / t as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let log_sum: f64 = (1..=self.max_n).map(|n| self.precision(n).ln()).sum();
        self.brevity_penalty() * (log_sum / self.max_n as f64).exp()
    }
}

/// Corpus BLEU over `(reference, hypothesis)` pairs.
pub fn corpus_bleu<R, H, S, T>(pairs: &[(R, H)], max_n: usize) -> Result<f64, MetricsError>
where
    R: AsRef<[S]>,
    H: AsRef<[T]>,
    S: AsRef<str>,
    T: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let mut stats = BleuStats::new(max_n);
    for (r, h) in pairs {
        stats.add(r.as_ref(), h.as_ref());
    }
    Ok(stats.score())
}

/// BLEU of a single pair, used for weak labels.
pub fn sentence_bleu<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hypothesis: &[T], max_n: usize) -> f64 {
    let mut stats = BleuStats::new(max_n);
    stats.add(reference, hypothesis);
    stats.score()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn short_hypothesis_case() {
        let b = corpus_bleu(&[(toks("a b c d e"), toks("a b c d"))], 4).unwrap();
        assert!((b - (-0.25f64).exp()).abs() < 1e-12);
        assert!((b - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn identity_is_one() {
        let pairs = vec![(toks("the train leaves at 9"), toks("the train leaves at 9")), (toks("ok"), toks("ok"))];
        assert_eq!(corpus_bleu(&pairs, 4).unwrap(), 1.0);
    }

    #[test]
    fn clipping_limits_repeats() {
        let mut s = BleuStats::new(1);
        s.add(&toks("the cat"), &toks("the the the"));
        assert_eq!((s.matches[0], s.totals[0]), (1, 3));
    }

    #[test]
    fn degenerate_inputs() {
        let empty: Vec<(Vec<String>, Vec<String>)> = vec![];
        assert_eq!(corpus_bleu(&empty, 4), Err(MetricsError::NoPairs));
        assert_eq!(corpus_bleu(&[(toks("a b"), Vec::<String>::new())], 4).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&[(toks("a b"), toks("c d"))], 4).unwrap(), 0.0);
    }

    #[test]
    fn smoothing_applies_above_unigrams() {
        // unigram matches but no bigram: p2 = 1 / (1 + 1)
        let mut s = BleuStats::new(2);
        s.add(&toks("a b"), &toks("b a"));
        assert_eq!(s.precision(1), 1.0);
        assert_eq!(s.precision(2), 0.5);
        assert!((s.score() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in prop::collection::vec(
            (prop::collection::vec(0u8..5, 1..8), prop::collection::vec(0u8..5, 0..8)), 1..6)
        ) {
            let as_str = |v: &Vec<u8>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
            let fwd: Vec<_> = pairs.iter().map(|(r, h)| (as_str(r), as_str(h))).collect();
            let mut rev = fwd.clone();
            rev.reverse();
            let a = corpus_bleu(&fwd, 4).unwrap();
            prop_assert_eq!(a, corpus_bleu(&rev, 4).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
