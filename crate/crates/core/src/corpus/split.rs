use std::collections::{HashMap, HashSet};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Dialogue};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dev: Vec<String>,
    pub test: Vec<String>,
    /// Optional explicit training list; when absent every remaining
    /// dialogue is used for training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<Vec<String>>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { dev: 1000, test: 1000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl CorpusSplit {
    pub fn manifest(&self) -> SplitManifest {
        let ids = |ds: &[Dialogue]| ds.iter().map(|d| d.dialogue_id.clone()).collect();
        SplitManifest {
            dev: ids(&self.dev),
            test: ids(&self.test),
            train: Some(ids(&self.train)),
        }
    }
}

/// Partitions dialogues into train/dev/test, either from a manifest or by a
/// seeded shuffle. Each split keeps the corpus order.
pub fn split_corpus(
    dialogues: Vec<Dialogue>,
    manifest: Option<&SplitManifest>,
    sizes: SplitSizes,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Part {
        Train,
        Dev,
        Test,
        Unused,
    }
    let mut part = vec![Part::Train; dialogues.len()];
    match manifest {
        Some(m) => {
            let index: HashMap<&str, usize> = dialogues
                .iter()
                .enumerate()
                .map(|(i, d)| (d.dialogue_id.as_str(), i))
                .collect();
            let mut assigned = HashSet::new();
            if m.train.is_some() {
                part.fill(Part::Unused);
            }
            let lists = [
                (Part::Dev, Some(&m.dev)),
                (Part::Test, Some(&m.test)),
                (Part::Train, m.train.as_ref()),
            ];
            for (p, list) in lists {
                for id in list.into_iter().flatten() {
                    let &i = index
                        .get(id.as_str())
                        .ok_or_else(|| CorpusError::UnknownManifestId(id.clone()))?;
                    if !assigned.insert(i) {
                        return Err(CorpusError::ManifestOverlap(id.clone()));
                    }
                    part[i] = p;
                }
            }
        }
        None => {
            let total = dialogues.len();
            if sizes.dev + sizes.test >= total {
                return Err(CorpusError::SplitTooLarge {
                    dev: sizes.dev,
                    test: sizes.test,
                    total,
                });
            }
            let mut order: Vec<usize> = (0..total).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            for &i in &order[..sizes.dev] {
                part[i] = Part::Dev;
            }
            for &i in &order[sizes.dev..sizes.dev + sizes.test] {
                part[i] = Part::Test;
            }
        }
    }
    let mut split = CorpusSplit::default();
    for (d, p) in dialogues.into_iter().zip(part) {
        match p {
            Part::Train => split.train.push(d),
            Part::Dev => split.dev.push(d),
            Part::Test => split.test.push(d),
            Part::Unused => {}
        }
    }
    info!(
        "split sizes: train={} dev={} test={}",
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Utterance};

    fn corpus(n: usize) -> Vec<Dialogue> {
        (0..n)
            .map(|i| Dialogue {
                dialogue_id: format!("d{i}"),
                turns: vec![
                    Utterance::new(Speaker::User, "hi"),
                    Utterance::new(Speaker::System, "hello"),
                ],
                goal: None,
            })
            .collect()
    }

    fn ids(ds: &[Dialogue]) -> Vec<String> {
        ds.iter().map(|d| d.dialogue_id.clone()).collect()
    }

    #[test]
    fn seeded_split_is_a_partition() {
        let s = split_corpus(corpus(12), None, SplitSizes { dev: 1, test: 1 }, 7).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (10, 1, 1));
        let mut all: Vec<String> = [ids(&s.train), ids(&s.dev), ids(&s.test)].concat();
        all.sort();
        let mut expected = ids(&corpus(12));
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn seeded_split_is_deterministic() {
        let a = split_corpus(corpus(30), None, SplitSizes { dev: 5, test: 5 }, 3).unwrap();
        let b = split_corpus(corpus(30), None, SplitSizes { dev: 5, test: 5 }, 3).unwrap();
        assert_eq!(a, b);
        let c = split_corpus(corpus(30), None, SplitSizes { dev: 5, test: 5 }, 4).unwrap();
        assert_ne!(ids(&a.dev), ids(&c.dev));
    }

    #[test]
    fn manifest_is_reproduced() {
        let m = SplitManifest {
            dev: vec!["d3".into(), "d1".into()],
            test: vec!["d0".into()],
            train: None,
        };
        let s = split_corpus(corpus(5), Some(&m), SplitSizes::default(), 0).unwrap();
        assert_eq!(ids(&s.dev), vec!["d1", "d3"]);
        assert_eq!(ids(&s.test), vec!["d0"]);
        assert_eq!(ids(&s.train), vec!["d2", "d4"]);
    }

    #[test]
    fn manifest_errors() {
        let unknown = SplitManifest {
            dev: vec!["nope".into()],
            test: vec![],
            train: None,
        };
        assert!(matches!(
            split_corpus(corpus(3), Some(&unknown), SplitSizes::default(), 0),
            Err(CorpusError::UnknownManifestId(_))
        ));
        let overlap = SplitManifest {
            dev: vec!["d0".into()],
            test: vec!["d0".into()],
            train: None,
        };
        assert!(matches!(
            split_corpus(corpus(3), Some(&overlap), SplitSizes::default(), 0),
            Err(CorpusError::ManifestOverlap(_))
        ));
    }

    #[test]
    fn oversized_split_rejected() {
        assert!(split_corpus(corpus(3), None, SplitSizes { dev: 2, test: 1 }, 0).is_err());
    }
}
