//! Dialogue corpus ingestion: loading, delexicalization, context windows and
//! train/dev/test splits.

mod delex;
mod split;

pub use delex::{Delexicalizer, DELEX_SLOTS};
pub use split::{split_corpus, CorpusSplit, SplitManifest, SplitSizes};

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::text::tokenize;

/// Token carried by the placeholder system turn that opens user-first dialogues.
pub const EMPTY_SYSTEM_TOKEN: &str = "<sys-empty>";

pub const DOMAINS: [&str; 7] = [
    "restaurant",
    "hotel",
    "train",
    "taxi",
    "attraction",
    "police",
    "hospital",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: JSON parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: record {index}{}: missing field `{field}`", id_suffix(.id))]
    MissingField {
        path: String,
        index: usize,
        id: Option<String>,
        field: String,
    },
    #[error("{path}: record {index}{}: {message}", id_suffix(.id))]
    Record {
        path: String,
        index: usize,
        id: Option<String>,
        message: String,
    },
    #[error("duplicate dialogue id `{0}`")]
    DuplicateId(String),
    #[error("split manifest lists unknown dialogue id `{0}`")]
    UnknownManifestId(String),
    #[error("split manifest assigns `{0}` to more than one split")]
    ManifestOverlap(String),
    #[error("requested dev+test sizes ({dev}+{test}) leave no training dialogues out of {total}")]
    SplitTooLarge { dev: usize, test: usize, total: usize },
    #[error("ontology: {0}")]
    Ontology(String),
    #[error("database: {0}")]
    Database(String),
}

fn id_suffix(id: &Option<String>) -> String {
    id.as_ref().map(|i| format!(" (`{i}`)")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "user" | "usr" => Some(Speaker::User),
            "system" | "sys" => Some(Speaker::System),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    #[serde(rename = "text")]
    pub raw_text: String,
    #[serde(default)]
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(speaker: Speaker, raw_text: impl Into<String>) -> Self {
        Utterance {
            speaker,
            raw_text: raw_text.into(),
            tokens: Vec::new(),
        }
    }

    pub fn tokenized(mut self) -> Self {
        self.tokens = tokenize(&self.raw_text);
        self
    }

    /// The system placeholder used as `s1` when a dialogue opens with the user.
    pub fn empty_system() -> Self {
        Utterance {
            speaker: Speaker::System,
            raw_text: String::new(),
            tokens: vec![EMPTY_SYSTEM_TOKEN.to_string()],
        }
    }

    pub fn is_empty_system(&self) -> bool {
        self.speaker == Speaker::System && self.tokens.len() == 1 && self.tokens[0] == EMPTY_SYSTEM_TOKEN
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    #[serde(default)]
    pub constraints: BTreeMap<String, String>,
    #[serde(default)]
    pub requested: Vec<String>,
}

/// Per-domain user goal: informable constraints and requested slots.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoalSpec {
    pub domains: BTreeMap<String, DomainGoal>,
}

impl GoalSpec {
    /// Every constraint and requested slot must exist in the ontology as
    /// `domain-slot`.
    pub fn validate(&self, ontology: &Ontology) -> Result<(), String> {
        for (domain, goal) in &self.domains {
            if !DOMAINS.contains(&domain.as_str()) {
                return Err(format!("unknown goal domain `{domain}`"));
            }
            for slot in goal.constraints.keys().chain(goal.requested.iter()) {
                let key = format!("{domain}-{slot}");
                if !ontology.slots.contains_key(&key) {
                    return Err(format!("goal slot `{key}` is not in the ontology"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<GoalSpec>,
}

/// Map from `domain-slot` to its surface values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ontology {
    pub slots: BTreeMap<String, Vec<String>>,
}

impl Ontology {
    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| CorpusError::Ontology(e.to_string()))?;
        let mut slots = BTreeMap::new();
        for (k, v) in raw {
            if v.is_empty() {
                return Err(CorpusError::Ontology(format!("slot `{k}` has no values")));
            }
            slots
                .entry(k.trim().to_lowercase())
                .or_insert_with(Vec::new)
                .extend(v);
        }
        Ok(Ontology { slots })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_json(&read(path)?)
    }

    pub fn values(&self, domain: &str, slot: &str) -> &[String] {
        self.slots
            .get(&format!("{domain}-{slot}"))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

pub type EntityRecord = BTreeMap<String, String>;

/// Per-domain entity records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Database {
    pub domains: BTreeMap<String, Vec<EntityRecord>>,
}

/// Fields that identify an entity, in lookup order.
pub const ENTITY_KEY_FIELDS: [&str; 4] = ["name", "trainid", "id", "department"];

impl Database {
    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let raw: BTreeMap<String, Vec<BTreeMap<String, Value>>> =
            serde_json::from_str(text).map_err(|e| CorpusError::Database(e.to_string()))?;
        let mut domains = BTreeMap::new();
        for (domain, records) in raw {
            let mut out = Vec::with_capacity(records.len());
            for (i, rec) in records.into_iter().enumerate() {
                let rec: EntityRecord = rec
                    .into_iter()
                    .filter_map(|(k, v)| {
                        let v = match v {
                            Value::String(s) => s,
                            Value::Number(n) => n.to_string(),
                            Value::Bool(b) => b.to_string(),
                            _ => return None,
                        };
                        Some((k.to_lowercase(), v))
                    })
                    .collect();
                if entity_key(&rec).is_none() {
                    return Err(CorpusError::Database(format!(
                        "{domain} record {i} has none of the identifying fields {ENTITY_KEY_FIELDS:?}"
                    )));
                }
                out.push(rec);
            }
            domains.insert(domain.to_lowercase(), out);
        }
        Ok(Database { domains })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_json(&read(path)?)
    }

    pub fn records(&self, domain: &str) -> &[EntityRecord] {
        self.domains.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn entity_key(rec: &EntityRecord) -> Option<&str> {
    ENTITY_KEY_FIELDS
        .iter()
        .find_map(|f| rec.get(*f).map(String::as_str))
}

/// A `<s1, u, s2>` window; `turn_index` is the position of `s2` in the
/// normalized dialogue, so `u` sits at `turn_index - 1` and `s1` at
/// `turn_index - 2` (or is the empty-system placeholder when that is -1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTriple {
    pub s1: Utterance,
    pub u: Utterance,
    pub s2: Utterance,
    pub dialogue_id: String,
    pub turn_index: usize,
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a JSON dialogue file (see README for the schema).
pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>, CorpusError> {
    parse_dialogues(&read(path)?, &path.display().to_string())
}

pub fn parse_dialogues(text: &str, origin: &str) -> Result<Vec<Dialogue>, CorpusError> {
    let root: Value = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let records = root.as_array().ok_or_else(|| CorpusError::Parse {
        path: origin.to_string(),
        line: 1,
        column: 1,
        message: "expected a top-level JSON array of dialogues".into(),
    })?;

    let mut seen = HashSet::new();
    let mut dialogues = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        let missing = |id: Option<String>, field: &str| CorpusError::MissingField {
            path: origin.to_string(),
            index,
            id,
            field: field.to_string(),
        };
        let bad = |id: Option<String>, message: String| CorpusError::Record {
            path: origin.to_string(),
            index,
            id,
            message,
        };
        let obj = rec
            .as_object()
            .ok_or_else(|| bad(None, "dialogue record is not an object".into()))?;
        let id = match obj.get("dialogue_id") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(bad(None, "`dialogue_id` must be a string".into())),
            None => return Err(missing(None, "dialogue_id")),
        };
        let some_id = || Some(id.clone());
        let turns_raw = match obj.get("turns") {
            Some(Value::Array(a)) => a,
            Some(_) => return Err(bad(some_id(), "`turns` must be an array".into())),
            None => return Err(missing(some_id(), "turns")),
        };
        let mut turns: Vec<Utterance> = Vec::with_capacity(turns_raw.len());
        for (ti, t) in turns_raw.iter().enumerate() {
            let speaker = match t.get("speaker") {
                Some(Value::String(s)) => Speaker::parse(s)
                    .ok_or_else(|| bad(some_id(), format!("turn {ti}: unknown speaker `{s}`")))?,
                Some(_) => return Err(bad(some_id(), format!("turn {ti}: `speaker` must be a string"))),
                None => return Err(missing(some_id(), &format!("turns[{ti}].speaker"))),
            };
            let text = match t.get("text") {
                Some(Value::String(s)) => s.trim().to_string(),
                Some(_) => return Err(bad(some_id(), format!("turn {ti}: `text` must be a string"))),
                None => return Err(missing(some_id(), &format!("turns[{ti}].text"))),
            };
            if text.is_empty() {
                return Err(bad(some_id(), format!("turn {ti}: empty text")));
            }
            // consecutive same-speaker turns are merged
            match turns.last_mut() {
                Some(prev) if prev.speaker == speaker => {
                    prev.raw_text.push(' ');
                    prev.raw_text.push_str(&text);
                }
                _ => turns.push(Utterance::new(speaker, text)),
            }
        }
        if turns.len() < 2 {
            return Err(bad(some_id(), "a dialogue needs at least two alternating turns".into()));
        }
        let goal = match obj.get("goal") {
            None | Some(Value::Null) => None,
            Some(g) => Some(
                serde_json::from_value::<GoalSpec>(g.clone())
                    .map_err(|e| bad(some_id(), format!("invalid goal: {e}")))?,
            ),
        };
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        dialogues.push(Dialogue {
            dialogue_id: id,
            turns,
            goal,
        });
    }
    Ok(dialogues)
}

/// Delexicalizes and tokenizes every turn.
pub fn prepare_dialogue(dialogue: &Dialogue, delex: &Delexicalizer) -> Dialogue {
    Dialogue {
        dialogue_id: dialogue.dialogue_id.clone(),
        turns: dialogue.turns.iter().map(|u| delex.apply(u)).collect(),
        goal: dialogue.goal.clone(),
    }
}

/// Emits one `<system, user, system>` window per exchange.
pub fn make_triples(dialogues: &[Dialogue]) -> Vec<ContextTriple> {
    let mut out = Vec::new();
    for d in dialogues {
        out.extend(dialogue_triples(d));
    }
    out
}

fn dialogue_triples(d: &Dialogue) -> Vec<ContextTriple> {
    let sentinel = Utterance::empty_system();
    // offset 1 when a placeholder system turn is prepended
    let (padded, offset): (Vec<&Utterance>, usize) = match d.turns.first() {
        Some(first) if first.speaker == Speaker::User => {
            (std::iter::once(&sentinel).chain(d.turns.iter()).collect(), 1)
        }
        _ => (d.turns.iter().collect(), 0),
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i + 2 < padded.len() {
        let (s1, u, s2) = (padded[i], padded[i + 1], padded[i + 2]);
        if s1.speaker == Speaker::System && u.speaker == Speaker::User && s2.speaker == Speaker::System {
            out.push(ContextTriple {
                s1: s1.clone(),
                u: u.clone(),
                s2: s2.clone(),
                dialogue_id: d.dialogue_id.clone(),
                turn_index: i + 2 - offset,
            });
        }
        i += 2;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue(id: &str, speakers: &[Speaker]) -> Dialogue {
        Dialogue {
            dialogue_id: id.into(),
            turns: speakers
                .iter()
                .enumerate()
                .map(|(i, s)| Utterance::new(*s, format!("turn {i}")).tokenized())
                .collect(),
            goal: None,
        }
    }

    use Speaker::{System as S, User as U};

    #[test]
    fn loads_two_dialogues() {
        let json = r#"[
          {"dialogue_id": "a", "turns": [
            {"speaker": "user", "text": "hi"}, {"speaker": "system", "text": "hello"},
            {"speaker": "user", "text": "bye"}, {"speaker": "system", "text": "goodbye"}]},
          {"dialogue_id": "b", "turns": [
            {"speaker": "system", "text": "welcome"}, {"speaker": "user", "text": "hi"},
            {"speaker": "system", "text": "how can i help"}, {"speaker": "USER", "text": "a taxi"}],
           "goal": {"taxi": {"constraints": {"destination": "museum"}, "requested": ["phone"]}}}
        ]"#;
        let ds = parse_dialogues(json, "inline").unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.iter().all(|d| d.turns.len() == 4));
        assert_eq!(ds[1].turns[0].speaker, S);
        assert_eq!(ds[1].goal.as_ref().unwrap().domains["taxi"].requested, vec!["phone"]);
    }

    #[test]
    fn missing_field_names_the_field() {
        let json = r#"[{"dialogue_id": "x", "turns": [{"speaker": "user"}]}]"#;
        let err = parse_dialogues(json, "f.json").unwrap_err();
        match &err {
            CorpusError::MissingField { field, index, .. } => {
                assert_eq!(field, "turns[0].text");
                assert_eq!(*index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("turns[0].text"));
        let err = parse_dialogues(r#"[{"turns": []}]"#, "f.json").unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { ref field, .. } if field == "dialogue_id"));
    }

    #[test]
    fn parse_error_reports_line() {
        let err = parse_dialogues("[\n{\"dialogue_id\": }\n]", "f.json").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }));
    }

    #[test]
    fn same_speaker_turns_are_merged() {
        let json = r#"[{"dialogue_id": "m", "turns": [
            {"speaker": "user", "text": "hi"}, {"speaker": "user", "text": "i need a hotel"},
            {"speaker": "system", "text": "sure"}]}]"#;
        let ds = parse_dialogues(json, "inline").unwrap();
        assert_eq!(ds[0].turns.len(), 2);
        assert_eq!(ds[0].turns[0].raw_text, "hi i need a hotel");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let one = r#"{"dialogue_id": "d", "turns": [{"speaker": "user", "text": "a"}, {"speaker": "system", "text": "b"}]}"#;
        let json = format!("[{one},{one}]");
        assert!(matches!(parse_dialogues(&json, "x"), Err(CorpusError::DuplicateId(_))));
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_triples(&[dialogue("a", &[S, U, S, U, S])]).len(), 2);
        assert_eq!(make_triples(&[dialogue("b", &[S, U])]).len(), 0);
        assert_eq!(make_triples(&[dialogue("c", &[U, S, U, S])]).len(), 2);
        assert_eq!(make_triples(&[dialogue("d", &[U, S, U])]).len(), 1);
    }

    #[test]
    fn user_first_gets_sentinel() {
        let t = make_triples(&[dialogue("a", &[U, S])]);
        assert_eq!(t.len(), 1);
        assert!(t[0].s1.is_empty_system());
        assert_eq!(t[0].s1.tokens, vec![EMPTY_SYSTEM_TOKEN]);
        assert_eq!(t[0].turn_index, 1);
        assert_eq!(t[0].u.raw_text, "turn 0");
    }

    #[test]
    fn triples_are_consecutive() {
        let d = dialogue("a", &[U, S, U, S, U, S, U]);
        for t in make_triples(std::slice::from_ref(&d)) {
            assert_eq!(d.turns[t.turn_index], t.s2);
            assert_eq!(d.turns[t.turn_index - 1], t.u);
            if t.turn_index >= 2 {
                assert_eq!(d.turns[t.turn_index - 2], t.s1);
            } else {
                assert!(t.s1.is_empty_system());
            }
        }
    }

    #[test]
    fn goal_validation() {
        let ont = Ontology::from_json(r#"{"hotel-area": ["north"], "hotel-phone": ["0123"]}"#).unwrap();
        let mut g = GoalSpec::default();
        g.domains.insert(
            "hotel".into(),
            DomainGoal {
                constraints: [("area".to_string(), "north".to_string())].into(),
                requested: vec!["phone".into()],
            },
        );
        assert!(g.validate(&ont).is_ok());
        g.domains.get_mut("hotel").unwrap().requested.push("postcode".into());
        assert!(g.validate(&ont).is_err());
    }

    #[test]
    fn ontology_rejects_empty_value_list() {
        assert!(Ontology::from_json(r#"{"hotel-phone": []}"#).is_err());
        let o = Ontology::from_json(r#"{"Hotel-Phone": ["1"]}"#).unwrap();
        assert!(o.slots.contains_key("hotel-phone"));
    }

    #[test]
    fn database_requires_identifier() {
        assert!(Database::from_json(r#"{"hotel": [{"area": "north"}]}"#).is_err());
        let db = Database::from_json(r#"{"train": [{"trainID": "TR1", "price": 10.5}]}"#).unwrap();
        assert_eq!(entity_key(&db.records("train")[0]), Some("TR1"));
        assert_eq!(db.records("train")[0]["price"], "10.5");
    }
}
