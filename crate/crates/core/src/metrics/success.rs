use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{entity_key, Database, EntityRecord, GoalSpec, Ontology, DELEX_SLOTS, ENTITY_KEY_FIELDS};
use crate::text::tokenize;

/// Domains whose goals are satisfied by informing an entity.
pub const INFORM_DOMAINS: [&str; 4] = ["restaurant", "hotel", "attraction", "train"];

/// Version tag of the matching conventions below; recorded in reports.
pub const EVALUATOR_CONVENTIONS: &str = "inform-request/v1: name or id-placeholder mention, \
     constraint slots compared only when present in the record, leaveat >= goal, arriveby <= goal; \
     request by placeholder or ontology/database value";

/// Generated system responses of one dialogue, in turn order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedDialogue {
    pub dialogue_id: String,
    pub responses: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessScores {
    pub inform: f64,
    pub request: f64,
    /// Dialogues with at least one constrained inform domain.
    pub inform_dialogues: usize,
    pub inform_successes: usize,
    pub requested_slots: usize,
    pub requested_hits: usize,
    /// Dialogues without a goal, left out of both scores.
    pub excluded: usize,
}

fn satisfies(domain: &str, rec: &EntityRecord, constraints: &BTreeMap<String, String>) -> bool {
    constraints.iter().all(|(slot, want)| {
        let want = want.trim().to_lowercase();
        if want == "dontcare" || want.is_empty() {
            return true;
        }
        match rec.get(slot) {
            None => true,
            Some(have) => {
                let have = have.trim().to_lowercase();
                match (domain, slot.as_str()) {
                    ("train", "leaveat") => have >= want,
                    ("train", "arriveby") => have <= want,
                    _ => have == want,
                }
            }
        }
    })
}

fn contains_seq(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Inform and request percentages of generated responses against the
/// user goals.
pub fn inform_request(
    dialogues: &[GeneratedDialogue],
    goals: &BTreeMap<String, Option<GoalSpec>>,
    db: &Database,
    ontology: &Ontology,
) -> SuccessScores {
    let mut s = SuccessScores {
        inform: 0.0,
        request: 0.0,
        inform_dialogues: 0,
        inform_successes: 0,
        requested_slots: 0,
        requested_hits: 0,
        excluded: 0,
    };
    for d in dialogues {
        let Some(Some(goal)) = goals.get(&d.dialogue_id) else {
            s.excluded += 1;
            continue;
        };
        let responses = &d.responses;
        let mentions = |seq: &[String]| responses.iter().any(|r| contains_seq(r, seq));
        let has_token = |tok: &str| responses.iter().any(|r| r.iter().any(|t| t == tok));

        let mut constrained = 0;
        let mut informed = 0;
        for (domain, dg) in &goal.domains {
            if !INFORM_DOMAINS.contains(&domain.as_str()) || dg.constraints.is_empty() {
                continue;
            }
            constrained += 1;
            let ok = db.records(domain).iter().filter(|r| satisfies(domain, r, &dg.constraints)).any(|r| {
                let by_name = entity_key(r).is_some_and(|k| mentions(&tokenize(k)));
                let by_placeholder = ENTITY_KEY_FIELDS
                    .iter()
                    .filter(|f| DELEX_SLOTS.contains(f) && r.contains_key(**f))
                    .any(|f| has_token(&format!("{domain}-{f}")));
                by_name || by_placeholder
            });
            if ok {
                informed += 1;
            }
        }
        if constrained > 0 {
            s.inform_dialogues += 1;
            if informed == constrained {
                s.inform_successes += 1;
            }
        }

        for (domain, dg) in &goal.domains {
            for slot in &dg.requested {
                s.requested_slots += 1;
                if has_token(&format!("{domain}-{slot}")) {
                    s.requested_hits += 1;
                    continue;
                }
                let mut values: HashSet<&str> = ontology.values(domain, slot).iter().map(String::as_str).collect();
                values.extend(db.records(domain).iter().filter_map(|r| r.get(slot).map(String::as_str)));
                if values.into_iter().any(|v| mentions(&tokenize(v))) {
                    s.requested_hits += 1;
                }
            }
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    s.inform = pct(s.inform_successes, s.inform_dialogues);
    s.request = pct(s.requested_hits, s.requested_slots);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db() -> Database {
        Database::from_json(
            r#"{
              "restaurant": [
                {"name": "golden wok", "area": "north", "food": "chinese", "pricerange": "cheap"},
                {"name": "the copper kettle", "area": "centre", "food": "british", "pricerange": "expensive"}
              ],
              "train": [
                {"trainid": "TR1111", "departure": "cambridge", "destination": "ely", "leaveat": "09:00", "arriveby": "09:30", "day": "monday"},
                {"trainid": "TR2222", "departure": "cambridge", "destination": "ely", "leaveat": "07:00", "arriveby": "07:30", "day": "monday"}
              ]
            }"#,
        )
        .unwrap()
    }

    fn ont() -> Ontology {
        Ontology::from_json(
            r#"{
              "restaurant-area": ["north", "centre"],
              "restaurant-phone": ["01223 000000"],
              "restaurant-postcode": ["cb1 1aa"],
              "train-leaveat": ["09:00", "07:00"],
              "train-trainid": ["TR1111", "TR2222"],
              "train-price": ["10.10 pounds"]
            }"#,
        )
        .unwrap()
    }

    fn goal(json: &str) -> Option<GoalSpec> {
        Some(serde_json::from_str(json).unwrap())
    }

    fn gen(id: &str, responses: &[&str]) -> GeneratedDialogue {
        GeneratedDialogue {
            dialogue_id: id.into(),
            responses: responses.iter().map(|r| tokenize(r)).collect(),
        }
    }

    #[test]
    fn constraint_comparisons() {
        let rec: EntityRecord = [("leaveat".to_string(), "09:00".to_string())].into();
        let c = |k: &str, v: &str| BTreeMap::from([(k.to_string(), v.to_string())]);
        assert!(satisfies("train", &rec, &c("leaveat", "08:30")));
        assert!(!satisfies("train", &rec, &c("leaveat", "09:15")));
        assert!(satisfies("train", &rec, &c("day", "friday")));
        assert!(satisfies("restaurant", &rec, &c("leaveat", "dontcare")));
    }

    #[test]
    fn two_dialogue_fixture() {
        let goals = BTreeMap::from([
            ("a".to_string(), goal(r#"{"restaurant": {"constraints": {"area": "north"}, "requested": ["phone", "postcode"]}}"#)),
            ("b".to_string(), goal(r#"{"train": {"constraints": {"leaveat": "08:00", "destination": "ely"}, "requested": ["price"]}}"#)),
        ]);
        let dialogues = vec![
            gen("a", &["golden wok is in the north .", "the phone is restaurant-phone ."]),
            // TR2222 leaves too early, and no id placeholder is used
            gen("b", &["tr2222 leaves at 07:00 ."]),
        ];
        let s = inform_request(&dialogues, &goals, &db(), &ont());
        assert_eq!((s.inform_successes, s.inform_dialogues), (1, 2));
        assert_eq!((s.requested_hits, s.requested_slots), (1, 3));
        assert_eq!(s.inform, 50.0);
        assert!((s.request - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn id_placeholder_counts_when_a_train_satisfies() {
        let goals = BTreeMap::from([(
            "b".to_string(),
            goal(r#"{"train": {"constraints": {"leaveat": "08:00"}, "requested": ["trainid"]}}"#),
        )]);
        let s = inform_request(&[gen("b", &["train-trainid leaves then ."])], &goals, &db(), &ont());
        assert_eq!((s.inform, s.request), (100.0, 100.0));
    }

    #[test]
    fn goalless_dialogues_are_excluded() {
        let goals = BTreeMap::from([("a".to_string(), None)]);
        let s = inform_request(&[gen("a", &["hi"]), gen("zz", &["hi"])], &goals, &db(), &ont());
        assert_eq!(s.excluded, 2);
        assert_eq!((s.inform_dialogues, s.requested_slots), (0, 0));
    }

    #[test]
    fn adding_a_satisfying_mention_never_hurts() {
        let goals = BTreeMap::from([(
            "a".to_string(),
            goal(r#"{"restaurant": {"constraints": {"area": "centre"}, "requested": []}}"#),
        )]);
        let mut d = gen("a", &["golden wok ."]);
        let before = inform_request(&[d.clone()], &goals, &db(), &ont()).inform;
        d.responses.push(tokenize("the copper kettle is nice"));
        let after = inform_request(&[d], &goals, &db(), &ont()).inform;
        assert!(after >= before);
        assert_eq!(after, 100.0);
    }
}
